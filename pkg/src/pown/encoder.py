"""Graph-convolutional encoder with feature-shuffle corruption and mean summary.

The encoder stacks 2 or 3 propagation layers over the normalized adjacency
and L2-normalizes its output rows, so inner products between embeddings and
prototypes are cosine similarities. Checkpoints are a flat little-endian
binary of named float64 matrices (see `save_checkpoint`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ndtensor as nd
from .errors import ContractViolation


@dataclass
class GcnParams:
    weights: list
    hidden_dim: int
    num_layers: int
    dropout_rate: float


def glorot(rows, cols, rng):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, (rows, cols))


def init_gcn_params(feature_dim, hidden_dim, num_layers, dropout_rate, rng):
    if num_layers not in (2, 3):
        raise ContractViolation(f"num_layers must be 2 or 3, got {num_layers}")
    dims = [feature_dim] + [hidden_dim] * num_layers
    weights = [
        nd.parameter(glorot(dims[i], dims[i + 1], rng), name=f"gcn_w{i + 1}")
        for i in range(num_layers)
    ]
    return GcnParams(weights, hidden_dim, num_layers, dropout_rate)


def _sparse_dropout(matrix, rate, rng):
    kept = matrix.copy()
    kept.data = kept.data * ((rng.random(kept.data.shape) >= rate) / (1.0 - rate))
    return kept


def encode(params, adj_norm, features, train_mode=False, rng=None):
    """Build the embedding expression: normalized GCN output, one row per node.

    `features` may be dense (ndarray) or CSR; dropout is applied to every
    layer input only in train mode, drawn from `rng`.
    """
    use_dropout = train_mode and params.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ContractViolation("train-mode encode with dropout needs an rng")
    adj = nd.sparse_constant(adj_norm, name="adj_norm")

    if sp.issparse(features):
        feats = features
        if use_dropout:
            feats = _sparse_dropout(feats, params.dropout_rate, rng)
        hidden = nd.spmm(adj, nd.spmm(nd.sparse_constant(feats, name="x"),
                                      params.weights[0]))
    else:
        x = nd.constant(features, name="x")
        if use_dropout:
            x = nd.dropout_mask_apply(
                x, nd.dropout_mask(features.shape, params.dropout_rate, rng))
        hidden = nd.spmm(adj, nd.matmul(x, params.weights[0]))

    for weight in params.weights[1:]:
        hidden = nd.relu(hidden)
        if use_dropout:
            hidden = nd.dropout_mask_apply(
                hidden, nd.dropout_mask((features.shape[0], params.hidden_dim),
                                        params.dropout_rate, rng))
        hidden = nd.spmm(adj, nd.matmul(hidden, weight))
    return nd.row_l2_normalize(hidden)


def corrupt(features, rng):
    """Shuffle feature rows with a seeded permutation (multiset preserved)."""
    perm = rng.permutation(features.shape[0])
    return features[perm]


def summarize(z):
    """Column-wise mean of the embeddings as a 1 x h summary expression."""
    n = z.value.shape[0] if z.value is not None else None
    if n is None:
        nd.forward(z)
        n = z.value.shape[0]
    if n == 0:
        raise ContractViolation("summarize needs at least one row")
    ones = nd.constant(np.ones((1, n)), name="summary_ones")
    return nd.scalar_scale(nd.matmul(ones, z), 1.0 / n)


_MAGIC = b"PWNCKPT1"


def save_checkpoint(path, arrays):
    """Write named float64 matrices: magic, count, then per-array records.

    Record layout (all little-endian): uint16 name length, UTF-8 name,
    int64 rows, int64 cols, rows*cols float64 values.
    """
    with open(path, "wb") as handle:
        handle.write(_MAGIC)
        handle.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<qq", arr.shape[0], arr.shape[1]))
            handle.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as handle:
        if handle.read(len(_MAGIC)) != _MAGIC:
            raise ContractViolation(f"{path} is not a checkpoint file")
        (count,) = struct.unpack("<I", handle.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", handle.read(2))
            name = handle.read(name_len).decode("utf-8")
            rows, cols = struct.unpack("<qq", handle.read(16))
            data = np.frombuffer(handle.read(rows * cols * 8), dtype="<f8")
            arrays[name] = data.reshape(rows, cols).copy()
    return arrays
