"""Learnable class prototypes: soft membership, prototype NLL losses, regularizer.

Prototypes live on the unit sphere next to the normalized embeddings, so the
membership distance is cosine distance d(z, p) = 1 - <z, p>. Known prototypes
are bound one-to-one to the sorted known class ids; new prototypes are free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ContractViolation

LOG_FLOOR = 1e-12


@dataclass
class PrototypeSet:
    vectors: nd.Expr
    known_ids: np.ndarray
    new_ids: np.ndarray
    known_classes: tuple
    tau_s: float
    tau_p: float

    @property
    def count(self):
        return self.vectors.value.shape[0]

    @property
    def dim(self):
        return self.vectors.value.shape[1]

    def class_to_prototype(self, labels):
        """Map known class ids to their prototype row indices."""
        lookup = {c: i for i, c in enumerate(self.known_classes)}
        try:
            return np.array([lookup[int(y)] for y in np.atleast_1d(labels)])
        except KeyError as exc:
            raise ContractViolation(f"label {exc.args[0]} is not a known class")


def init_prototypes(known_classes, num_new, dim, tau_s, tau_p, rng):
    if tau_s <= 0 or tau_p <= 0:
        raise ContractViolation("temperatures must be positive")
    known_classes = tuple(sorted(int(c) for c in known_classes))
    total = len(known_classes) + num_new
    vectors = rng.normal(size=(total, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return PrototypeSet(
        vectors=nd.parameter(vectors, name="prototypes"),
        known_ids=np.arange(len(known_classes)),
        new_ids=np.arange(len(known_classes), total),
        known_classes=known_classes,
        tau_s=float(tau_s),
        tau_p=float(tau_p),
    )


def renormalize(protoset):
    """Project prototype rows back to unit norm (called after each optimizer step)."""
    vectors = protoset.vectors.value
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    np.divide(vectors, norms, out=vectors, where=norms > 0)


def membership(z, vectors, subset, tau):
    """Softmax over -cosine-distance/tau restricted to the prototype subset.

    Accepts a single embedding row or a matrix of rows; rows sum to one.
    """
    if tau <= 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    subset = np.asarray(subset)
    if subset.size == 0:
        raise ContractViolation("membership needs a nonempty prototype subset")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    logits = (z @ vectors[subset].T - 1.0) / tau
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    probs = weights / weights.sum(axis=1, keepdims=True)
    return probs[0] if probs.shape[0] == 1 and z.shape[0] == 1 else probs


def membership_expr(z_rows, proto_rows, tau):
    """Differentiable membership over already-sliced embedding/prototype rows."""
    if tau <= 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    sims = nd.matmul(z_rows, nd.transpose(proto_rows))
    logits = nd.scalar_scale(nd.add(sims, nd.constant([[-1.0]])), 1.0 / tau)
    return nd.row_softmax(logits)


def nll_loss(z, node_rows, target_cols, protoset, subset_ids, tau):
    """Mean negative log membership, normalized by |subset| * |nodes|.

    `target_cols` index into `subset_ids`. Empty node sets yield a constant
    zero expression flagged with meta["empty"].
    """
    node_rows = np.asarray(node_rows, dtype=np.intp)
    subset_ids = np.asarray(subset_ids, dtype=np.intp)
    if subset_ids.size == 0:
        raise ContractViolation("nll_loss needs a nonempty prototype subset")
    if node_rows.size == 0:
        zero = nd.constant([[0.0]], name="nll_empty")
        zero.meta["empty"] = True
        return zero
    target_cols = np.asarray(target_cols, dtype=np.intp)
    if target_cols.min() < 0 or target_cols.max() >= subset_ids.size:
        raise ContractViolation("a node's target prototype is outside the subset")
    z_rows = nd.slice_rows(z, node_rows)
    proto_rows = nd.slice_rows(protoset.vectors, subset_ids)
    probs = membership_expr(z_rows, proto_rows, tau)
    onehot = np.zeros((node_rows.size, subset_ids.size))
    onehot[np.arange(node_rows.size), target_cols] = 1.0
    picked = nd.mul(nd.log(nd.clamp_min(probs, LOG_FLOOR)), nd.constant(onehot))
    scale = -1.0 / (subset_ids.size * node_rows.size)
    return nd.scalar_scale(nd.reduce_sum(picked), scale)


def supervised_loss(z, protoset, labeled_nodes, labels):
    """Prototype NLL of the labeled nodes against the known prototypes."""
    labeled_nodes = np.asarray(labeled_nodes, dtype=np.intp)
    if labeled_nodes.size == 0:
        zero = nd.constant([[0.0]], name="nll_empty")
        zero.meta["empty"] = True
        return zero
    cols = protoset.class_to_prototype(np.asarray(labels)[labeled_nodes])
    return nll_loss(z, labeled_nodes, cols, protoset, protoset.known_ids,
                    protoset.tau_s)


def mean_membership_expr(z, protoset, tau=None):
    """Mean over all nodes of the membership distribution over all prototypes."""
    tau = protoset.tau_s if tau is None else tau
    probs = membership_expr(z, protoset.vectors, tau)
    n = z.value.shape[0] if z.value is not None else nd.forward(z).shape[0]
    ones = nd.constant(np.ones((1, n)))
    return nd.scalar_scale(nd.matmul(ones, probs), 1.0 / n)


def regularizer(mean_membership_node, protoset):
    """KL(mean membership || uniform) plus the closest-pair repulsion term.

    The repulsion term adds exp(-||p_i - p_j||) for each prototype's nearest
    other prototype, so its gradient pushes the closest pairs apart.
    """
    mean_val = nd.forward(mean_membership_node)
    total = protoset.count
    if mean_val.shape != (1, total):
        raise ContractViolation(
            f"membership mean must be 1 x {total}, got {mean_val.shape}")
    if abs(mean_val.sum() - 1.0) > 1e-8:
        raise ContractViolation("membership mean is not a probability vector")

    safe = nd.clamp_min(mean_membership_node, LOG_FLOOR)
    kl = nd.add(nd.reduce_sum(nd.mul(mean_membership_node, nd.log(safe))),
                nd.constant([[np.log(total)]]))

    vectors = protoset.vectors.value
    deltas = vectors[:, None, :] - vectors[None, :, :]
    dists = np.linalg.norm(deltas, axis=2)
    np.fill_diagonal(dists, np.inf)
    partners = dists.argmin(axis=1)

    left = nd.slice_rows(protoset.vectors, np.arange(total))
    right = nd.slice_rows(protoset.vectors, partners)
    diff = nd.add(left, nd.scalar_scale(right, -1.0))
    sq_norms = nd.matmul(nd.mul(diff, diff), nd.constant(np.ones((protoset.dim, 1))))
    norms = nd.exp(nd.scalar_scale(nd.log(nd.clamp_min(sq_norms, 1e-24)), 0.5))
    repulsion = nd.reduce_sum(nd.exp(nd.scalar_scale(norms, -1.0)))
    return nd.add(kl, repulsion)
