"""Pseudo-label pipeline: candidate selection, seeding, weighted propagation.

Every epoch the pipeline is recomputed from the current embeddings and
prototypes: unlabeled nodes far from every known prototype become new-class
candidates, each candidate is seeded with its nearest new prototype, the
seeds diffuse over distance-weighted edges, and a Shannon-entropy filter
keeps only confident pseudo-labels for the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ndtensor as nd
from .errors import ContractViolation
from .prototypes import nll_loss

WEIGHT_EPS = 1e-8
WEIGHT_CAP = 1e6
ENTROPY_MODES = ("drop_top_decile", "keep_bottom_decile")


@dataclass
class PseudoLabelState:
    """Per-epoch artifacts of the pipeline (diagnostic snapshot)."""

    gamma: float
    candidates: np.ndarray
    seed_columns: np.ndarray
    edge_weights: sp.csr_matrix
    propagated: np.ndarray
    survivors: np.ndarray
    survivor_columns: np.ndarray
    active_prototypes: np.ndarray


def labeled_similarities(z_values, vectors, known_ids, labeled_nodes):
    """Per labeled node: max inner product against the known prototypes."""
    labeled_nodes = np.asarray(labeled_nodes, dtype=np.intp)
    if labeled_nodes.size == 0:
        raise ContractViolation("no labeled nodes to calibrate the threshold")
    sims = z_values[labeled_nodes] @ vectors[known_ids].T
    return sims.max(axis=1)


def compute_gamma(labeled_sims, q):
    """Similarity threshold leaving at least a q-fraction of labeled nodes above it.

    Returns the k-th smallest labeled similarity with k = floor((1-q)*m) + 1.
    """
    if not 0.0 < q < 1.0:
        raise ContractViolation(f"q must be in (0, 1), got {q}")
    sims = np.sort(np.asarray(labeled_sims, dtype=np.float64))
    if sims.size == 0:
        raise ContractViolation("empty similarity list")
    # The epsilon guards the floor against representation error when
    # (1-q)*m is mathematically an integer.
    k = min(int(math.floor((1.0 - q) * sims.size + 1e-9)) + 1, sims.size)
    return float(sims[k - 1])


def select_candidates(unlabeled_nodes, z_values, vectors, known_ids, gamma):
    """Unlabeled nodes whose best known-prototype similarity is below gamma."""
    unlabeled_nodes = np.asarray(unlabeled_nodes, dtype=np.intp)
    if unlabeled_nodes.size == 0:
        return unlabeled_nodes
    sims = (z_values[unlabeled_nodes] @ vectors[known_ids].T).max(axis=1)
    return unlabeled_nodes[sims < gamma]


def seed_assignment(candidates, z_values, vectors, new_ids):
    """Nearest new prototype per candidate (ties to the lowest prototype index).

    Returns (seed columns indexing the new-prototype list, active column ids).
    """
    new_ids = np.asarray(new_ids, dtype=np.intp)
    if new_ids.size == 0:
        raise ContractViolation("no new prototypes to assign")
    candidates = np.asarray(candidates, dtype=np.intp)
    if candidates.size == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    sims = z_values[candidates] @ vectors[new_ids].T
    cols = sims.argmax(axis=1)
    return cols, np.unique(cols)


def edge_weights(adjacency, z_values, vectors):
    """Reweight each stored edge (i, j) by 1 / (||z_j - p_c(i)|| + eps).

    p_c(i) is the prototype (over all of them) closest to z_i, so edges out
    of uncertain nodes carry little label flow. Weights are capped at 1e6.
    """
    adj = adjacency.tocsr()
    n = adj.shape[0]
    d2 = (
        np.square(z_values).sum(axis=1, keepdims=True)
        + np.square(vectors).sum(axis=1)
        - 2.0 * z_values @ vectors.T
    )
    closest = d2.argmin(axis=1)
    src = np.repeat(np.arange(n), np.diff(adj.indptr))
    dist = np.linalg.norm(z_values[adj.indices] - vectors[closest[src]], axis=1)
    weights = np.minimum(1.0 / (dist + WEIGHT_EPS), WEIGHT_CAP)
    return sp.csr_matrix((weights, adj.indices.copy(), adj.indptr.copy()),
                         shape=adj.shape)


def row_normalize(weights):
    """Scale each row to sum to one; rows without edges stay zero."""
    sums = np.asarray(weights.sum(axis=1)).ravel()
    inv = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return sp.diags(inv) @ weights


def propagate(seed_nodes, seed_columns, weights, num_columns, hops):
    """Diffuse one-hot seed rows for `hops` steps, then row-softmax.

    Seeds are re-clamped to their one-hot between steps (not after the last
    one), so a seed's final row reflects its neighborhood.
    """
    if hops < 1:
        raise ContractViolation(f"label propagation needs hops >= 1, got {hops}")
    seed_nodes = np.asarray(seed_nodes, dtype=np.intp)
    seed_columns = np.asarray(seed_columns, dtype=np.intp)
    flow = row_normalize(weights)
    state = np.zeros((weights.shape[0], num_columns))
    state[seed_nodes, seed_columns] = 1.0
    for step in range(hops):
        state = flow @ state
        if step < hops - 1:
            state[seed_nodes] = 0.0
            state[seed_nodes, seed_columns] = 1.0
    shifted = state - state.max(axis=1, keepdims=True)
    weights_exp = np.exp(shifted)
    return weights_exp / weights_exp.sum(axis=1, keepdims=True)


def row_entropy(probs):
    safe = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=1)


def entropy_filter(propagated, candidates, active_columns,
                   mode="drop_top_decile"):
    """Discard the least confident tenth of the candidates.

    `drop_top_decile` removes the ceil(0.1*|candidates|) highest-entropy rows;
    `keep_bottom_decile` keeps only the ceil(0.1*|candidates|) lowest-entropy
    rows. Survivors take the argmax over the seeded (active) columns, which
    equals the unrestricted argmax whenever the row received any label mass.
    """
    if mode not in ENTROPY_MODES:
        raise ContractViolation(f"unknown entropy mode {mode!r}")
    candidates = np.asarray(candidates, dtype=np.intp)
    if candidates.size == 0:
        return candidates, np.empty(0, dtype=np.intp)
    active_columns = np.asarray(active_columns, dtype=np.intp)
    entropies = row_entropy(propagated[candidates])
    decile = math.ceil(0.1 * candidates.size)
    order = np.argsort(entropies, kind="stable")
    keep = order[:-decile] if mode == "drop_top_decile" else order[:decile]
    keep = np.sort(keep)
    survivors = candidates[keep]
    restricted = propagated[survivors][:, active_columns]
    labels = active_columns[restricted.argmax(axis=1)]
    return survivors, labels


def pseudo_label_loss(z, protoset, survivors, survivor_columns, active_columns):
    """Prototype NLL of survivors against the active new prototypes."""
    survivors = np.asarray(survivors, dtype=np.intp)
    active_columns = np.asarray(active_columns, dtype=np.intp)
    if survivors.size == 0 or active_columns.size == 0:
        zero = nd.constant([[0.0]], name="pseudo_empty")
        zero.meta["empty"] = True
        return zero
    positions = {int(c): i for i, c in enumerate(active_columns)}
    try:
        target = np.array([positions[int(c)] for c in survivor_columns])
    except KeyError as exc:
        raise ContractViolation(
            f"survivor assigned to inactive prototype column {exc.args[0]}")
    subset = protoset.new_ids[active_columns]
    return nll_loss(z, survivors, target, protoset, subset, protoset.tau_p)


def run_pipeline(adjacency, z_values, protoset, labeled_nodes, unlabeled_nodes,
                 gamma_quantile, hops, entropy_mode="drop_top_decile"):
    """Full per-epoch pipeline from raw embeddings to surviving pseudo-labels."""
    vectors = protoset.vectors.value
    sims = labeled_similarities(z_values, vectors, protoset.known_ids,
                                labeled_nodes)
    gamma = compute_gamma(sims, gamma_quantile)
    candidates = select_candidates(unlabeled_nodes, z_values, vectors,
                                   protoset.known_ids, gamma)
    seed_cols, active = seed_assignment(candidates, z_values, vectors,
                                        protoset.new_ids)
    weights = edge_weights(adjacency, z_values, vectors)
    num_new = protoset.new_ids.size
    if candidates.size:
        propagated = propagate(candidates, seed_cols, weights, num_new, hops)
        survivors, survivor_cols = entropy_filter(propagated, candidates,
                                                  active, entropy_mode)
    else:
        propagated = np.full((adjacency.shape[0], num_new), 1.0 / max(num_new, 1))
        survivors = np.empty(0, dtype=np.intp)
        survivor_cols = np.empty(0, dtype=np.intp)
    return PseudoLabelState(gamma, candidates, seed_cols, weights, propagated,
                            survivors, survivor_cols, active)


@dataclass
class EdgeWeightReport:
    """Mean/std of edge weights split by whether the endpoints share a label."""

    homophilic_mean: float | None
    homophilic_std: float | None
    heterophilic_mean: float | None
    heterophilic_std: float | None

    @property
    def mean_difference(self):
        if self.homophilic_mean is None or self.heterophilic_mean is None:
            return None
        return self.homophilic_mean - self.heterophilic_mean


def edge_weight_report(weights, labels):
    """Diagnostic summary over the stored (directed) edges; needs true labels."""
    weights = weights.tocsr()
    labels = np.asarray(labels)
    src = np.repeat(np.arange(weights.shape[0]), np.diff(weights.indptr))
    same = labels[src] == labels[weights.indices]
    values = weights.data

    def stats(mask):
        if not mask.any():
            return None, None
        return float(values[mask].mean()), float(values[mask].std())

    homo_mean, homo_std = stats(same)
    hetero_mean, hetero_std = stats(~same)
    return EdgeWeightReport(homo_mean, homo_std, hetero_mean, hetero_std)
