"""Scoring and clustering: Hungarian-matched accuracies, k-means, silhouette,
spectral clustering, and the cluster-count estimator.

Matched accuracies treat predicted ids as anonymous cluster labels: a
maximum-agreement bijection between predicted and true ids is solved on the
evaluated subset before counting hits. Known-class accuracy is plain accuracy
(the model must emit real class ids there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .errors import CapabilityError, ContractViolation

DENSE_EIG_LIMIT = 20000


@dataclass(frozen=True)
class AssignmentResult:
    mapping: dict
    total_cost: float


@dataclass
class MetricsReport:
    method: str
    dataset: str
    fold: int
    repeat: int
    acc_all: float
    acc_known: float | None
    acc_new: float
    seed: int


def hungarian(cost_matrix):
    """Minimum-cost perfect matching on the (zero-padded) square cost matrix."""
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.size == 0:
        raise ContractViolation("empty cost matrix")
    if not np.isfinite(cost).all():
        raise ContractViolation("cost matrix must be finite")
    size = max(cost.shape)
    padded = np.zeros((size, size))
    padded[: cost.shape[0], : cost.shape[1]] = cost
    rows, cols = scipy.optimize.linear_sum_assignment(padded)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    return AssignmentResult(mapping, float(padded[rows, cols].sum()))


def matched_accuracy(predictions, truths, subset):
    """Hungarian-matched agreement rate between predicted and true ids on a subset."""
    subset = np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        raise ContractViolation("empty evaluation subset")
    preds = np.asarray(predictions)[subset]
    trues = np.asarray(truths)[subset]
    pred_ids, pred_idx = np.unique(preds, return_inverse=True)
    true_ids, true_idx = np.unique(trues, return_inverse=True)
    counts = np.zeros((pred_ids.size, true_ids.size))
    np.add.at(counts, (pred_idx, true_idx), 1.0)
    assignment = hungarian(-counts)
    agreement = -assignment.total_cost
    return agreement / subset.size


accuracy_all = matched_accuracy
accuracy_new = matched_accuracy


def accuracy_known(predictions, truths, subset):
    """Plain accuracy on the subset; no relabeling is applied."""
    subset = np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        raise ContractViolation("empty evaluation subset")
    preds = np.asarray(predictions)[subset]
    trues = np.asarray(truths)[subset]
    return float((preds == trues).mean())


def _careful_seeding(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.square(points - centers[0]).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.square(points - centers[j]).sum(axis=1))
    return centers


def _assign(points, centers):
    d2 = (
        np.square(points).sum(axis=1, keepdims=True)
        + np.square(centers).sum(axis=1)
        - 2.0 * points @ centers.T
    )
    return d2.argmin(axis=1), d2


def kmeans(points, k, seed, max_iters=300, return_inertia=False):
    """Lloyd iterations from careful (distance-squared) seeding.

    Empty clusters are re-seeded from the point farthest from its center.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ContractViolation("k must be >= 1")
    if k > n:
        raise ContractViolation(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)
    centers = _careful_seeding(points, k, rng)
    labels = np.full(n, -1)
    inertia_trace = []
    for _ in range(max_iters):
        new_labels, d2 = _assign(points, centers)
        for cluster in range(k):
            if not (new_labels == cluster).any():
                farthest = d2[np.arange(n), new_labels].argmax()
                centers[cluster] = points[farthest]
                new_labels[farthest] = cluster
        inertia_trace.append(
            float(np.square(points - centers[new_labels]).sum()))
        if (new_labels == labels).all():
            break
        labels = new_labels
        for cluster in range(k):
            members = points[labels == cluster]
            if len(members):
                centers[cluster] = members.mean(axis=0)
    if return_inertia:
        return labels, centers, inertia_trace
    return labels, centers


def constrained_kmeans(points, k, anchor_index, anchor_cluster, seed,
                       max_iters=300):
    """k-means where anchored points are clamped to fixed cluster ids.

    With no anchors this is exactly `kmeans` under the same seed. Anchored
    cluster centers start at the anchor means; remaining centers come from
    careful seeding.
    """
    anchor_index = np.asarray(anchor_index, dtype=np.intp)
    anchor_cluster = np.asarray(anchor_cluster, dtype=np.intp)
    if anchor_index.size == 0:
        labels, _ = kmeans(points, k, seed, max_iters)
        return labels
    if anchor_cluster.size and anchor_cluster.max() >= k:
        raise ContractViolation("anchor cluster id out of range")
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k > n:
        raise ContractViolation(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)
    centers = np.zeros((k, points.shape[1]))
    anchored_ids = np.unique(anchor_cluster)
    for cluster in anchored_ids:
        centers[cluster] = points[anchor_index[anchor_cluster == cluster]].mean(axis=0)
    free_ids = np.setdiff1d(np.arange(k), anchored_ids)
    if free_ids.size:
        centers[free_ids] = _careful_seeding(points, free_ids.size, rng)

    unanchored = np.setdiff1d(np.arange(n), anchor_index)
    labels = np.full(n, -1)
    labels[anchor_index] = anchor_cluster
    for _ in range(max_iters):
        new_labels, d2 = _assign(points, centers)
        new_labels[anchor_index] = anchor_cluster
        for cluster in free_ids:
            if not (new_labels == cluster).any():
                if unanchored.size:
                    farthest = unanchored[
                        d2[unanchored, new_labels[unanchored]].argmax()]
                    centers[cluster] = points[farthest]
                    new_labels[farthest] = cluster
        if (new_labels == labels).all():
            break
        labels = new_labels
        for cluster in range(k):
            members = points[labels == cluster]
            if len(members):
                centers[cluster] = members.mean(axis=0)
    return labels


def silhouette(points, labels):
    """Mean silhouette score; singleton-cluster points contribute 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < 2:
        raise ContractViolation("silhouette needs at least 2 clusters")
    dists = cdist(points, points)
    scores = np.zeros(len(points))
    sizes = {c: int((labels == c).sum()) for c in ids}
    for i in range(len(points)):
        own = labels[i]
        if sizes[own] == 1:
            continue
        a = dists[i, labels == own].sum() / (sizes[own] - 1)
        b = min(dists[i, labels == other].mean() for other in ids if other != own)
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def spectral_cluster(graph, k, seed):
    """k-means on row-normalized bottom eigenvectors of the normalized Laplacian."""
    adj = graph.adjacency if hasattr(graph, "adjacency") else sp.csr_matrix(graph)
    n = adj.shape[0]
    if n > DENSE_EIG_LIMIT:
        raise CapabilityError(
            f"spectral clustering is limited to {DENSE_EIG_LIMIT} nodes, got {n}")
    if k < 1:
        raise ContractViolation("k must be >= 1")
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.divide(1.0, np.sqrt(degrees),
                         out=np.zeros_like(degrees), where=degrees > 0)
    scaled = sp.diags(inv_sqrt) @ adj @ sp.diags(inv_sqrt)
    laplacian = np.eye(n) - scaled.toarray()
    _, vectors = scipy.linalg.eigh(laplacian, subset_by_index=[0, k - 1])
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    embedding = np.divide(vectors, norms, out=np.zeros_like(vectors),
                          where=norms > 0)
    labels, _ = kmeans(embedding, k, seed)
    return labels


def estimate_num_classes(embeddings, anchor_nodes, anchor_labels, val_nodes,
                         val_labels, unlabeled_nodes, k_max, seed,
                         min_cluster_share=0.05):
    """Estimate how many classes the unlabeled nodes contain.

    Sweeps k, running anchored k-means over probe+unlabeled embeddings; picks
    k maximizing matched accuracy on the validation probes and k maximizing
    the silhouette on the unlabeled part, averages them (half-up), reruns at
    that k, and counts the clusters holding at least `min_cluster_share` of
    the points. Ties in either argmax go to the smallest k.
    """
    anchor_nodes = np.asarray(anchor_nodes, dtype=np.intp)
    val_nodes = np.asarray(val_nodes, dtype=np.intp)
    unlabeled_nodes = np.asarray(unlabeled_nodes, dtype=np.intp)
    anchor_labels = np.asarray(anchor_labels)
    val_labels = np.asarray(val_labels)

    probe_classes = np.unique(anchor_labels)
    if k_max < probe_classes.size:
        raise ContractViolation(
            f"k_max={k_max} is below the {probe_classes.size} anchored classes")
    anchor_cluster = np.searchsorted(probe_classes, anchor_labels)

    pool = np.concatenate([anchor_nodes, val_nodes, unlabeled_nodes])
    points = embeddings[pool]
    anchor_pos = np.arange(anchor_nodes.size)
    val_pos = np.arange(anchor_nodes.size, anchor_nodes.size + val_nodes.size)
    unlab_pos = np.arange(anchor_nodes.size + val_nodes.size, pool.size)

    k_min = max(2, probe_classes.size)
    ks, val_scores, sil_scores = [], [], []
    for k in range(k_min, k_max + 1):
        labels = constrained_kmeans(points, k, anchor_pos, anchor_cluster,
                                    seed=np.random.default_rng([seed, k]).integers(2**31))
        ks.append(k)
        val_scores.append(matched_accuracy(labels[val_pos], val_labels,
                                           np.arange(val_pos.size)))
        unlab_labels = labels[unlab_pos]
        if np.unique(unlab_labels).size < 2:
            sil_scores.append(-1.0)
        else:
            sil_scores.append(silhouette(points[unlab_pos], unlab_labels))

    k_val = ks[int(np.argmax(val_scores))]
    k_sil = ks[int(np.argmax(sil_scores))]
    k_hat = int(math.floor((k_val + k_sil) / 2.0 + 0.5))
    k_hat = max(k_min, min(k_hat, k_max))
    final = constrained_kmeans(points, k_hat, anchor_pos, anchor_cluster,
                               seed=np.random.default_rng([seed, 0]).integers(2**31))
    counts = np.bincount(final, minlength=k_hat)
    return int((counts / pool.size >= min_cluster_share).sum())
