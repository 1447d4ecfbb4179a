"""Graph-infomax loss over unlabeled nodes with a bilinear discriminator.

The discriminator scores how well an embedding matches the graph summary via
sigmoid(z W s^T); the loss rewards high scores for clean embeddings and low
scores for embeddings of corrupted (row-shuffled) features.
"""

from __future__ import annotations

import numpy as np

from . import ndtensor as nd
from .encoder import glorot

LOG_FLOOR = 1e-12


def init_discriminator(dim, rng):
    return nd.parameter(glorot(dim, dim, rng), name="discriminator")


def score_expr(z_rows, summary, disc):
    """Probability that each row belongs to the summary: sigmoid(z W s^T)."""
    return nd.sigmoid(nd.matmul(nd.matmul(z_rows, disc), nd.transpose(summary)))


def score(z_row, summary_row, weight):
    """Eval-mode scalar score for one embedding row."""
    raw = (np.atleast_2d(z_row) @ weight @ np.atleast_2d(summary_row).T).item()
    return 1.0 / (1.0 + np.exp(-raw))


def dgi_loss(unlabeled_rows, z, z_corrupted, summary, disc):
    """Mean binary discrimination loss over the unlabeled nodes.

    Log arguments are clamped at 1e-12, so the loss is finite and nonnegative
    even for saturated scores. Empty inputs give a flagged constant zero.
    """
    unlabeled_rows = np.asarray(unlabeled_rows, dtype=np.intp)
    if unlabeled_rows.size == 0:
        zero = nd.constant([[0.0]], name="dgi_empty")
        zero.meta["empty"] = True
        return zero
    clean = score_expr(nd.slice_rows(z, unlabeled_rows), summary, disc)
    corrupted = score_expr(nd.slice_rows(z_corrupted, unlabeled_rows), summary, disc)
    per_node = nd.add(nd.log(nd.clamp_min(clean, LOG_FLOOR)),
                      nd.log(nd.clamp_min(nd.one_minus(corrupted), LOG_FLOOR)))
    return nd.scalar_scale(nd.reduce_sum(per_node), -1.0 / unlabeled_rows.size)
