"""Contrastive alignment losses for the split-embedding separator.

The core ingredient is a distance-softmax InfoNCE: for anchor a_j against
candidates {b_k},

    -log( exp(-||a_j - b_j||) / sum_k exp(-||a_j - b_k||) )

A2A aligns each half of the separator output with the matching ground-truth
audio embedding; A2V does the same against image embeddings. Each loss is
symmetric (both anchor directions) and averaged over the positive-pair
stream of length 2B (B tuples x 2 halves).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolationError, DataError
from .tensor import Tensor

MODES = ("A2A", "A2V", "A2A_plus_A2V")


@dataclass
class AlignmentConfig:
    mode: str = "A2A"
    weight: float = 1.0  # A2V weight in the combined mode
    cross_half_negatives: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolationError(f"alignment mode must be one of {MODES}, got {self.mode!r}")


def _check_unit_rows(x: Tensor, what: str, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(np.atleast_2d(x.data), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractViolationError(f"{what}: rows are not unit-normalized")


def infonce(j: int, anchors: Tensor, candidates: Tensor) -> Tensor:
    """Loss for anchor row ``j`` against all candidate rows."""
    n = candidates.data.shape[0]
    if not 0 <= j < anchors.data.shape[0]:
        raise ContractViolationError(f"infonce: anchor index {j} out of range")
    _check_unit_rows(anchors, "infonce anchors")
    _check_unit_rows(candidates, "infonce candidates")
    row = T.pairwise_dist(T.narrow(anchors, 0, j, j + 1), candidates)  # 1 x n
    pos = T.reshape(T.narrow(row, 1, j, j + 1), ())
    return T.add(pos, T.reshape(T.logsumexp_rows(T.neg(row)), ()))


def symmetric_infonce_sum(x: Tensor, y: Tensor) -> Tensor:
    """Sum over j of InfoNCE(x_j, {y}) + InfoNCE(y_j, {x}) on unit rows."""
    if x.shape != y.shape:
        raise ContractViolationError(f"symmetric_infonce_sum: shapes {x.shape} vs {y.shape}")
    dist = T.pairwise_dist(x, y)
    diag = T.sum_all(T.diag_part(dist))
    lse_rows = T.sum_all(T.logsumexp_rows(T.neg(dist)))
    lse_cols = T.sum_all(T.logsumexp_rows(T.neg(T.transpose(dist))))
    return T.add(T.scale(diag, 2.0), T.add(lse_rows, lse_cols))


def _half_matrices(split_batch):
    h1 = T.stack_rows([se.half1 for se in split_batch])
    h2 = T.stack_rows([se.half2 for se in split_batch])
    return h1, h2


def _gt_matrices(gt_pairs, batch_size: int, what: str):
    if gt_pairs is None or len(gt_pairs) != batch_size:
        raise DataError(f"{what}: need one ground-truth pair per tuple")
    g1 = T.stack_rows([T._as_tensor(g[0]) for g in gt_pairs])
    g2 = T.stack_rows([T._as_tensor(g[1]) for g in gt_pairs])
    return g1, g2


def alignment_loss_matrices(h1: Tensor, h2: Tensor, g1: Tensor, g2: Tensor,
                            cross_half_negatives: bool = False) -> Tensor:
    """Batched two-stream loss on raw (unnormalized) embedding matrices."""
    b = h1.data.shape[0]
    if b < 2:
        raise ContractViolationError("alignment loss needs batch size >= 2")
    h1n, h2n = T.l2_normalize(h1), T.l2_normalize(h2)
    g1n, g2n = T.l2_normalize(g1), T.l2_normalize(g2)
    if cross_half_negatives:
        rows = [T.narrow(h1n, 0, i, i + 1) for i in range(b)]
        rows += [T.narrow(h2n, 0, i, i + 1) for i in range(b)]
        gts = [T.narrow(g1n, 0, i, i + 1) for i in range(b)]
        gts += [T.narrow(g2n, 0, i, i + 1) for i in range(b)]
        h_all = T.stack_rows([T.reshape(r, (r.data.shape[1],)) for r in rows])
        g_all = T.stack_rows([T.reshape(r, (r.data.shape[1],)) for r in gts])
        total = symmetric_infonce_sum(h_all, g_all)
    else:
        total = T.add(symmetric_infonce_sum(h1n, g1n), symmetric_infonce_sum(h2n, g2n))
    return T.scale(total, 1.0 / (2.0 * (2 * b)))


def a2a_loss(split_batch, gt_audio, cross_half_negatives: bool = False) -> Tensor:
    """Align halves with ground-truth audio embeddings (one pair per tuple)."""
    h1, h2 = _half_matrices(split_batch)
    g1, g2 = _gt_matrices(gt_audio, len(split_batch), "a2a_loss")
    return alignment_loss_matrices(h1, h2, g1, g2, cross_half_negatives)


def a2v_loss(split_batch, gt_image, cross_half_negatives: bool = False) -> Tensor:
    """Align halves with ground-truth image embeddings (one pair per tuple)."""
    h1, h2 = _half_matrices(split_batch)
    g1, g2 = _gt_matrices(gt_image, len(split_batch), "a2v_loss")
    return alignment_loss_matrices(h1, h2, g1, g2, cross_half_negatives)


def total_loss(config: AlignmentConfig, split_batch, gt_audio, gt_image) -> Tensor:
    h1, h2 = _half_matrices(split_batch)
    return total_loss_matrices(config, h1, h2,
                               gt_audio and _gt_matrices(gt_audio, len(split_batch), "total_loss"),
                               gt_image and _gt_matrices(gt_image, len(split_batch), "total_loss"))


def total_loss_matrices(config: AlignmentConfig, h1: Tensor, h2: Tensor,
                        gt_audio, gt_image) -> Tensor:
    """Mode dispatch on pre-stacked matrices; gt_* are (g1, g2) pairs."""
    if config.mode in ("A2A", "A2A_plus_A2V") and gt_audio is None:
        raise DataError(f"mode {config.mode} requires ground-truth audio embeddings")
    if config.mode in ("A2V", "A2A_plus_A2V") and gt_image is None:
        raise DataError(f"mode {config.mode} requires ground-truth image embeddings")
    if config.mode == "A2A":
        return alignment_loss_matrices(h1, h2, *gt_audio, config.cross_half_negatives)
    if config.mode == "A2V":
        return alignment_loss_matrices(h1, h2, *gt_image, config.cross_half_negatives)
    a2a = alignment_loss_matrices(h1, h2, *gt_audio, config.cross_half_negatives)
    a2v = alignment_loss_matrices(h1, h2, *gt_image, config.cross_half_negatives)
    return T.add(a2a, T.scale(a2v, config.weight))
