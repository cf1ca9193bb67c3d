"""Sequence-level matching cost and an O(n^3) Hungarian solver."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .box_ops import sequence_box_cost
from .structures import ClipTargets, PredictionSet
from .tensor import softmax


@dataclass(frozen=True)
class Assignment:
    """sigma[i] is the prediction sequence matched to ground-truth row i."""

    sigma: tuple[int, ...]
    cost: float

    def matched_pairs(self, num_real: int) -> list[tuple[int, int]]:
        return [(i, self.sigma[i]) for i in range(num_real)]


def hungarian(cost) -> Assignment:
    """Minimum-cost perfect matching on a square matrix (shortest augmenting paths).

    Ties resolve towards the lowest column index, which makes results
    reproducible for degenerate matrices.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return Assignment((), 0.0)

    # 1-based potentials; column 0 is a virtual source
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, math.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], math.inf)
            j1 = int(np.argmin(candidates)) + 1  # argmin keeps the first minimum
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    sigma = [0] * n
    for j in range(1, n + 1):
        sigma[owner[j] - 1] = j - 1
    total = 0.0
    for i in range(n):
        total += float(c[i, sigma[i]])
    return Assignment(tuple(sigma), total)


@torch.no_grad()
def matching_cost_matrix(
    preds: PredictionSet,
    targets: ClipTargets,
    weight_iou: float = 2.0,
    weight_l1: float = 5.0,
    class_reduction: str = "mean",
) -> np.ndarray:
    """n x n cost: row i is ground truth i (rows past the real instances are padding, all zero),
    column j is prediction sequence j.

    Real rows hold -p_j(c_i) + box cost, where p_j(c_i) is the per-frame class
    probability reduced over frames (mean by default, or sum).
    """
    n = preds.n
    m = targets.count
    if m > n:
        raise ValueError(f"{m} ground-truth instances but only {n} prediction sequences")
    cost = np.zeros((n, n), dtype=np.float64)
    if m == 0:
        return cost
    prob = softmax(preds.class_sequences().double(), axis=-1)  # [n, T, K+1]
    per_frame = prob[:, :, targets.labels].permute(2, 0, 1)  # [m, n, T]
    if class_reduction == "mean":
        class_term = per_frame.mean(-1)
    elif class_reduction == "sum":
        class_term = per_frame.sum(-1)
    else:
        raise ValueError(f"unknown class_reduction {class_reduction!r}")
    box_term = sequence_box_cost(
        preds.box_sequences().double()[None],
        targets.boxes.double()[:, None],
        weight_iou,
        weight_l1,
        presence=targets.presence[:, None],
    )
    cost[:m] = (-class_term + box_term).numpy()
    return cost


def match(preds: PredictionSet, targets: ClipTargets, weight_iou=2.0, weight_l1=5.0, class_reduction="mean"):
    return hungarian(matching_cost_matrix(preds, targets, weight_iou, weight_l1, class_reduction))
