"""Containers passed between the model, the matcher, the losses and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor


def sequence_index(j: int, n: int) -> tuple[int, int]:
    """Prediction j -> (instance sequence, frame). Predictions are instance-major within each frame."""
    return j % n, j // n


def to_sequences(x: Tensor, n: int) -> Tensor:
    """[N, ...] with N = n*T -> [n, T, ...] following the grouping rule."""
    T = x.shape[0] // n
    return x.reshape(T, n, *x.shape[1:]).transpose(0, 1)


def from_sequences(x: Tensor) -> Tensor:
    """Inverse of :func:`to_sequences`."""
    n, T = x.shape[:2]
    return x.transpose(0, 1).reshape(n * T, *x.shape[2:])


@dataclass
class PredictionSet:
    class_logits: Tensor  # [N, K+1]; column K is background
    boxes: Tensor  # [N, 4] normalized cxcywh
    n: int
    T: int
    features: Tensor | None = None  # decoder output O, [N, d]

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[-1] - 1

    def class_sequences(self) -> Tensor:
        return to_sequences(self.class_logits, self.n)

    def box_sequences(self) -> Tensor:
        return to_sequences(self.boxes, self.n)


@dataclass
class ClipTargets:
    """Ground truth of one clip as tensors; m instances."""

    labels: Tensor  # [m] long
    boxes: Tensor  # [m, T, 4]
    masks: Tensor  # [m, T, H0, W0] float in {0, 1}
    presence: Tensor  # [m, T] bool

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])

    def permute(self, order: Sequence[int]) -> "ClipTargets":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return ClipTargets(self.labels[idx], self.boxes[idx], self.masks[idx], self.presence[idx])

    def reorder_frames(self, order: Sequence[int]) -> "ClipTargets":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return ClipTargets(self.labels, self.boxes[:, idx], self.masks[:, idx], self.presence[:, idx])

    @classmethod
    def from_truths(cls, truths, T: int, H: int, W: int, dtype=torch.float32) -> "ClipTargets":
        if not truths:
            return cls(
                torch.zeros(0, dtype=torch.long),
                torch.zeros(0, T, 4, dtype=dtype),
                torch.zeros(0, T, H, W, dtype=dtype),
                torch.zeros(0, T, dtype=torch.bool),
            )
        return cls(
            torch.tensor([t.class_id for t in truths], dtype=torch.long),
            torch.as_tensor(np.stack([t.boxes for t in truths]), dtype=dtype),
            torch.as_tensor(np.stack([t.masks for t in truths]), dtype=dtype),
            torch.as_tensor(np.stack([t.presence for t in truths]), dtype=torch.bool),
        )
