"""Hungarian loss: class NLL, sequence box loss and sequence mask loss (Dice + Focal)."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .box_ops import sequence_box_cost
from .matcher import Assignment, match
from .structures import ClipTargets, PredictionSet, to_sequences
from .tensor import log_softmax, upsample_bilinear


@dataclass
class LossWeights:
    iou: float = 2.0
    l1: float = 5.0
    mask: float = 1.0
    background_class_weight: float = 0.1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossBreakdown:
    total: Tensor
    class_nll: Tensor
    box: Tensor
    mask: Tensor
    assignment: Assignment | None = None
    per_sequence: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "class_nll": float(self.class_nll.detach()),
            "box": float(self.box.detach()),
            "mask": float(self.mask.detach()),
        }


def classification_loss(
    class_logits: Tensor,
    assignment: Assignment,
    targets: ClipTargets,
    n: int,
    background_class_weight: float = 0.1,
) -> Tensor:
    """Weighted-mean NLL over all N predictions.

    Predictions of a matched sequence target its class on every frame; the rest
    target background (last column) with weight ``background_class_weight``.
    """
    num_classes = class_logits.shape[-1] - 1
    T = class_logits.shape[0] // n
    seq_target = torch.full((n,), num_classes, dtype=torch.long)
    for i, j in assignment.matched_pairs(targets.count):
        seq_target[j] = targets.labels[i]
    target = seq_target.repeat(T)  # prediction j -> sequence j % n
    weight = torch.ones(num_classes + 1, dtype=class_logits.dtype)
    weight[num_classes] = background_class_weight
    nll = -log_softmax(class_logits, axis=-1).gather(1, target[:, None]).squeeze(1)
    w = weight[target]
    return (w * nll).sum() / w.sum()


def dice_loss(pred_probs: Tensor, gt: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(pg) + s) / (sum(p) + sum(g) + s), reduced over the last two axes."""
    p = pred_probs.flatten(-2)
    g = gt.flatten(-2)
    return 1 - (2 * (p * g).sum(-1) + smooth) / (p.sum(-1) + g.sum(-1) + smooth)


def focal_loss(pred_logits: Tensor, gt: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss averaged over the pixels of the last two axes."""
    p = torch.sigmoid(pred_logits)
    ce = F.binary_cross_entropy_with_logits(pred_logits, gt, reduction="none")
    p_t = p * gt + (1 - p) * (1 - gt)
    alpha_t = alpha * gt + (1 - alpha) * (1 - gt)
    return (alpha_t * (1 - p_t) ** gamma * ce).flatten(-2).mean(-1)


def mask_sequence_loss(
    pred_logits: Tensor,
    gt_masks: Tensor,
    weight: float = 1.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
    smooth: float = 1.0,
) -> Tensor:
    """weight * mean_t [Dice + Focal] for [..., T, H, W] stacks (absent frames carry empty masks)."""
    if pred_logits.shape != gt_masks.shape:
        raise ValueError(f"mask shapes differ: {tuple(pred_logits.shape)} vs {tuple(gt_masks.shape)}")
    per_frame = dice_loss(torch.sigmoid(pred_logits), gt_masks, smooth) + focal_loss(
        pred_logits, gt_masks, alpha, gamma
    )
    return weight * per_frame.mean(-1)


def hungarian_loss(
    preds: PredictionSet,
    mask_logits: Tensor,
    targets: ClipTargets,
    weights: LossWeights | None = None,
    assignment: Assignment | None = None,
) -> LossBreakdown:
    """Full training objective for one clip.

    ``mask_logits`` is [n, T, h, w] at reduced resolution; matched sequences are
    upsampled bilinearly to the ground-truth size. Box and mask sums are divided
    by the number of ground-truth instances. The assignment is computed without
    gradient unless supplied.
    """
    w = weights or LossWeights()
    if assignment is None:
        assignment = match(preds, targets, w.iou, w.l1)
    class_nll = classification_loss(preds.class_logits, assignment, targets, preds.n, w.background_class_weight)
    zero = class_nll.new_zeros(())
    m = targets.count
    if m == 0:
        return LossBreakdown(class_nll, class_nll, zero, zero, assignment)

    pairs = assignment.matched_pairs(m)
    gt_idx = torch.tensor([i for i, _ in pairs])
    pred_idx = torch.tensor([j for _, j in pairs])
    box_seq = to_sequences(preds.boxes, preds.n)[pred_idx]
    box_terms = sequence_box_cost(box_seq, targets.boxes[gt_idx].to(box_seq.dtype), w.iou, w.l1, targets.presence[gt_idx])

    H0, W0 = targets.masks.shape[-2:]
    matched = mask_logits[pred_idx]
    if matched.shape[-2:] != (H0, W0):
        matched = upsample_bilinear(matched, (H0, W0))
    mask_terms = mask_sequence_loss(
        matched, targets.masks[gt_idx].to(matched.dtype), w.mask, w.focal_alpha, w.focal_gamma, w.dice_smooth
    )
    box = box_terms.sum() / m
    mask = mask_terms.sum() / m
    return LossBreakdown(
        class_nll + box + mask,
        class_nll,
        box,
        mask,
        assignment,
        {"box": box_terms.detach(), "mask": mask_terms.detach()},
    )
