"""Box conversions and generalized IoU. All functions broadcast over leading axes."""
import torch
from torch import Tensor


def box_cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cx, cy, w, h = b.unbind(-1)
    w = w.clamp(min=0)
    h = h.clamp(min=0)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b: Tensor) -> Tensor:
    x1, y1, x2, y2 = b.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_area(b: Tensor) -> Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def _safe_div(num: Tensor, den: Tensor) -> Tensor:
    ok = den > 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(num))


def generalized_iou(a: Tensor, b: Tensor) -> Tensor:
    """GIoU of xyxy boxes, elementwise with broadcasting.

    A zero-area union gives IoU 0; if the enclosing box also has zero area the
    result is 0.
    """
    area_a, area_b = box_area(a), box_area(b)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = _safe_div(inter, union)

    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[..., 0] * wh_c[..., 1]
    giou = iou - _safe_div(enclose - union, enclose)
    return torch.where(enclose > 0, giou, torch.zeros_like(giou))


def sequence_box_cost(
    pred_boxes: Tensor,
    gt_boxes: Tensor,
    weight_iou: float = 2.0,
    weight_l1: float = 5.0,
    presence: Tensor | None = None,
) -> Tensor:
    """Frame-averaged weighted (1 - GIoU) + L1 cost between [..., T, 4] cxcywh box sequences.

    Frames where ``presence`` is False contribute nothing; the 1/T factor is kept.
    """
    if pred_boxes.shape[-2] != gt_boxes.shape[-2]:
        raise ValueError("box sequences must have the same length")
    T = pred_boxes.shape[-2]
    giou = generalized_iou(box_cxcywh_to_xyxy(pred_boxes), box_cxcywh_to_xyxy(gt_boxes))
    l1 = (pred_boxes - gt_boxes).abs().sum(-1)
    per_frame = weight_iou * (1 - giou) + weight_l1 * l1
    if presence is not None:
        per_frame = per_frame * presence.to(per_frame.dtype)
    return per_frame.sum(-1) / T
