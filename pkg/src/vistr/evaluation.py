"""Inference post-processing and AP/AR under video (sequence) mask IoU.

Matching and PR accumulation are done in exact rational arithmetic: IoU is a
ratio of pixel counts and precision/recall are ratios of detection counts, so
thresholds never suffer from float rounding and results are reproducible
bit for bit.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from .structures import PredictionSet
from .synthdata import AnnotationFormatError, rle_decode, rle_encode
from .tensor import softmax, upsample_bilinear

SCORE_THRESHOLD = 0.001
IOU_THRESHOLDS = tuple(Fraction(50 + 5 * i, 100) for i in range(10))
RECALL_POINTS = tuple(Fraction(i, 100) for i in range(101))


class ResultsFormatError(ValueError):
    pass


@dataclass
class InstanceResult:
    category: int
    score: float
    masks: np.ndarray  # [T, H0, W0] bool
    video_id: str = ""
    sequence: int = -1


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    AR1: float
    AR10: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@torch.no_grad()
def postprocess(
    preds: PredictionSet,
    mask_logits: Tensor,
    size: tuple[int, int],
    video_id: str = "",
    score_threshold: float = SCORE_THRESHOLD,
) -> list[InstanceResult]:
    """Turn one clip's predictions into scored instance sequences.

    Each frame votes for its most likely foreground class; the sequence takes
    the most common vote (ties to the lower id) and scores it by the mean
    per-frame probability of that class. Masks are upsampled logits > 0.
    """
    prob = softmax(preds.class_sequences().float(), axis=-1)[..., :-1]  # [n, T, K]
    votes = prob.argmax(-1)
    masks = upsample_bilinear(mask_logits.float(), size) > 0
    results = []
    for s in range(preds.n):
        counts = Counter(votes[s].tolist())
        top = max(counts.values())
        category = min(c for c, k in counts.items() if k == top)
        score = float(prob[s, :, category].mean())
        if score <= score_threshold:
            continue
        results.append(InstanceResult(category, score, masks[s].numpy(), video_id, s))
    return results


def sequence_mask_iou_parts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    """(sum_t |pred_t & gt_t|, sum_t |pred_t | gt_t|)."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask sequences differ in shape: {pred.shape} vs {gt.shape}")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def sequence_mask_iou_exact(pred: np.ndarray, gt: np.ndarray) -> Fraction:
    inter, union = sequence_mask_iou_parts(pred, gt)
    return Fraction(1) if union == 0 else Fraction(inter, union)


def sequence_mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Frame-summed intersection over frame-summed union; 1.0 when both are empty."""
    return float(sequence_mask_iou_exact(pred, gt))


@dataclass
class _Det:
    video: str
    score: float
    rank: int  # position after canonical ordering within its video
    ious: list[Fraction]


def _order_video_dets(dets: Sequence[InstanceResult], gts: Sequence[np.ndarray]) -> list[_Det]:
    """Score-descending; equal scores go higher best-IoU first, then by the full IoU profile."""
    rows = []
    for r in dets:
        ious = [sequence_mask_iou_exact(r.masks, g) for g in gts]
        rows.append((r, ious))
    rows.sort(key=lambda x: (-x[0].score, [-v for v in sorted(x[1], reverse=True)], [-v for v in x[1]]))
    return [_Det(r.video_id, r.score, k, ious) for k, (r, ious) in enumerate(rows)]


def _greedy_match(dets: Sequence[_Det], num_gt: int, threshold: Fraction) -> list[bool]:
    """Each detection in order takes the unmatched gt with highest IoU >= threshold (ties: lower index)."""
    taken = [False] * num_gt
    hits = []
    for det in dets:
        best, best_iou = -1, None
        for g in range(num_gt):
            if taken[g] or det.ious[g] < threshold:
                continue
            if best_iou is None or det.ious[g] > best_iou:
                best, best_iou = g, det.ious[g]
        if best >= 0:
            taken[best] = True
        hits.append(best >= 0)
    return hits


def average_precision(hits: Sequence[bool], num_gt: int) -> Fraction:
    """101-point interpolated AP of a ranked hit list."""
    tp = fp = 0
    precision, recall = [], []
    for h in hits:
        tp += h
        fp += not h
        precision.append(Fraction(tp, tp + fp))
        recall.append(Fraction(tp, num_gt))
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    total = Fraction(0)
    k = 0
    for r in RECALL_POINTS:
        while k < len(recall) and recall[k] < r:
            k += 1
        if k == len(recall):
            break
        total += precision[k]
    return total / len(RECALL_POINTS)


def evaluate_detailed(
    results: Iterable[InstanceResult],
    truths: Mapping[str, Sequence[tuple[int, np.ndarray]]],
    categories: Sequence[int],
    iou_thresholds: Sequence[Fraction] = IOU_THRESHOLDS,
    max_dets: Sequence[int] = (1, 10),
) -> dict:
    """Exact per-(category, threshold) AP and recall tables.

    ``truths`` maps video id -> list of (category, mask stack). Categories with
    no ground truth are left out of every average.
    """
    cats = set(categories)
    by_key: dict[tuple[str, int], list[InstanceResult]] = defaultdict(list)
    for r in results:
        if r.category not in cats:
            raise ResultsFormatError(f"result for video {r.video_id!r} has unknown category {r.category}")
        if r.video_id not in truths:
            raise ResultsFormatError(f"result references unknown video {r.video_id!r}")
        by_key[r.video_id, r.category].append(r)

    videos = sorted(truths)
    ap: dict[tuple[int, Fraction], Fraction] = {}
    recall: dict[tuple[int, int, Fraction], Fraction] = {}
    for c in sorted(cats):
        gts_per_video = {v: [m for cat, m in truths[v] if cat == c] for v in videos}
        num_gt = sum(len(g) for g in gts_per_video.values())
        if num_gt == 0:
            continue
        ordered = {v: _order_video_dets(by_key.get((v, c), []), gts_per_video[v]) for v in videos}
        for thr in iou_thresholds:
            pooled = []
            for v in videos:
                hits = _greedy_match(ordered[v], len(gts_per_video[v]), thr)
                pooled += [(-d.score, v, d.rank, h) for d, h in zip(ordered[v], hits)]
            pooled.sort(key=lambda x: x[:3])
            ap[c, thr] = average_precision([h for *_, h in pooled], num_gt)
            for k in max_dets:
                found = sum(
                    sum(_greedy_match(ordered[v][:k], len(gts_per_video[v]), thr)) for v in videos
                )
                recall[c, k, thr] = Fraction(found, num_gt)
    return {"ap": ap, "recall": recall}


def _mean(values) -> float:
    values = list(values)
    return float(sum(values, Fraction(0)) / len(values)) if values else 0.0


def evaluate(
    results: Iterable[InstanceResult],
    truths: Mapping[str, Sequence[tuple[int, np.ndarray]]],
    categories: Sequence[int],
    iou_thresholds: Sequence[Fraction] = IOU_THRESHOLDS,
) -> EvalReport:
    detail = evaluate_detailed(results, truths, categories, iou_thresholds)
    ap, rec = detail["ap"], detail["recall"]
    at = lambda thr: [v for (c, t), v in ap.items() if t == thr]  # noqa: E731
    return EvalReport(
        AP=_mean(ap.values()),
        AP50=_mean(at(Fraction(1, 2))),
        AP75=_mean(at(Fraction(3, 4))),
        AR1=_mean(v for (c, k, t), v in rec.items() if k == 1),
        AR10=_mean(v for (c, k, t), v in rec.items() if k == 10),
    )


# --- results files ---------------------------------------------------------


def results_to_json(results: Sequence[InstanceResult]) -> list[dict]:
    return [
        {
            "video_id": r.video_id,
            "category_id": int(r.category),
            "score": float(r.score),
            "rle_masks": [rle_encode(m) for m in r.masks],
        }
        for r in results
    ]


def results_from_json(doc, videos: Mapping[str, tuple[int, int, int]]) -> list[InstanceResult]:
    """``videos`` maps id -> (T, height, width) for decoding the RLE masks."""
    if not isinstance(doc, list):
        raise ResultsFormatError("results file must hold a JSON array")
    out = []
    for k, entry in enumerate(doc):
        where = f"[{k}]"
        for key in ("video_id", "category_id", "score", "rle_masks"):
            if key not in entry:
                raise ResultsFormatError(f"{where}: missing key {key!r}")
        vid = entry["video_id"]
        if vid not in videos:
            raise ResultsFormatError(f"{where}.video_id: unknown video {vid!r}")
        T, H, W = videos[vid]
        if len(entry["rle_masks"]) != T:
            raise ResultsFormatError(f"{where}.rle_masks: expected {T} frames")
        try:
            masks = np.stack([rle_decode(c, H, W) for c in entry["rle_masks"]])
        except AnnotationFormatError as exc:
            raise ResultsFormatError(f"{where}.rle_masks: {exc}") from None
        out.append(InstanceResult(int(entry["category_id"]), float(entry["score"]), masks, vid))
    return out


def save_results(results: Sequence[InstanceResult], path) -> None:
    Path(path).write_text(json.dumps(results_to_json(results), separators=(",", ":")))


def truths_by_video(dataset) -> dict[str, list[tuple[int, np.ndarray]]]:
    out = {v.id: [] for v in dataset.videos}
    for a in dataset.annotations:
        out[a.video_id].append((a.class_id, a.masks))
    return out


def evaluate_dataset(results: Sequence[InstanceResult], dataset) -> EvalReport:
    return evaluate(results, truths_by_video(dataset), [c["id"] for c in dataset.categories])
