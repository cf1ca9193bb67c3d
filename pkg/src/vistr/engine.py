"""Training loop, inference and metric logging."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig, serialize_config
from .evaluation import EvalReport, InstanceResult, evaluate, postprocess, sequence_mask_iou
from .losses import LossBreakdown, hungarian_loss
from .matcher import match
from .model import VisTR
from .serialize import load_checkpoint, save_checkpoint
from .structures import ClipTargets
from .synthdata import Dataset, InstanceSequenceTruth, VideoClip, generate_dataset, load_annotations
from .tensor import set_deterministic, upsample_bilinear

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Sample:
    clip_id: str
    frames: torch.Tensor  # [T, 3, H0, W0]
    targets: ClipTargets
    truths: list[InstanceSequenceTruth]


def make_samples(clips: Sequence[VideoClip], truths: Sequence[Sequence[InstanceSequenceTruth]]) -> list[Sample]:
    samples = []
    for clip, tr in zip(clips, truths):
        T, _, H, W = clip.frames.shape
        samples.append(Sample(clip.clip_id, torch.from_numpy(clip.frames), ClipTargets.from_truths(tr, T, H, W), list(tr)))
    return samples


def samples_from_dataset(dataset: Dataset) -> list[Sample]:
    clips = [dataset.load_clip(v) for v in dataset.videos]
    return make_samples(clips, [dataset.truths_for(v.id) for v in dataset.videos])


def load_samples(cfg: TrainConfig) -> list[Sample]:
    """Samples from ``cfg.dataset`` (an annotation file or its directory), else generated from ``cfg.data``."""
    if cfg.dataset:
        path = Path(cfg.dataset)
        if path.is_dir():
            path = path / "annotations.json"
        return samples_from_dataset(load_annotations(path))
    return make_samples(*generate_dataset(cfg.data))


def is_backbone_param(name: str) -> bool:
    return name.startswith("backbone.")


def build_optimizer(model: VisTR, cfg: TrainConfig) -> torch.optim.AdamW:
    backbone = [p for n, p in model.named_parameters() if is_backbone_param(n)]
    rest = [p for n, p in model.named_parameters() if not is_backbone_param(n)]
    return torch.optim.AdamW(
        [{"params": rest, "lr": cfg.lr_transformer}, {"params": backbone, "lr": cfg.lr_backbone}],
        lr=cfg.lr_transformer,
        weight_decay=cfg.weight_decay,
    )


class MetricsLog:
    """Append-only CSV of per-step losses plus a JSON-lines file of per-epoch reports."""

    FIELDS = ("step", "total", "class_nll", "box", "mask", "lr")

    def __init__(self, out_dir: Path):
        self.steps_path = out_dir / "metrics.csv"
        self.eval_path = out_dir / "eval.jsonl"
        self.last_step = -1
        if not self.steps_path.exists():
            with self.steps_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def log_step(self, step: int, losses: dict, lr: float) -> None:
        if step <= self.last_step:
            raise ValueError(f"metrics rows must increase in step ({step} after {self.last_step})")
        self.last_step = step
        with self.steps_path.open("a", newline="") as fh:
            csv.writer(fh).writerow([step] + [repr(losses[k]) for k in self.FIELDS[1:5]] + [repr(lr)])

    def log_eval(self, epoch: int, report: EvalReport) -> None:
        with self.eval_path.open("a") as fh:
            fh.write(json.dumps({"epoch": epoch, **report.__dict__}) + "\n")


class Trainer:
    def __init__(self, cfg: TrainConfig, samples: Sequence[Sample], out_dir: Path | None = None):
        cfg.validate()
        self.cfg = cfg
        set_deterministic(cfg.deterministic, cfg.seed)
        self.model = VisTR(cfg.model)
        self.samples = list(samples)
        self.optimizer = build_optimizer(self.model, cfg)
        self.scheduler = torch.optim.lr_scheduler.StepLR(self.optimizer, step_size=max(cfg.lr_drop_epoch, 1), gamma=0.1)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metrics = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.txt").write_text(serialize_config(cfg))
            self.metrics = MetricsLog(self.out_dir)

    def _frame_order(self, T: int) -> list[int]:
        if self.cfg.frame_order == "random":
            return torch.randperm(T, generator=self.generator).tolist()
        return list(range(T))

    def train_step(self, sample: Sample) -> LossBreakdown:
        self.model.train()
        order = self._frame_order(sample.frames.shape[0])
        frames = sample.frames[order]
        targets = sample.targets.reorder_frames(order)
        preds, mask_logits = self.model(frames)
        outputs = (preds.class_logits, preds.boxes, mask_logits)
        if not all(torch.isfinite(t).all() for t in outputs):
            self._dump_divergence(sample, None)  # the matcher cannot run on non-finite costs
        losses = hungarian_loss(preds, mask_logits, targets, self.cfg.loss)
        if not torch.isfinite(losses.total):
            self._dump_divergence(sample, losses)
        self.optimizer.zero_grad()
        losses.total.backward()
        if self.cfg.clip_max_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.clip_max_norm)
        self.optimizer.step()
        self.step += 1
        if self.metrics is not None:
            self.metrics.log_step(self.step, losses.as_floats(), self.optimizer.param_groups[0]["lr"])
        return losses

    def _dump_divergence(self, sample: Sample, losses: LossBreakdown | None) -> None:
        info = {
            "step": self.step,
            "epoch": self.epoch,
            "batch_id": sample.clip_id,
            "losses": losses.as_floats() if losses is not None else "non-finite model outputs",
        }
        if self.out_dir is not None:
            (self.out_dir / "divergence.json").write_text(json.dumps(info, indent=2))
        raise TrainingDiverged(f"non-finite loss at step {self.step} on batch {sample.clip_id}: {info['losses']}")

    def train_epoch(self, on_step: Callable[["Trainer", LossBreakdown], bool] | None = None) -> list[float]:
        """One pass over the clips in a seeded order; ``on_step`` returning True stops early."""
        totals = []
        for idx in torch.randperm(len(self.samples), generator=self.generator).tolist():
            if self.cfg.max_steps and self.step >= self.cfg.max_steps:
                break
            losses = self.train_step(self.samples[idx])
            totals.append(float(losses.total.detach()))
            if on_step is not None and on_step(self, losses):
                break
        self.epoch += 1
        self.scheduler.step()
        return totals

    def checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.bin"

    def save(self) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.model, self.checkpoint_path())

    def fit(self) -> list[float]:
        history = []
        self.save()
        for _ in range(self.cfg.epochs):
            if self.cfg.max_steps and self.step >= self.cfg.max_steps:
                break
            history += self.train_epoch()
            self.save()
            if self.cfg.eval_every and self.epoch % self.cfg.eval_every == 0 and self.metrics is not None:
                self.metrics.log_eval(self.epoch, evaluate_samples(self.model, self.samples))
            log.info("epoch %d step %d loss %.4f", self.epoch, self.step, history[-1] if history else float("nan"))
        return history


@torch.no_grad()
def infer_sample(model: VisTR, sample: Sample) -> list[InstanceResult]:
    model.eval()
    preds, mask_logits = model(sample.frames)
    return postprocess(preds, mask_logits, tuple(sample.frames.shape[-2:]), sample.clip_id)


def infer(model: VisTR, samples: Sequence[Sample]) -> list[InstanceResult]:
    results = []
    for s in samples:
        results += infer_sample(model, s)
    return results


def evaluate_samples(model: VisTR, samples: Sequence[Sample]) -> EvalReport:
    truths = {s.clip_id: [(t.class_id, t.masks) for t in s.truths] for s in samples}
    return evaluate(infer(model, samples), truths, list(range(model.cfg.K)))


@torch.no_grad()
def matched_mask_iou(model: VisTR, samples: Sequence[Sample], loss_weights=None) -> float:
    """Mean video IoU between each ground-truth instance and the sequence the matcher pairs it with."""
    model.eval()
    ious = []
    for s in samples:
        preds, mask_logits = model(s.frames)
        if s.targets.count == 0:
            continue
        w = loss_weights
        assignment = match(preds, s.targets, *((w.iou, w.l1) if w else ()))
        masks = (upsample_bilinear(mask_logits, tuple(s.frames.shape[-2:])) > 0).numpy()
        for i, j in assignment.matched_pairs(s.targets.count):
            ious.append(sequence_mask_iou(masks[j], s.truths[i].masks))
    return float(np.mean(ious)) if ious else math.nan


def load_model(cfg: TrainConfig, checkpoint) -> VisTR:
    model = VisTR(cfg.model)
    load_checkpoint(model, checkpoint)
    return model
