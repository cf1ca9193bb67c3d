"""Deterministic moving-shapes clips, RLE masks and the annotation file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .serialize import load_tensors, save_tensors

CATEGORIES = ("circle", "square", "triangle")


class SynthConfigError(ValueError):
    pass


class AnnotationFormatError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 1
    num_clips: int = 8
    T: int = 6
    height: int = 96
    width: int = 160
    instance_min: int = 2
    instance_max: int = 3
    capacity: int = 5
    size_min: float = 12.0
    size_max: float = 22.0
    speed_min: float = 0.0
    speed_max: float = 4.0
    background: float = 0.1
    leave_enter: bool = False

    def validate(self) -> None:
        if self.T < 1 or self.height < 1 or self.width < 1:
            raise SynthConfigError("T, height and width must be positive")
        if not 0 <= self.instance_min <= self.instance_max:
            raise SynthConfigError("need 0 <= instance_min <= instance_max")
        if self.instance_max > self.capacity:
            raise SynthConfigError(
                f"instance_max={self.instance_max} exceeds model capacity n={self.capacity}"
            )
        if not 0 < self.size_min <= self.size_max:
            raise SynthConfigError("need 0 < size_min <= size_max")
        if 2 * self.size_max >= min(self.height, self.width):
            raise SynthConfigError("shapes do not fit on the canvas")


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, 3, H, W] float32 in [0, 1]
    clip_id: str

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass
class InstanceSequenceTruth:
    class_id: int
    boxes: np.ndarray  # [T, 4] normalized (cx, cy, w, h)
    masks: np.ndarray  # [T, H, W] bool
    presence: np.ndarray  # [T] bool
    video_id: str = ""
    instance_id: int = 0


@dataclass
class ShapeSpec:
    """One moving shape: category index, centre/velocity in pixels, half-extent, RGB colour."""

    category: int
    x: float
    y: float
    vx: float
    vy: float
    size: float
    color: tuple[float, float, float]
    first: int = 0
    last: int | None = None


@dataclass
class VideoRecord:
    id: str
    T: int
    height: int
    width: int
    frame_files: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    categories: list[dict]
    videos: list[VideoRecord]
    annotations: list[InstanceSequenceTruth]
    root: Path | None = None

    def truths_for(self, video_id: str) -> list[InstanceSequenceTruth]:
        return [a for a in self.annotations if a.video_id == video_id]

    def load_clip(self, video: VideoRecord) -> VideoClip:
        if self.root is None:
            raise AnnotationFormatError("dataset has no root directory for frame files")
        frames = [load_tensors(self.root / f)["frame"] for f in video.frame_files]
        return VideoClip(np.stack(frames).astype(np.float32), video.id)


def shape_mask(category: int, cx: float, cy: float, size: float, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    kind = CATEGORIES[category]
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= size**2
    if kind == "square":
        return (np.abs(xs - cx) < size) & (np.abs(ys - cy) < size)
    # upward isosceles triangle inscribed in the 2*size square
    top = cy - size
    return (ys < cy + size) & (ys > top) & (np.abs(xs - cx) <= (ys - top) / 2)


def derive_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized (cx, cy, w, h) around the set pixels; zeros for an empty mask."""
    H, W = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return np.zeros(4)
    x1, x2 = cols[0], cols[-1] + 1
    y1, y2 = rows[0], rows[-1] + 1
    return np.array([(x1 + x2) / (2 * W), (y1 + y2) / (2 * H), (x2 - x1) / W, (y2 - y1) / H])


def _trajectory(spec: ShapeSpec, T: int, H: int, W: int) -> list[tuple[float, float]]:
    x, y, vx, vy = spec.x, spec.y, spec.vx, spec.vy
    lo_x, hi_x, lo_y, hi_y = spec.size, W - spec.size, spec.size, H - spec.size
    out = []
    for _ in range(T):
        out.append((x, y))
        x, y = x + vx, y + vy
        if x < lo_x:
            x, vx = 2 * lo_x - x, -vx
        elif x > hi_x:
            x, vx = 2 * hi_x - x, -vx
        if y < lo_y:
            y, vy = 2 * lo_y - y, -vy
        elif y > hi_y:
            y, vy = 2 * hi_y - y, -vy
    return out


def render_clip(
    specs: Sequence[ShapeSpec], T: int, H: int, W: int, clip_id: str = "clip", background: float = 0.1
) -> tuple[VideoClip, list[InstanceSequenceTruth]]:
    """Draw the shapes; later specs occlude earlier ones, and masks keep only visible pixels."""
    frames = np.full((T, 3, H, W), background, dtype=np.float32)
    full = np.zeros((len(specs), T, H, W), dtype=bool)
    for i, spec in enumerate(specs):
        last = T - 1 if spec.last is None else spec.last
        for t, (x, y) in enumerate(_trajectory(spec, T, H, W)):
            if spec.first <= t <= last:
                full[i, t] = shape_mask(spec.category, x, y, spec.size, H, W)

    truths = []
    covered = np.zeros((T, H, W), dtype=bool)
    visible = np.zeros_like(full)
    for i in reversed(range(len(specs))):
        visible[i] = full[i] & ~covered
        covered |= full[i]
    for i, spec in enumerate(specs):
        for t in range(T):
            frames[t, :, full[i, t]] = np.asarray(spec.color, dtype=np.float32)
        presence = visible[i].reshape(T, -1).any(axis=1)
        boxes = np.stack([derive_box(visible[i, t]) for t in range(T)])
        truths.append(
            InstanceSequenceTruth(spec.category, boxes, visible[i], presence, video_id=clip_id, instance_id=i)
        )
    return VideoClip(frames, clip_id), truths


def sample_specs(cfg: SynthConfig, rng: np.random.Generator) -> list[ShapeSpec]:
    count = int(rng.integers(cfg.instance_min, cfg.instance_max + 1))
    specs = []
    for _ in range(count):
        size = float(rng.uniform(cfg.size_min, cfg.size_max))
        speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        angle = float(rng.uniform(0, 2 * np.pi))
        first, last = 0, None
        if cfg.leave_enter and cfg.T > 2:
            first = int(rng.integers(0, cfg.T // 2))
            last = int(rng.integers(cfg.T // 2, cfg.T))
        specs.append(
            ShapeSpec(
                category=int(rng.integers(len(CATEGORIES))),
                x=float(rng.uniform(size, cfg.width - size)),
                y=float(rng.uniform(size, cfg.height - size)),
                vx=speed * np.cos(angle),
                vy=speed * np.sin(angle),
                size=size,
                color=tuple(float(c) for c in rng.uniform(0.35, 1.0, size=3)),
                first=first,
                last=last,
            )
        )
    return specs


def generate_clip(cfg: SynthConfig, index: int = 0) -> tuple[VideoClip, list[InstanceSequenceTruth]]:
    """Clip ``index`` of the dataset described by ``cfg``; depends only on (seed, index)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    specs = sample_specs(cfg, rng)
    return render_clip(specs, cfg.T, cfg.height, cfg.width, f"clip_{index:04d}", cfg.background)


def generate_dataset(cfg: SynthConfig):
    clips, truths = [], []
    for i in range(cfg.num_clips):
        clip, tr = generate_clip(cfg, i)
        clips.append(clip)
        truths.append(tr)
    return clips, truths


# --- run-length encoding -------------------------------------------------


def rle_encode(mask: np.ndarray) -> list[int]:
    """Column-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def rle_decode(counts: Sequence[int], H: int, W: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise AnnotationFormatError("negative run length")
    if sum(counts) != H * W:
        raise AnnotationFormatError(f"run lengths sum to {sum(counts)}, expected {H * W}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((W, H)).T.copy()


# --- annotation files ------------------------------------------------------

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["categories", "videos", "annotations"],
    "properties": {
        "categories": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "name"],
                "properties": {"id": {"type": "integer"}, "name": {"type": "string"}},
            },
        },
        "videos": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "T", "height", "width", "frame_files"],
                "properties": {
                    "id": {"type": "string"},
                    "T": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "width": {"type": "integer", "minimum": 1},
                    "frame_files": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["video_id", "instance_id", "category_id", "boxes", "rle_masks", "presence"],
                "properties": {
                    "video_id": {"type": "string"},
                    "instance_id": {"type": "integer"},
                    "category_id": {"type": "integer"},
                    "boxes": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                    },
                    "rle_masks": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                    "presence": {"type": "array", "items": {"type": "boolean"}},
                },
            },
        },
    },
}


def _field_path(error: jsonschema.ValidationError) -> str:
    path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)
    return path.lstrip(".") or "<root>"


def validate_annotation_json(doc) -> None:
    try:
        jsonschema.validate(doc, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise AnnotationFormatError(f"{_field_path(exc)}: {exc.message}") from None


def dataset_to_json(dataset: Dataset) -> dict:
    return {
        "categories": dataset.categories,
        "videos": [
            {"id": v.id, "T": v.T, "height": v.height, "width": v.width, "frame_files": list(v.frame_files)}
            for v in dataset.videos
        ],
        "annotations": [
            {
                "video_id": a.video_id,
                "instance_id": int(a.instance_id),
                "category_id": int(a.class_id),
                "boxes": [[float(v) for v in b] for b in a.boxes],
                "rle_masks": [rle_encode(m) for m in a.masks],
                "presence": [bool(p) for p in a.presence],
            }
            for a in dataset.annotations
        ],
    }


def dataset_from_json(doc, root: Path | None = None) -> Dataset:
    validate_annotation_json(doc)
    videos = [VideoRecord(v["id"], v["T"], v["height"], v["width"], list(v["frame_files"])) for v in doc["videos"]]
    by_id = {v.id: v for v in videos}
    category_ids = {c["id"] for c in doc["categories"]}
    annotations = []
    for k, a in enumerate(doc["annotations"]):
        where = f"annotations[{k}]"
        video = by_id.get(a["video_id"])
        if video is None:
            raise AnnotationFormatError(f"{where}.video_id: unknown video {a['video_id']!r}")
        if a["category_id"] not in category_ids:
            raise AnnotationFormatError(f"{where}.category_id: unknown category {a['category_id']}")
        for key in ("boxes", "rle_masks", "presence"):
            if len(a[key]) != video.T:
                raise AnnotationFormatError(f"{where}.{key}: expected {video.T} frames, got {len(a[key])}")
        masks = []
        for t, counts in enumerate(a["rle_masks"]):
            try:
                masks.append(rle_decode(counts, video.height, video.width))
            except AnnotationFormatError as exc:
                raise AnnotationFormatError(f"{where}.rle_masks[{t}]: {exc}") from None
        annotations.append(
            InstanceSequenceTruth(
                class_id=a["category_id"],
                boxes=np.asarray(a["boxes"], dtype=np.float64),
                masks=np.stack(masks),
                presence=np.asarray(a["presence"], dtype=bool),
                video_id=a["video_id"],
                instance_id=a["instance_id"],
            )
        )
    return Dataset(list(doc["categories"]), videos, annotations, root)


def default_categories() -> list[dict]:
    return [{"id": i, "name": name} for i, name in enumerate(CATEGORIES)]


def save_annotations(clips: Sequence[VideoClip], truths: Sequence[Sequence[InstanceSequenceTruth]], path) -> Dataset:
    """Write ``path`` (annotation JSON) plus one tensor file per frame under ``frames/`` next to it."""
    path = Path(path)
    root = path.parent
    videos, annotations = [], []
    for clip, clip_truths in zip(clips, truths):
        T, _, H, W = clip.frames.shape
        files = []
        (root / "frames" / clip.clip_id).mkdir(parents=True, exist_ok=True)
        for t in range(T):
            rel = f"frames/{clip.clip_id}/{t:03d}.bin"
            save_tensors({"frame": clip.frames[t]}, root / rel)
            files.append(rel)
        videos.append(VideoRecord(clip.clip_id, T, H, W, files))
        for k, tr in enumerate(clip_truths):
            tr.video_id = clip.clip_id
            tr.instance_id = tr.instance_id if tr.instance_id is not None else k
            annotations.append(tr)
    dataset = Dataset(default_categories(), videos, annotations, root)
    path.write_text(json.dumps(dataset_to_json(dataset), separators=(",", ":")))
    return dataset


def load_annotations(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"{path}: not valid JSON ({exc})") from None
    return dataset_from_json(doc, root=path.parent)
