"""Domain types, manifest ingestion and sample-level transforms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import (
    AlignmentError,
    IngestionError,
    ManifestParseError,
    ParameterError,
    ShapeError,
)

MASK_THRESHOLD_8BIT = 127


@dataclass
class VideoClip:
    """RGB frames as a float32 array of shape (F, H, W, 3) with values in [0, 1]."""

    frames: np.ndarray
    fps: float = 24.0
    clip_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (F, H, W, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise ShapeError("a clip needs at least one frame")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ParameterError("pixel values must lie in [0, 1]")
        self.frames = frames

    def __len__(self):
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class MaskSequence:
    """Binary masks of shape (F, H, W), stored as uint8 in {0, 1}."""

    masks: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise ShapeError(f"masks must be (F, H, W), got {masks.shape}")
        if masks.dtype == bool:
            masks = masks.astype(np.uint8)
        if not np.isin(masks, (0, 1)).all():
            raise ParameterError("masks must be strictly binary")
        self.masks = masks.astype(np.uint8, copy=False)

    def __len__(self):
        return self.masks.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]


@dataclass
class ReferralSample:
    clip: VideoClip
    expressions: list[str]
    gt: MaskSequence
    concept: Optional[str] = None

    def __post_init__(self):
        self.expressions = list(self.expressions)
        if not self.expressions:
            raise ParameterError("a referral sample needs at least one expression")
        if len(self.gt) != len(self.clip):
            raise AlignmentError(
                f"{self.clip.clip_id}: {len(self.clip)} frames but {len(self.gt)} masks"
            )
        if self.gt.size != self.clip.size:
            raise AlignmentError(
                f"{self.clip.clip_id}: frame size {self.clip.size} != mask size {self.gt.size}"
            )

    @property
    def clip_id(self) -> str:
        return self.clip.clip_id


@dataclass
class SampleRecord:
    clip_id: str
    frames: list[str]
    masks: list[str]
    expressions: list[str]
    concept: Optional[str] = None
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "frames": list(self.frames),
            "masks": list(self.masks),
            "expressions": list(self.expressions),
            "concept": self.concept,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    root: Path
    samples: list[SampleRecord] = field(default_factory=list)
    modality: str = "video"

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ids(self) -> list[str]:
        return [s.clip_id for s in self.samples]

    def record(self, clip_id: str) -> SampleRecord:
        for rec in self.samples:
            if rec.clip_id == clip_id:
                return rec
        raise KeyError(f"clip_id {clip_id!r} not in manifest")

    def split(self, name: str) -> "DatasetManifest":
        return replace(self, samples=[s for s in self.samples if s.split == name])

    def to_json(self) -> dict:
        return {
            "root": str(self.root),
            "modality": self.modality,
            "samples": [s.to_json() for s in self.samples],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _require(cond: bool, where: str, msg: str):
    if not cond:
        raise IngestionError(f"{where}: {msg}")


def load_manifest(path) -> DatasetManifest:
    """Read and validate a manifest JSON file.

    A relative ``root`` is resolved against the manifest's directory. Every
    referenced frame and mask file must exist.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ManifestParseError(path, offset, exc.msg) from None

    where = str(path)
    _require(isinstance(doc, dict), where, "top level must be an object")
    for key in ("root", "modality", "samples"):
        _require(key in doc, where, f"missing key {key!r}")
    _require(doc["modality"] in ("video", "image"), where, f"bad modality {doc['modality']!r}")
    _require(isinstance(doc["samples"], list), where, "'samples' must be a list")

    root = Path(doc["root"])
    if not root.is_absolute():
        root = (path.parent / root).resolve()

    samples = []
    seen = set()
    for i, rec in enumerate(doc["samples"]):
        _require(isinstance(rec, dict), where, f"sample {i} is not an object")
        clip_id = rec.get("clip_id")
        _require(isinstance(clip_id, str) and clip_id, where, f"sample {i} lacks a clip_id")
        where_s = f"{path} [{clip_id}]"
        _require(clip_id not in seen, where_s, "duplicate clip_id")
        seen.add(clip_id)
        for key in ("frames", "masks", "expressions"):
            val = rec.get(key)
            _require(
                isinstance(val, list) and all(isinstance(v, str) for v in val),
                where_s,
                f"{key!r} must be a list of strings",
            )
        _require(len(rec["expressions"]) >= 1, where_s, "no expressions")
        _require(len(rec["frames"]) >= 1, where_s, "no frames")
        _require(
            len(rec["frames"]) == len(rec["masks"]),
            where_s,
            f"{len(rec['frames'])} frames vs {len(rec['masks'])} masks",
        )
        concept = rec.get("concept")
        _require(concept is None or isinstance(concept, str), where_s, "concept must be str or null")
        for f in rec["frames"] + rec["masks"]:
            if not (root / f).is_file():
                raise IngestionError(f"{where_s}: missing file {f}")
        samples.append(
            SampleRecord(
                clip_id=clip_id,
                frames=list(rec["frames"]),
                masks=list(rec["masks"]),
                expressions=list(rec["expressions"]),
                concept=concept,
                split=str(rec.get("split", "train")),
            )
        )
    return DatasetManifest(root=root, samples=samples, modality=doc["modality"])


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > MASK_THRESHOLD_8BIT).astype(np.uint8)


def load_sample(manifest: DatasetManifest, clip_id: str, fps: float = 24.0) -> ReferralSample:
    try:
        rec = manifest.record(clip_id)
    except KeyError as exc:
        raise LookupError(str(exc)) from None
    frames = np.stack([read_frame(manifest.root / f) for f in rec.frames])
    masks = [read_mask(manifest.root / m) for m in rec.masks]
    for i, m in enumerate(masks):
        if m.shape != frames.shape[1:3]:
            raise AlignmentError(
                f"{clip_id}: mask {rec.masks[i]} is {m.shape}, frame is {frames.shape[1:3]}"
            )
    return ReferralSample(
        clip=VideoClip(frames, fps=fps, clip_id=clip_id),
        expressions=rec.expressions,
        gt=MaskSequence(np.stack(masks)),
        concept=rec.concept,
    )


# -- pseudo videos -----------------------------------------------------------


@dataclass(frozen=True)
class AugParams:
    """Per-frame jitter bounds for pseudo-video synthesis.

    Translation is a fraction of the image width/height, rotation is in
    degrees. Each frame draws an increment within these bounds and the
    increments accumulate along the clip.
    """

    max_translate: float = 0.05
    scale_range: tuple[float, float] = (0.95, 1.05)
    max_rotate: float = 5.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ParameterError(f"invalid scale range {self.scale_range}")
        if self.max_translate < 0 or self.max_rotate < 0:
            raise ParameterError("translation and rotation bounds must be non-negative")


NO_AUG = AugParams(0.0, (1.0, 1.0), 0.0)


@dataclass(frozen=True)
class Affine:
    """Similarity transform about the image centre; translation in pixels (x right, y down)."""

    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    angle: float = 0.0

    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.scale == 1 and self.angle == 0


def jitter_sequence(num_frames: int, aug: AugParams, size: tuple[int, int], rng) -> list[Affine]:
    h, w = size
    out = [Affine()]
    dx = dy = ang = 0.0
    s = 1.0
    for _ in range(1, num_frames):
        dx += rng.uniform(-aug.max_translate, aug.max_translate) * w
        dy += rng.uniform(-aug.max_translate, aug.max_translate) * h
        s *= rng.uniform(*aug.scale_range)
        ang += rng.uniform(-aug.max_rotate, aug.max_rotate)
        out.append(Affine(dx, dy, s, ang))
    return out


def warp(array: np.ndarray, t: Affine, order: int) -> np.ndarray:
    """Apply ``t`` to an (H, W) or (H, W, C) array; outside pixels become 0."""
    if t.is_identity():
        return array.copy()
    h, w = array.shape[:2]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    th = math.radians(t.angle)
    # forward map in (row, col) coordinates; affine_transform needs the inverse
    fwd = t.scale * np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]])
    inv = np.linalg.inv(fwd)
    shift = np.array([t.dy, t.dx])
    offset = c - inv @ (c + shift)
    if array.ndim == 2:
        return ndimage.affine_transform(array, inv, offset=offset, order=order, mode="constant", cval=0)
    chans = [
        ndimage.affine_transform(array[..., k], inv, offset=offset, order=order, mode="constant", cval=0)
        for k in range(array.shape[-1])
    ]
    return np.stack(chans, axis=-1)


def image_to_pseudo_video(
    image: np.ndarray,
    mask: np.ndarray,
    num_frames: int,
    aug: AugParams = AugParams(),
    seed: int = 0,
    *,
    expressions: Sequence[str] = ("the object",),
    concept: Optional[str] = None,
    clip_id: str = "",
) -> ReferralSample:
    """Turn a single annotated image into a clip by accumulating random affine jitter.

    Frame 0 is the input itself; image and mask receive the same warp.
    """
    if num_frames < 1:
        raise ParameterError("num_frames must be >= 1")
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask).astype(np.uint8)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    rng = np.random.default_rng(seed)
    transforms = jitter_sequence(num_frames, aug, mask.shape, rng)
    frames = np.stack([np.clip(warp(image, t, order=1), 0.0, 1.0) for t in transforms])
    masks = np.stack([warp(mask, t, order=0) for t in transforms])
    return ReferralSample(
        clip=VideoClip(frames, clip_id=clip_id),
        expressions=list(expressions),
        gt=MaskSequence(masks),
        concept=concept,
    )


def pseudo_video(sample: ReferralSample, num_frames: int, aug: AugParams = AugParams(), seed: int = 0) -> ReferralSample:
    """``image_to_pseudo_video`` applied to the first frame of an image sample."""
    return image_to_pseudo_video(
        sample.clip.frames[0],
        sample.gt.masks[0],
        num_frames,
        aug,
        seed,
        expressions=sample.expressions,
        concept=sample.concept,
        clip_id=sample.clip_id,
    )


def take_frames(sample: ReferralSample, idx) -> ReferralSample:
    idx = np.asarray(idx, dtype=np.int64)
    return ReferralSample(
        clip=VideoClip(sample.clip.frames[idx], fps=sample.clip.fps, clip_id=sample.clip_id),
        expressions=sample.expressions,
        gt=MaskSequence(sample.gt.masks[idx]),
        concept=sample.concept,
    )


def window_indices(num_frames: int, window: int, rng) -> np.ndarray:
    if window < 1:
        raise ParameterError("window must be >= 1")
    if num_frames < window:
        return np.arange(window) % num_frames
    start = int(rng.integers(0, num_frames - window + 1))
    return np.arange(start, start + window)


def sample_training_window(sample: ReferralSample, window: int, seed: int = 0) -> ReferralSample:
    """Contiguous random window; short clips are repeated cyclically to fill it."""
    idx = window_indices(len(sample.clip), window, np.random.default_rng(seed))
    return take_frames(sample, idx)


def resize_frames(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if frames.shape[1:3] == tuple(size):
        return frames.copy()
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    shrinking = size[0] < frames.shape[1] or size[1] < frames.shape[2]
    y = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False, antialias=shrinking)
    return y.clamp_(0.0, 1.0).permute(0, 2, 3, 1).numpy()


def resize_masks(masks: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of (F, H, W) masks, sampling at pixel centres."""
    h, w = masks.shape[1:3]
    h2, w2 = size
    rows = np.minimum(((np.arange(h2) + 0.5) * h / h2).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(w2) + 0.5) * w / w2).astype(np.int64), w - 1)
    return masks[:, rows[:, None], cols[None, :]]


def resize_sample(sample: ReferralSample, size: tuple[int, int], factor: int = 4) -> ReferralSample:
    size = (int(size[0]), int(size[1]))
    if size[0] % factor or size[1] % factor or min(size) <= 0:
        raise ParameterError(f"size {size} is not divisible by the downsample factor {factor}")
    if size == sample.clip.size:
        return sample
    return ReferralSample(
        clip=VideoClip(resize_frames(sample.clip.frames, size), fps=sample.clip.fps, clip_id=sample.clip_id),
        expressions=sample.expressions,
        gt=MaskSequence(resize_masks(sample.gt.masks, size)),
        concept=sample.concept,
    )
