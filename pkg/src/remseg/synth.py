"""Moving-shapes referral datasets with exact analytic masks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .data import DatasetManifest, SampleRecord
from .errors import ParameterError

PALETTE = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.85),
    "cyan": (0.10, 0.85, 0.85),
    "orange": (0.98, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
}

SHAPES = ("square", "circle", "triangle")

MOTIONS = {
    "static": (0, 0),
    "left": (-1, 0),
    "right": (1, 0),
    "up": (0, -1),
    "down": (0, 1),
}


@dataclass
class SynthSpec:
    """Parameters of the synthetic generator.

    ``combos`` restricts which (colour, shape) pairs may appear; by default
    every pair from ``colors`` x ``shapes`` is allowed. Objects in one clip
    never share a colour or a shape, so "the <colour> <shape>" is always
    unambiguous. With ``refer_all`` each object in a clip becomes its own
    sample (same frames, different mask); otherwise only the first object is
    referred to and the rest are distractors.
    """

    n_clips: int = 8
    num_frames: int = 8
    resolution: tuple[int, int] = (64, 64)
    shapes: Sequence[str] = SHAPES
    colors: Sequence[str] = ("red", "green", "blue", "yellow")
    motions: Sequence[str] = tuple(MOTIONS)
    combos: Optional[Sequence[tuple[str, str]]] = None
    objects_per_clip: int = 1
    size_range: tuple[int, int] = (14, 22)
    speed_range: tuple[int, int] = (1, 2)
    background_range: tuple[float, float] = (0.15, 0.45)
    refer_all: bool = False
    modality: str = "video"
    split: str = "train"
    prefix: str = "clip"
    fps: float = 24.0

    def allowed_combos(self) -> list[tuple[str, str]]:
        if self.combos is not None:
            return [tuple(c) for c in self.combos]
        return [(c, s) for c in self.colors for s in self.shapes]

    def validate(self):
        if self.n_clips < 0:
            raise ParameterError("n_clips must be >= 0")
        if self.num_frames < 1:
            raise ParameterError("num_frames must be >= 1")
        if self.modality == "image" and self.num_frames != 1:
            raise ParameterError("image datasets have exactly one frame per sample")
        for color, shape in self.allowed_combos():
            if color not in PALETTE:
                raise ParameterError(f"unknown colour {color!r}")
            if shape not in SHAPES:
                raise ParameterError(f"unknown shape {shape!r}")
        for m in self.motions:
            if m not in MOTIONS:
                raise ParameterError(f"unknown motion {m!r}")
        lo, hi = self.size_range
        if lo < 2 or hi < lo or hi > min(self.resolution):
            raise ParameterError(f"bad size range {self.size_range}")


def rasterize(shape: str, x0: float, y0: float, size: int, hw: tuple[int, int]) -> np.ndarray:
    """Silhouette of a shape whose bounding box has top-left (x0, y0) and side ``size``.

    Pixels are tested at their centres, so an integer-aligned square covers
    exactly size*size pixels.
    """
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    if shape == "square":
        m = (px >= x0) & (px < x0 + size) & (py >= y0) & (py < y0 + size)
    elif shape == "circle":
        r = size / 2.0
        m = (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    elif shape == "triangle":
        # apex at top centre, base along the bottom edge of the box
        ax, ay = x0 + size / 2.0, y0
        bx, by = x0, y0 + size
        cx, cy = x0 + size, y0 + size

        def side(x1, y1, x2, y2):
            return (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)

        d1, d2, d3 = side(ax, ay, bx, by), side(bx, by, cx, cy), side(cx, cy, ax, ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        m = ~(neg & pos)
    else:
        raise ParameterError(f"unknown shape {shape!r}")
    return m.astype(np.uint8)


def motion_phrase(motion: str) -> str:
    return "staying still" if motion == "static" else f"moving {motion}"


def _pick_objects(spec: SynthSpec, rng) -> list[tuple[str, str]]:
    combos = spec.allowed_combos()
    for _ in range(1000):
        order = rng.permutation(len(combos))
        chosen = []
        for i in order:
            c, s = combos[i]
            if all(c != c2 and s != s2 for c2, s2 in chosen):
                chosen.append((c, s))
            if len(chosen) == spec.objects_per_clip:
                return chosen
    raise ParameterError(
        f"cannot place {spec.objects_per_clip} objects with distinct colours and shapes"
    )


def _place(spec: SynthSpec, sizes, velocities, rng) -> list[tuple[int, int]]:
    h, w = spec.resolution
    n = spec.num_frames - 1
    for _ in range(5000):
        boxes, starts = [], []
        ok = True
        for size, (vx, vy) in zip(sizes, velocities):
            # the whole trajectory must stay inside the frame
            xlo, xhi = max(0, -vx * n), min(w - size, w - size - vx * n)
            ylo, yhi = max(0, -vy * n), min(h - size, h - size - vy * n)
            if xhi < xlo or yhi < ylo:
                ok = False
                break
            x0 = int(rng.integers(xlo, xhi + 1))
            y0 = int(rng.integers(ylo, yhi + 1))
            bx = (min(x0, x0 + vx * n), max(x0, x0 + vx * n) + size)
            by = (min(y0, y0 + vy * n), max(y0, y0 + vy * n) + size)
            if any(bx[0] < ox[1] + 1 and ox[0] < bx[1] + 1 and by[0] < oy[1] + 1 and oy[0] < by[1] + 1
                   for ox, oy in boxes):
                ok = False
                break
            boxes.append((bx, by))
            starts.append((x0, y0))
        if ok:
            return starts
    raise ParameterError("could not place non-overlapping objects; lower sizes or object count")


def _save_png(arr: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def synth_dataset(spec: SynthSpec, out_dir, seed: int = 0) -> DatasetManifest:
    """Render ``spec.n_clips`` clips under ``out_dir`` and write ``manifest.json`` there."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = spec.resolution
    records = []
    for ci in range(spec.n_clips):
        clip_name = f"{spec.prefix}{ci:04d}"
        objects = _pick_objects(spec, rng)
        sizes = [int(rng.integers(spec.size_range[0], spec.size_range[1] + 1)) for _ in objects]
        motions = [spec.motions[int(rng.integers(len(spec.motions)))] for _ in objects]
        velocities = []
        for m in motions:
            speed = int(rng.integers(spec.speed_range[0], spec.speed_range[1] + 1))
            ux, uy = MOTIONS[m]
            velocities.append((ux * speed, uy * speed))
        starts = _place(spec, sizes, velocities, rng)
        bg = rng.uniform(*spec.background_range)

        frame_files = []
        obj_masks = [[] for _ in objects]
        for k in range(spec.num_frames):
            img = np.full((h, w, 3), bg, dtype=np.float64)
            for j, ((color, shape), size, (vx, vy), (x0, y0)) in enumerate(
                zip(objects, sizes, velocities, starts)
            ):
                m = rasterize(shape, x0 + vx * k, y0 + vy * k, size, (h, w))
                img[m.astype(bool)] = PALETTE[color]
                obj_masks[j].append(m)
            rel = f"frames/{clip_name}/{k:03d}.png"
            _save_png(np.round(img * 255).astype(np.uint8), out_dir / rel)
            frame_files.append(rel)

        referred = range(len(objects)) if spec.refer_all else [0]
        for j in referred:
            color, shape = objects[j]
            sample_id = f"{clip_name}_o{j}" if spec.refer_all else clip_name
            mask_files = []
            for k, m in enumerate(obj_masks[j]):
                rel = f"masks/{sample_id}/{k:03d}.png"
                _save_png(m * 255, out_dir / rel)
                mask_files.append(rel)
            exprs = [f"the {color} {shape}"]
            if spec.num_frames > 1:
                exprs.append(f"the {color} {shape} {motion_phrase(motions[j])}")
            records.append(
                SampleRecord(
                    clip_id=sample_id,
                    frames=list(frame_files),
                    masks=mask_files,
                    expressions=exprs,
                    concept=f"{color} {shape}",
                    split=spec.split,
                )
            )

    manifest = DatasetManifest(root=out_dir.resolve(), samples=records, modality=spec.modality)
    doc = manifest.to_json()
    doc["root"] = "."
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")
    return manifest
