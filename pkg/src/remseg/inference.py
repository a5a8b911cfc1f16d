"""Mask-latent inference at t = 0, sliding windows for long clips, overlays."""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .codec import Autoencoder, binarize, decode_to_pixels, encode_video
from .data import MaskSequence, VideoClip, resize_frames, resize_masks
from .denoiser import DenoiserNet
from .errors import ParameterError
from .text import get_text_encoder

HIGHLIGHT = (1.0, 0.0, 0.0)


def _soft_window(net: DenoiserNet, ae: Autoencoder, frames: np.ndarray, expression: str, decoder: str) -> torch.Tensor:
    """Decoded per-pixel values of one window before thresholding, (F, C, H, W) in [0, 1]."""
    text = get_text_encoder(net.config.d_text, net.config.text_seed)
    e_c = text.encode(expression)
    z0 = encode_video(ae, VideoClip(frames))
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        if decoder == "cnn":
            return torch.sigmoid(net.mask_logits(z0.to(dtype), e_c.to(dtype), 0)).float()
        pred = net(z0.to(dtype), e_c.to(dtype), 0)
        return decode_to_pixels(ae, pred.float())


def segment_window(net, ae, clip: VideoClip, expression: str, *, window: int = 8,
                   threshold: float = 0.5, decoder: str = "vae") -> MaskSequence:
    """Encode the frames, predict mask latents at t = 0, decode and binarize."""
    if len(clip) > window:
        warnings.warn(f"window of {len(clip)} frames exceeds the trained length {window}", stacklevel=2)
    soft = _soft_window(net, ae, clip.frames, expression, decoder)
    return binarize(soft, threshold)


def window_starts(n: int, window: int, overlap: int) -> list[int]:
    if window < 1:
        raise ParameterError("window must be >= 1")
    if not 0 <= overlap < window:
        raise ParameterError("overlap must satisfy 0 <= overlap < window")
    if n <= window:
        return [0]
    stride = window - overlap
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


def segment_video(net, ae, clip: VideoClip, expression: str, window: int = 8,
                  overlap: Optional[int] = None, *, threshold: float = 0.5, decoder: str = "vae") -> MaskSequence:
    """Overlapping windows; decoded values are averaged across windows, then thresholded once."""
    if overlap is None:
        overlap = window // 2
    n = len(clip)
    starts = window_starts(n, window, overlap)
    total = None
    count = torch.zeros(n)
    for s in starts:
        e = min(s + window, n)
        soft = _soft_window(net, ae, clip.frames[s:e], expression, decoder)
        if total is None:
            total = torch.zeros((n,) + tuple(soft.shape[1:]))
        total[s:e] += soft
        count[s:e] += 1
    avg = total / count.view(-1, 1, 1, 1)
    return binarize(avg, threshold)


class Segmenter:
    """Callable ``(clip, expression) -> MaskSequence`` at the clip's original resolution.

    Frames are resized to the nearest size the network accepts; masks come
    back with nearest-neighbour resizing.
    """

    def __init__(self, net: DenoiserNet, ae: Autoencoder, window: int = 8, overlap: Optional[int] = None,
                 decoder: str = "vae", threshold: float = 0.5):
        if decoder == "cnn" and net.mask_head is None:
            raise ParameterError("network has no CNN mask head")
        self.net, self.ae = net.eval(), ae
        self.window, self.overlap, self.decoder, self.threshold = window, overlap, decoder, threshold
        self.multiple = ae.factor * net.downscale

    def working_size(self, size) -> tuple[int, int]:
        m = self.multiple
        return tuple(max(m, int(round(s / m)) * m) for s in size)

    def __call__(self, clip: VideoClip, expression: str) -> MaskSequence:
        size = clip.size
        work = self.working_size(size)
        if work != size:
            clip = VideoClip(resize_frames(clip.frames, work), fps=clip.fps, clip_id=clip.clip_id)
        masks = segment_video(self.net, self.ae, clip, expression, self.window, self.overlap,
                              threshold=self.threshold, decoder=self.decoder)
        if work != size:
            masks = MaskSequence(resize_masks(masks.masks, size))
        return masks


def write_masks(masks: MaskSequence, out_root, clip_id: str, expr_idx: int) -> list[Path]:
    """8-bit PNGs (0/255) at ``<out_root>/<clip_id>/<expr_idx>/<frame_idx>.png``."""
    d = Path(out_root) / clip_id / str(expr_idx)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(masks.masks):
        p = d / f"{i:05d}.png"
        Image.fromarray((m * 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths


def overlay(frame: np.ndarray, mask: np.ndarray, color=HIGHLIGHT, alpha: float = 0.5) -> np.ndarray:
    out = frame.astype(np.float32).copy()
    fg = mask.astype(bool)
    out[fg] = (1.0 - alpha) * out[fg] + alpha * np.asarray(color, dtype=np.float32)
    return out


def render_overlay(clip: VideoClip, masks: MaskSequence, out_dir, color=HIGHLIGHT, alpha: float = 0.5) -> list[Path]:
    if len(clip) != len(masks) or clip.size != masks.size:
        raise ParameterError("clip and masks are not aligned")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (f, m) in enumerate(zip(clip.frames, masks.masks)):
        p = out_dir / f"{i:05d}.png"
        Image.fromarray(np.round(overlay(f, m, color, alpha) * 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths
