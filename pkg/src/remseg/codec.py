"""Frozen autoencoder, diffusion forward process and the mask <-> latent codec."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetManifest, MaskSequence, VideoClip, read_frame, read_mask
from .errors import DomainError, ParameterError, ShapeError, TrainingDivergedError
from .utils import FreezableMixin, read_blob, write_blob

log = logging.getLogger(__name__)


# -- noise schedule ----------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule.

    ``alpha_bars`` has T+1 entries; index 0 is the clean latent (alpha_bar = 1).
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def sqrt_alpha_bars(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars)

    @property
    def sqrt_one_minus_alpha_bars(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars)


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps.

    ``t`` is an int or a 1-D tensor with one timestep per leading batch entry.
    """
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t, dtype=np.int64)
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() > sched.T):
        raise ParameterError(f"timestep out of [0, {sched.T}]")
    a = torch.as_tensor(sched.sqrt_alpha_bars[t_arr], dtype=z0.dtype, device=z0.device)
    b = torch.as_tensor(sched.sqrt_one_minus_alpha_bars[t_arr], dtype=z0.dtype, device=z0.device)
    if a.ndim == 1:
        shape = (-1,) + (1,) * (z0.ndim - 1)
        a, b = a.view(shape), b.view(shape)
    return a * z0 + b * eps


# -- autoencoder -------------------------------------------------------------


class ResBlock(nn.Module):
    # no normalisation: statistics-free convs keep absolute intensity local
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Autoencoder(FreezableMixin, nn.Module):
    """Three-level convolutional VAE with downsample factor 4.

    Pixels enter in [-1, 1]. ``encode`` returns the posterior mean; sampling
    only happens inside training.
    """

    factor = 4

    def __init__(self, latent_channels: int = 4, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        c0, c1, c2 = channels
        self.latent_channels = latent_channels
        self.channels = tuple(channels)
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c0, 3, padding=1),
            ResBlock(c0, c0),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1),
            ResBlock(c1, c1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            ResBlock(c2, c2),
            nn.SiLU(),
            nn.Conv2d(c2, 2 * latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, c2, 3, padding=1),
            ResBlock(c2, c2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c2, c1, 3, padding=1),
            ResBlock(c1, c1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c1, c0, 3, padding=1),
            ResBlock(c0, c0),
            nn.SiLU(),
            nn.Conv2d(c0, 3, 3, padding=1),
        )

    def posterior(self, x):
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, x):
        return self.posterior(x)[0]

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        mean, logvar = self.posterior(x)
        z = mean + torch.randn_like(mean) * torch.exp(0.5 * logvar)
        return self.decode(z), mean, logvar

    def config(self) -> dict:
        return {"f": self.factor, "C_z": self.latent_channels, "channels": list(self.channels)}


def save_autoencoder(ae: Autoencoder, path) -> dict:
    meta = ae.config()
    meta["param_count"] = sum(p.numel() for p in ae.parameters())
    meta["frozen"] = bool(ae.frozen)
    return write_blob(ae.state_dict(), path, meta)


def load_autoencoder(path) -> Autoencoder:
    state, meta = read_blob(path)
    ae = Autoencoder(meta["C_z"], meta["channels"])
    ae.load_state_dict(state)
    if meta.get("frozen", True):
        ae.freeze()
    return ae


# -- codec operations --------------------------------------------------------

_ENCODE_CHUNK = 32


def _check_divisible(h: int, w: int, f: int):
    if h % f or w % f:
        raise ShapeError(f"spatial size {(h, w)} not divisible by downsample factor {f}")


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(F, H, W, 3) in [0, 1] -> (F, 3, H, W) in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 3, 1, 2)
    return x * 2.0 - 1.0


@torch.no_grad()
def encode_pixels(ae: Autoencoder, x: torch.Tensor) -> torch.Tensor:
    _check_divisible(x.shape[-2], x.shape[-1], ae.factor)
    dtype = next(ae.parameters()).dtype
    chunks = [ae.encode(x[i : i + _ENCODE_CHUNK].to(dtype)) for i in range(0, x.shape[0], _ENCODE_CHUNK)]
    return torch.cat(chunks)


def encode_video(ae: Autoencoder, clip: VideoClip) -> torch.Tensor:
    """Per-frame posterior means, shape (F, C_z, H/f, W/f)."""
    return encode_pixels(ae, frames_to_tensor(clip.frames))


def mask_to_rgb(masks: MaskSequence) -> VideoClip:
    m = np.asarray(masks.masks if isinstance(masks, MaskSequence) else masks)
    if not np.isin(m, (0, 1)).all():
        raise DomainError("mask_to_rgb expects binary masks")
    rgb = np.repeat(m[..., None].astype(np.float32), 3, axis=-1)
    return VideoClip(rgb)


def encode_mask(ae: Autoencoder, masks: MaskSequence) -> torch.Tensor:
    return encode_video(ae, mask_to_rgb(masks))


@torch.no_grad()
def decode_to_pixels(ae: Autoencoder, latents: torch.Tensor) -> torch.Tensor:
    """Decode (F, C_z, h, w) latents to (F, 3, H, W) pixels mapped to [0, 1] (unclamped)."""
    if not torch.isfinite(latents).all():
        raise DomainError("latents contain NaN or Inf")
    dtype = next(ae.parameters()).dtype
    out = [
        ae.decode(latents[i : i + _ENCODE_CHUNK].to(dtype))
        for i in range(0, latents.shape[0], _ENCODE_CHUNK)
    ]
    return (torch.cat(out) + 1.0) / 2.0


def binarize(pixels: torch.Tensor, threshold: float = 0.5) -> MaskSequence:
    """Average the three channels of (F, 3, H, W) pixels and threshold."""
    mean = torch.as_tensor(pixels).mean(dim=1)
    return MaskSequence((mean >= threshold).to(torch.uint8).cpu().numpy())


def latents_to_mask(ae: Autoencoder, pred: torch.Tensor, threshold: float = 0.5) -> MaskSequence:
    return binarize(decode_to_pixels(ae, pred), threshold)


# -- toy autoencoder training ------------------------------------------------


@dataclass
class AETrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 5e-4
    crop: int = 32
    kl_weight: float = 1e-4
    mask_fraction: float = 0.5
    flat_fraction: float = 0.0625
    latent_channels: int = 4
    channels: tuple[int, int, int] = (16, 32, 64)
    seed: int = 0
    log_every: int = 250


def _collect_images(data: Union[DatasetManifest, Sequence[DatasetManifest]]):
    manifests = [data] if isinstance(data, DatasetManifest) else list(data)
    frames, masks = {}, {}
    for man in manifests:
        for rec in man.samples:
            for f in rec.frames:
                p = man.root / f
                if p not in frames:
                    frames[p] = read_frame(p)
            for m in rec.masks:
                p = man.root / m
                if p not in masks:
                    masks[p] = read_mask(p)
    return list(frames.values()), list(masks.values())


def train_toy_autoencoder(data, cfg: AETrainConfig = AETrainConfig()) -> Autoencoder:
    """Fit a small VAE on dataset frames and 3-channel masks, then freeze it.

    Trains on random crops aligned to the downsample factor; the network is
    fully convolutional so it applies unchanged at full resolution.
    """
    frames, masks = _collect_images(data)
    if not frames:
        raise ParameterError("cannot train an autoencoder on an empty dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    ae = Autoencoder(cfg.latent_channels, cfg.channels)
    f = ae.factor
    pool_f = torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2) * 2 - 1
    pool_m = torch.from_numpy(np.stack(masks).astype(np.float32))[:, None].expand(-1, 3, -1, -1) * 2 - 1 if masks else pool_f
    H, W = pool_f.shape[-2:]
    crop = min(cfg.crop, H, W)
    crop -= crop % f

    opt = torch.optim.Adam(ae.parameters(), lr=cfg.lr)
    n_mask = int(round(cfg.batch_size * cfg.mask_fraction)) if masks else 0
    n_flat = int(round(cfg.batch_size * cfg.flat_fraction))
    n_frame = cfg.batch_size - n_mask - n_flat
    ae.train()
    for step in range(cfg.steps):
        fi = rng.integers(0, len(pool_f), n_frame)
        mi = rng.integers(0, len(pool_m), n_mask)
        y0 = int(rng.integers(0, (H - crop) // f + 1)) * f
        x0 = int(rng.integers(0, (W - crop) // f + 1)) * f
        # flat colour fields keep absolute intensity calibrated
        flat = torch.from_numpy(rng.uniform(-1, 1, (n_flat, 3, 1, 1)).astype(np.float32))
        batch = torch.cat([
            pool_f[fi, :, y0 : y0 + crop, x0 : x0 + crop],
            pool_m[mi, :, y0 : y0 + crop, x0 : x0 + crop],
            flat.expand(-1, -1, crop, crop),
        ])
        if rng.random() < 0.5:
            batch = batch.flip(-1)
        recon, mean, logvar = ae(batch)
        rec_loss = F.mse_loss(recon, batch)
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        loss = rec_loss + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, cfg.lr, list(fi) + list(mi), float(loss))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("ae step %d rec %.5f kl %.3f", step, rec_loss.item(), kl.item())
    return ae.freeze()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for arrays in [0, 1]."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def reconstruct(ae: Autoencoder, clip: VideoClip) -> np.ndarray:
    """Round-trip a clip through the autoencoder; returns (F, H, W, 3) in [0, 1]."""
    pix = decode_to_pixels(ae, encode_video(ae, clip)).clamp(0, 1)
    return pix.permute(0, 2, 3, 1).numpy()
