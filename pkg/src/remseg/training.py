"""Losses, the two-stage fine-tuning loop, optional denoising pretraining and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codec import Autoencoder, NoiseSchedule, build_schedule, encode_mask, encode_video, forward_diffuse
from .data import AugParams, DatasetManifest, ReferralSample, load_sample, pseudo_video, resize_sample, take_frames, window_indices
from .denoiser import DenoiserConfig, DenoiserNet, partition_manifest, spatial_parameters, temporal_parameters
from .errors import ParameterError, ShapeError, TrainingDivergedError
from .text import get_text_encoder
from .utils import param_checksum, read_blob, write_blob

log = logging.getLogger(__name__)

STAGES = ("pretrain", "stage1", "stage2")
ALWAYS_FROZEN = ("autoencoder", "text_encoder")

# full-scale settings, kept for reference and not used by default
FULL_SCALE_PRESET = {
    "stage1": {"lr": 1e-6, "batch_size": 4, "window": 8, "epochs": 1, "size": (512, 512)},
    "stage2": {"lr": 1e-6, "batch_size": 4, "window": 8, "epochs": 40, "size": (512, 512)},
}


# -- losses ------------------------------------------------------------------


def mask_latent_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and encoded ground-truth mask latents."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def denoising_loss(net, z0, e_c, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    z_t = forward_diffuse(z0, t, eps, sched)
    pred = net(z_t, e_c, t)
    if pred.shape != eps.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs noise {tuple(eps.shape)}")
    return F.mse_loss(pred, eps)


# -- configuration and state -------------------------------------------------


@dataclass
class TrainConfig:
    stage: str = "stage2"
    lr: float = 1e-4
    batch_size: int = 2
    window: int = 8
    epochs: int = 1
    max_steps: Optional[int] = None
    seed: int = 0
    image_fraction: float = 0.5
    weight_decay: float = 0.01
    frozen: tuple[str, ...] = ALWAYS_FROZEN
    decoder: str = "vae"
    size: Optional[tuple[int, int]] = None
    aug: AugParams = field(default_factory=AugParams)
    timesteps: int = 1000
    log_path: Optional[str] = None
    ckpt_path: Optional[str] = None
    ckpt_every: int = 0
    val_every: int = 0
    patience: int = 3

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.lr >= 0:
            raise ParameterError("learning rate must be >= 0")
        if self.batch_size < 1 or self.window < 1 or self.epochs < 0:
            raise ParameterError("batch_size and window must be >= 1, epochs >= 0")
        if not 0.0 <= self.image_fraction <= 1.0:
            raise ParameterError("image_fraction must be in [0, 1]")
        if self.decoder not in ("vae", "cnn"):
            raise ParameterError(f"decoder must be 'vae' or 'cnn', got {self.decoder!r}")
        frozen = tuple(self.frozen)
        for name in ALWAYS_FROZEN:
            if name not in frozen:
                frozen = frozen + (name,)
        if self.stage == "stage1" and "temporal" not in frozen:
            frozen = frozen + ("temporal",)
        self.frozen = frozen
        if isinstance(self.aug, dict):
            self.aug = AugParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.aug.items()})
        if self.size is not None:
            self.size = tuple(self.size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug"] = asdict(self.aug)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    stage: str
    step: int = 0
    epoch: int = 0
    optimizer: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None
    running_loss: float = float("nan")
    losses: list[float] = field(default_factory=list)


# -- data --------------------------------------------------------------------


@dataclass
class Item:
    sample_id: str
    expression: str
    z0: torch.Tensor
    target: torch.Tensor
    masks: torch.Tensor


class LatentBank:
    """Samples of one manifest held in memory, with clip latents cached.

    Encoding is per frame and the autoencoder is frozen, so a window of a
    cached clip latent equals the latent of that window.
    """

    def __init__(self, ae: Autoencoder, manifest: Optional[DatasetManifest], size=None):
        self.ae = ae
        self.samples: list[ReferralSample] = []
        if manifest is not None:
            for cid in manifest.ids():
                s = load_sample(manifest, cid)
                if size is not None:
                    s = resize_sample(s, size, ae.factor)
                self.samples.append(s)
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def __len__(self):
        return len(self.samples)

    def clip_latents(self, i: int):
        if i not in self._cache:
            s = self.samples[i]
            self._cache[i] = (encode_video(self.ae, s.clip), encode_mask(self.ae, s.gt))
        return self._cache[i]

    def video_item(self, i: int, window: int, rng) -> Item:
        s = self.samples[i]
        idx = window_indices(len(s.clip), window, rng)
        zf, zm = self.clip_latents(i)
        expr = s.expressions[int(rng.integers(len(s.expressions)))]
        masks = torch.from_numpy(s.gt.masks[idx].astype(np.float32))
        return Item(s.clip_id, expr, zf[idx], zm[idx], masks)

    def image_item(self, i: int, window: int, aug: AugParams, rng) -> Item:
        s = self.samples[i]
        pv = pseudo_video(s, window, aug, seed=int(rng.integers(2**31)))
        expr = s.expressions[int(rng.integers(len(s.expressions)))]
        return Item(
            s.clip_id,
            expr,
            encode_video(self.ae, pv.clip),
            encode_mask(self.ae, pv.gt),
            torch.from_numpy(pv.gt.masks.astype(np.float32)),
        )


def stage2_draws(n_steps: int, batch_size: int, image_fraction: float, n_video: int, n_image: int, seed: int, start: int = 0):
    """(kind, index) pairs per batch element for steps [start, start + n_steps)."""
    out = []
    for step in range(start, start + n_steps):
        rng = np.random.default_rng([seed, step])
        out.append(_stage2_batch(rng, batch_size, image_fraction, n_video, n_image))
    return out


def _stage2_batch(rng, batch_size, image_fraction, n_video, n_image):
    batch = []
    for _ in range(batch_size):
        use_image = rng.random() < image_fraction
        if n_image == 0:
            use_image = False
        elif n_video == 0:
            use_image = True
        kind = "image" if use_image else "video"
        batch.append((kind, int(rng.integers(n_image if use_image else n_video))))
    return batch


# -- trainer -----------------------------------------------------------------


class Trainer:
    """Runs one training stage; owns ``net`` for the duration of ``run``."""

    def __init__(self, net: DenoiserNet, ae: Autoencoder, cfg: TrainConfig,
                 video: Optional[LatentBank] = None, image: Optional[LatentBank] = None):
        if not ae.frozen:
            raise ParameterError("the autoencoder must be frozen before fine-tuning")
        if cfg.decoder == "cnn" and net.mask_head is None:
            raise ParameterError("decoder='cnn' needs a network built with cnn_head=True")
        self.net, self.ae, self.cfg = net, ae, cfg
        self.video = video or LatentBank(ae, None)
        self.image = image or LatentBank(ae, None)
        self.text = get_text_encoder(net.config.d_text, net.config.text_seed)
        self.sched = build_schedule(cfg.timesteps) if cfg.stage == "pretrain" else None
        self._emb_cache: dict[str, torch.Tensor] = {}

        if cfg.stage == "stage1":
            if len(self.image) == 0:
                raise ParameterError("stage1 trains on image samples; none given")
            for p in temporal_parameters(net):
                p.requires_grad_(False)
            trainable = spatial_parameters(net)
        else:
            trainable = list(net.parameters())
        for p in trainable:
            p.requires_grad_(True)
        self.params = trainable
        self.opt = torch.optim.AdamW(self.params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def steps_per_epoch(self) -> int:
        if self.cfg.stage == "stage1":
            n = len(self.image)
        elif self.cfg.stage == "pretrain":
            n = len(self.video) + len(self.image)
        else:
            n = len(self.video) + len(self.image)
        return max(1, math.ceil(n / self.cfg.batch_size))

    def total_steps(self) -> int:
        total = self.cfg.epochs * self.steps_per_epoch()
        return total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)

    def embed(self, expr: str) -> torch.Tensor:
        if expr not in self._emb_cache:
            self._emb_cache[expr] = self.text.encode(expr)
        return self._emb_cache[expr]

    def batch(self, step: int) -> list[Item]:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, step])
        if cfg.stage == "stage1":
            spe = self.steps_per_epoch()
            epoch, k = divmod(step, spe)
            perm = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(self.image))
            idx = perm[k * cfg.batch_size : (k + 1) * cfg.batch_size]
            if len(idx) < cfg.batch_size:
                idx = np.concatenate([idx, perm[: cfg.batch_size - len(idx)]])
            return [self.image.image_item(int(i), cfg.window, cfg.aug, rng) for i in idx]
        draws = _stage2_batch(rng, cfg.batch_size, cfg.image_fraction, len(self.video), len(self.image))
        return [
            self.image.image_item(i, cfg.window, cfg.aug, rng) if kind == "image"
            else self.video.video_item(i, cfg.window, rng)
            for kind, i in draws
        ]

    def loss(self, items: list[Item], step: int) -> torch.Tensor:
        dtype = next(self.net.parameters()).dtype
        z0 = torch.stack([it.z0 for it in items]).to(dtype)
        e_c = torch.stack([self.embed(it.expression) for it in items]).to(dtype)
        if self.cfg.stage == "pretrain":
            g = torch.Generator().manual_seed(int(np.random.default_rng([self.cfg.seed, step, 2]).integers(2**62)))
            t = torch.randint(1, self.sched.T + 1, (len(items),), generator=g)
            eps = torch.randn(z0.shape, generator=g, dtype=dtype)
            return denoising_loss(self.net, z0, e_c, t, eps, self.sched)
        if self.cfg.decoder == "cnn":
            logits = self.net.mask_logits(z0, e_c, 0)
            masks = torch.stack([it.masks for it in items]).to(dtype)[:, :, None]
            return F.binary_cross_entropy_with_logits(logits, masks)
        target = torch.stack([it.target for it in items]).to(dtype)
        return mask_latent_loss(self.net(z0, e_c, 0), target)

    def step(self, state: TrainState) -> float:
        items = self.batch(state.step)
        self.net.train()
        loss = self.loss(items, state.step)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(state.step, self.cfg.lr, [it.sample_id for it in items], value)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        state.step += 1
        state.epoch = state.step // self.steps_per_epoch()
        state.losses.append(value)
        state.running_loss = value if math.isnan(state.running_loss) else 0.9 * state.running_loss + 0.1 * value
        return value

    def run(self, state: Optional[TrainState] = None, until: Optional[int] = None,
            validate=None) -> TrainState:
        """Train from ``state`` (or scratch) up to ``until`` steps (default: the configured total).

        ``validate`` is an optional zero-argument callable returning a score
        to maximise; with ``cfg.val_every`` epochs set it drives early stopping.
        """
        cfg = self.cfg
        if state is None:
            state = TrainState(stage=cfg.stage)
        elif state.stage != cfg.stage:
            raise ParameterError(f"cannot resume a {state.stage} state in {cfg.stage}")
        if state.optimizer is not None:
            self.opt.load_state_dict(state.optimizer)
        if state.rng_state is not None:
            torch.set_rng_state(state.rng_state)
        end = self.total_steps() if until is None else min(until, self.total_steps())
        logf = open(cfg.log_path, "a") if cfg.log_path else None
        spe = self.steps_per_epoch()
        best, bad = -math.inf, 0
        try:
            while state.step < end:
                t0 = time.perf_counter()
                value = self.step(state)
                if logf:
                    rec = {"step": state.step, "stage": cfg.stage, "loss": value, "lr": cfg.lr,
                           "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
                if cfg.ckpt_path and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                    save_checkpoint(self.snapshot(state), self.net, cfg.ckpt_path)
                if validate is not None and cfg.val_every and state.step % (cfg.val_every * spe) == 0:
                    score = validate()
                    log.info("step %d validation %.4f", state.step, score)
                    if score > best:
                        best, bad = score, 0
                    else:
                        bad += 1
                        if bad >= cfg.patience:
                            log.info("early stop at step %d", state.step)
                            break
        finally:
            if logf:
                logf.close()
        self.net.eval()
        return self.snapshot(state)

    def snapshot(self, state: TrainState) -> TrainState:
        state.optimizer = _clone_state(self.opt.state_dict())
        state.rng_state = torch.get_rng_state()
        return state


def _clone_state(sd):
    if isinstance(sd, torch.Tensor):
        return sd.clone()
    if isinstance(sd, dict):
        return {k: _clone_state(v) for k, v in sd.items()}
    if isinstance(sd, list):
        return [_clone_state(v) for v in sd]
    return sd


def pretrain(net, ae, data: DatasetManifest, cfg: TrainConfig, state=None) -> TrainState:
    """Toy generative pretraining of ``net`` with the noise-prediction objective."""
    if cfg.stage != "pretrain":
        raise ParameterError("pretrain needs cfg.stage == 'pretrain'")
    bank = LatentBank(ae, data, cfg.size)
    if data.modality == "image":
        return Trainer(net, ae, cfg, image=bank).run(state)
    return Trainer(net, ae, cfg, video=bank).run(state)


def train_stage1(net, ae, data: DatasetManifest, cfg: TrainConfig, state=None) -> TrainState:
    """Spatial-only fine-tuning on pseudo videos built from image samples."""
    if cfg.stage != "stage1":
        raise ParameterError("train_stage1 needs cfg.stage == 'stage1'")
    if data.modality != "image":
        raise ParameterError("stage1 expects an image manifest")
    return Trainer(net, ae, cfg, image=LatentBank(ae, data, cfg.size)).run(state)


def train_stage2(net, ae, video_data: DatasetManifest, image_data: Optional[DatasetManifest],
                 cfg: TrainConfig, state=None, val_data: Optional[DatasetManifest] = None) -> TrainState:
    """Joint fine-tuning of every denoiser weight on video and pseudo-video samples."""
    if cfg.stage != "stage2":
        raise ParameterError("train_stage2 needs cfg.stage == 'stage2'")
    trainer = Trainer(net, ae, cfg, video=LatentBank(ae, video_data, cfg.size),
                      image=LatentBank(ae, image_data, cfg.size) if image_data is not None else None)
    validate = None
    if val_data is not None and cfg.val_every:
        from .evaluation import evaluate_dataset
        from .inference import Segmenter

        def validate():
            seg = Segmenter(net, ae, window=cfg.window, decoder=cfg.decoder)
            return evaluate_dataset(seg, val_data).J
    return trainer.run(state, validate=validate)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(state: Optional[TrainState], net: DenoiserNet, path, extra: Optional[dict] = None) -> dict:
    text = get_text_encoder(net.config.d_text, net.config.text_seed)
    blob = {"net": net.state_dict(), "state": asdict(state) if state is not None else None}
    meta = {
        "config": net.config.to_dict(),
        "partition": partition_manifest(net),
        "text_vocab_hash": text.vocab_hash(),
        "param_checksum": param_checksum(net),
        "stage": state.stage if state else None,
        "step": state.step if state else 0,
    }
    if extra:
        meta.update(extra)
    return write_blob(blob, path, meta)


def load_checkpoint(path):
    """Returns (TrainState or None, DenoiserNet, sidecar dict)."""
    blob, meta = read_blob(path)
    cfg = DenoiserConfig(**meta["config"])
    net = DenoiserNet(cfg)
    net.load_state_dict(blob["net"])
    net.eval()
    st = blob["state"]
    state = TrainState(**st) if st is not None else None
    return state, net, meta
