"""Text-conditioned spatio-temporal U-Net over video latents, plus the CNN mask head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, repeat

from .errors import ParameterError, ShapeError


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (1, 2)
    temporal: bool = True
    d_text: int = 64
    time_dim: int = 128
    num_heads: int = 4
    text_seed: int = 0
    cnn_head: bool = False
    factor: int = 4

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attention_levels = tuple(self.attention_levels)
        if not self.attention_levels:
            raise ParameterError("at least one level needs cross-attention")
        if any(not 0 <= i < len(self.channel_mult) for i in self.attention_levels):
            raise ParameterError(f"attention levels {self.attention_levels} out of range")

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 4):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads if dim % heads == 0 else 1
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)
        q, k, v = (rearrange(a, "b n (h d) -> b h n d", h=self.heads) for a in (q, k, v))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.to_out(out)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialTransformer(nn.Module):
    """Per-frame self-attention over pixels, then cross-attention to the text tokens."""

    def __init__(self, ch: int, d_text: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.ln1 = nn.LayerNorm(ch)
        self.self_attn = Attention(ch, heads=heads)
        self.ln2 = nn.LayerNorm(ch)
        self.cross_attn = Attention(ch, d_text, heads=heads)
        self.ln3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context):
        h, w = x.shape[-2:]
        y = rearrange(self.proj_in(self.norm(x)), "n c h w -> n (h w) c")
        y = y + self.self_attn(self.ln1(y))
        y = y + self.cross_attn(self.ln2(y), context)
        y = y + self.ff(self.ln3(y))
        y = rearrange(y, "n (h w) c -> n c h w", h=h, w=w)
        return x + self.proj_out(y)


class TemporalAttention(nn.Module):
    """Attention across the frame axis, independently at every spatial location.

    The output projection starts at zero so a fresh block is an identity map.
    """

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.attn = Attention(ch, heads=heads)
        nn.init.zeros_(self.attn.to_out.weight)
        nn.init.zeros_(self.attn.to_out.bias)

    def forward(self, x, frames: int):
        n, c, h, w = x.shape
        y = rearrange(self.norm(x), "(b f) c h w -> (b h w) f c", f=frames)
        pos = timestep_embedding(torch.arange(frames), c).to(y.dtype)
        y = self.attn(y + pos[None])
        y = rearrange(y, "(b h w) f c -> (b f) c h w", h=h, w=w)
        return x + y


class Level(nn.Module):
    def __init__(self, cin, cout, cfg: DenoiserConfig, attention: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_dim)
        self.spatial = SpatialTransformer(cout, cfg.d_text, cfg.num_heads) if attention else None
        self.temporal = TemporalAttention(cout, cfg.num_heads) if cfg.temporal else None

    def forward(self, x, temb, context, frames):
        x = self.res(x, temb)
        if self.spatial is not None:
            x = self.spatial(x, context)
        if self.temporal is not None:
            x = self.temporal(x, frames)
        return x


class CNNMaskHead(nn.Module):
    """Learned mask decoder: last decoder-level features -> per-pixel logits at full resolution."""

    def __init__(self, ch: int, factor: int = 4):
        super().__init__()
        n_up = int(round(math.log2(factor)))
        if 2**n_up != factor:
            raise ParameterError("factor must be a power of two")
        self.factor = factor
        layers = [nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        for _ in range(n_up):
            layers += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                       nn.Conv2d(ch, ch, 3, padding=1), nn.GroupNorm(_groups(ch), ch), nn.SiLU()]
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.in_channels = ch

    def forward(self, features):
        if features.ndim != 4 or features.shape[1] != self.in_channels:
            raise ShapeError(f"expected (N, {self.in_channels}, h, w) features, got {tuple(features.shape)}")
        return self.net(features)


class DenoiserNet(nn.Module):
    """eps_theta(z_t, e_c, t) over latents of shape (B, F, C_z, h, w).

    Unbatched (F, C_z, h, w) input with (L, d_text) text is also accepted and
    returned unbatched.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down.append(Level(prev, ch, cfg, i in cfg.attention_levels))
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        last = len(chans) - 1
        self.mid = Level(chans[-1], chans[-1], cfg, last in cfg.attention_levels)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            self.up.append(Level(prev + chans[i], chans[i], cfg, i in cfg.attention_levels))
            if i > 0:
                self.upsample.append(nn.Conv2d(chans[i], chans[i - 1], 3, padding=1))
            prev = chans[i - 1] if i > 0 else chans[i]
        self.norm_out = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.mask_head = CNNMaskHead(chans[0], cfg.factor) if cfg.cnn_head else None

    @property
    def downscale(self) -> int:
        return 2 ** (len(self.config.channel_mult) - 1)

    def forward(self, z, e_c, t, return_features: bool = False):
        cfg = self.config
        unbatched = z.ndim == 4
        if unbatched:
            z = z[None]
            e_c = e_c[None] if e_c.ndim == 2 else e_c
        if z.ndim != 5 or z.shape[2] != cfg.latent_channels:
            raise ShapeError(f"expected latents (B, F, {cfg.latent_channels}, h, w), got {tuple(z.shape)}")
        b, frames, _, h, w = z.shape
        if h % self.downscale or w % self.downscale:
            raise ShapeError(f"latent size {(h, w)} not divisible by {self.downscale}")
        if e_c.ndim != 3 or e_c.shape[0] != b or e_c.shape[-1] != cfg.d_text:
            raise ShapeError(f"text embedding {tuple(e_c.shape)} incompatible with batch {b}, d_text {cfg.d_text}")

        t = torch.as_tensor(t, device=z.device)
        if t.ndim == 0:
            t = t.expand(b)
        temb = self.time_mlp(timestep_embedding(t, cfg.time_dim).to(z.dtype))
        temb = repeat(temb, "b d -> (b f) d", f=frames)
        ctx = repeat(e_c.to(z.dtype), "b l d -> (b f) l d", f=frames)

        x = self.conv_in(rearrange(z, "b f c h w -> (b f) c h w"))
        skips = []
        for i, level in enumerate(self.down):
            x = level(x, temb, ctx, frames)
            skips.append(x)
            if i < len(self.downsample):
                x = self.downsample[i](x)
        x = self.mid(x, temb, ctx, frames)
        for j, level in enumerate(self.up):
            x = level(torch.cat([x, skips.pop()], dim=1), temb, ctx, frames)
            if j < len(self.upsample):
                x = self.upsample[j](F.interpolate(x, scale_factor=2, mode="nearest"))
        features = x
        out = self.conv_out(F.silu(self.norm_out(features)))
        out = rearrange(out, "(b f) c h w -> b f c h w", b=b)
        if unbatched:
            out = out[0]
        if return_features:
            return out, rearrange(features, "(b f) c h w -> b f c h w", b=b)
        return out

    def mask_logits(self, z, e_c, t=0):
        """CNN-head path: (B, F, 1, H, W) logits from the last decoder level."""
        if self.mask_head is None:
            raise ParameterError("this network was built without a CNN mask head")
        unbatched = z.ndim == 4
        _, feats = self(z, e_c, t, return_features=True)
        b = feats.shape[0]
        logits = self.mask_head(rearrange(feats, "b f c h w -> (b f) c h w"))
        logits = rearrange(logits, "(b f) c h w -> b f c h w", b=b)
        return logits[0] if unbatched else logits


def temporal_parameters(net: DenoiserNet) -> list[nn.Parameter]:
    ids = set()
    out = []
    for mod in net.modules():
        if isinstance(mod, TemporalAttention):
            for p in mod.parameters():
                if id(p) not in ids:
                    ids.add(id(p))
                    out.append(p)
    return out


def spatial_parameters(net: DenoiserNet) -> list[nn.Parameter]:
    temporal = {id(p) for p in temporal_parameters(net)}
    return [p for p in net.parameters() if id(p) not in temporal]


def partition_manifest(net: DenoiserNet) -> dict:
    """Parameter names in each group, for checkpoint sidecars."""
    temporal = {id(p) for p in temporal_parameters(net)}
    groups = {"spatial": [], "temporal": []}
    for name, p in net.named_parameters():
        groups["temporal" if id(p) in temporal else "spatial"].append(name)
    return groups
