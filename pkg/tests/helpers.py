"""Small builders shared by several test modules."""

import torch

from remseg.denoiser import DenoiserConfig, DenoiserNet, TemporalAttention

TINY = dict(base_channels=2, channel_mult=(1, 2), attention_levels=(1,), d_text=8, time_dim=8, num_heads=1)


def tiny_net(seed=0, dtype=torch.float64, randomize_zero_init=True, **overrides):
    """~3k-parameter denoiser. Zero-initialised layers get random weights so every gradient is live."""
    torch.manual_seed(seed)
    net = DenoiserNet(DenoiserConfig(**{**TINY, **overrides})).to(dtype)
    if randomize_zero_init:
        with torch.no_grad():
            for p in net.conv_out.parameters():
                p.normal_(0, 0.3)
            for m in net.modules():
                if isinstance(m, TemporalAttention):
                    for p in m.attn.to_out.parameters():
                        p.normal_(0, 0.3)
    return net
