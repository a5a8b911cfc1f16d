"""
Masks through a frozen autoencoder
==================================

A binary mask, copied to three channels, is encoded like any RGB frame.
Decoding the latent and thresholding the channel mean at 0.5 recovers it.
This round trip is what lets a latent video model emit masks.
"""

import sys
from pathlib import Path

import numpy as np

from remseg import AETrainConfig, SynthSpec, load_sample, synth_dataset, train_toy_autoencoder
from remseg.codec import encode_mask, latents_to_mask, psnr, reconstruct, save_autoencoder
from remseg.metrics import region_similarity

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "02"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1500

train = synth_dataset(SynthSpec(n_clips=16, objects_per_clip=2), out / "train", seed=1)
held = synth_dataset(SynthSpec(n_clips=4, objects_per_clip=2, refer_all=True, prefix="held"), out / "held", seed=2)

# About a minute per 500 steps on one CPU core
ae = train_toy_autoencoder(train, AETrainConfig(steps=steps))
save_autoencoder(ae, out / "autoencoder.bin")

js, ps = [], []
for cid in held.ids():
    s = load_sample(held, cid)
    z = encode_mask(ae, s.gt)  # (F, 4, 16, 16) for 64x64 frames
    back = latents_to_mask(ae, z)
    js += [region_similarity(a, b) for a, b in zip(back.masks, s.gt.masks)]
    ps.append(psnr(reconstruct(ae, s.clip), s.clip.frames))
print(f"latent shape {tuple(z.shape)}")
print(f"held-out mask round trip: mean J {np.mean(js):.4f}, min {np.min(js):.4f}")
print(f"held-out frame reconstruction: PSNR {np.mean(ps):.2f} dB")
