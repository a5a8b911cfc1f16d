"""
Two-stage fine-tuning and t = 0 segmentation
============================================

Stage 1 trains only the spatial weights on pseudo-videos built from stills.
Stage 2 trains every weight on a 1:1 mix of video and pseudo-video samples.
Inference encodes the frames, runs the network once at t = 0 and decodes the
predicted mask latents.
"""

import sys
from pathlib import Path

import numpy as np
import torch

from remseg import (
    AETrainConfig,
    DenoiserConfig,
    DenoiserNet,
    Segmenter,
    SynthSpec,
    TrainConfig,
    load_sample,
    synth_dataset,
    train_stage1,
    train_stage2,
    train_toy_autoencoder,
)
from remseg.inference import render_overlay
from remseg.metrics import region_similarity

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "03"
torch.manual_seed(0)

combos = [("red", "square"), ("blue", "circle")]
video = synth_dataset(SynthSpec(n_clips=12, objects_per_clip=2, combos=combos, refer_all=True), out / "video", seed=21)
image = synth_dataset(SynthSpec(n_clips=8, num_frames=1, modality="image", objects_per_clip=2, combos=combos,
                                refer_all=True, prefix="img"), out / "image", seed=22)
test = synth_dataset(SynthSpec(n_clips=2, objects_per_clip=2, combos=combos, refer_all=True, prefix="test"),
                     out / "test", seed=23)

ae = train_toy_autoencoder([video, image], AETrainConfig(steps=1500))
net = DenoiserNet(DenoiserConfig())
print(f"denoiser parameters: {sum(p.numel() for p in net.parameters()):,}")

s1 = train_stage1(net, ae, image, TrainConfig(stage="stage1", epochs=10**6, max_steps=150))
print(f"stage 1: loss {np.mean(s1.losses[:10]):.4f} -> {np.mean(s1.losses[-10:]):.4f}")
s2 = train_stage2(net, ae, video, image, TrainConfig(stage="stage2", epochs=10**6, max_steps=600))
print(f"stage 2: loss {np.mean(s2.losses[:10]):.4f} -> {np.mean(s2.losses[-10:]):.4f}")

# Same frames, two expressions: the expression picks the object
seg = Segmenter(net, ae)
sample = load_sample(test, test.ids()[0])
for i, expr in enumerate(["the red square", "the blue circle"]):
    masks = seg(sample.clip, expr)
    truth = load_sample(test, f"{sample.clip_id.rsplit('_o', 1)[0]}_o{0 if expr[4:] == sample.concept else 1}")
    j = np.mean([region_similarity(a, b) for a, b in zip(masks.masks, truth.gt.masks)])
    render_overlay(sample.clip, masks, out / "overlays" / str(i))
    print(f"{expr!r}: J {j:.3f}")
