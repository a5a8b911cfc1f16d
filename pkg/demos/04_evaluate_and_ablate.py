"""
Dataset evaluation and the decoder ablation
===========================================

Scores are averaged per frame, then per expression, then per sample.
The ablation swaps the frozen autoencoder decoder for a small learned CNN head
on the last decoder-level features. Both are trained with the same step budget
and scored on colour/shape combinations never seen in training.
"""

import itertools
import sys
from pathlib import Path

import torch

from remseg import (
    AETrainConfig,
    DenoiserConfig,
    DenoiserNet,
    Segmenter,
    SynthSpec,
    TrainConfig,
    evaluate_dataset,
    synth_dataset,
    train_stage1,
    train_stage2,
    train_toy_autoencoder,
)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "04"
steps = (100, 500)

held = [("red", "triangle"), ("green", "square"), ("blue", "circle")]
seen = [c for c in itertools.product(("red", "green", "blue"), ("square", "circle", "triangle")) if c not in held]
kw = dict(objects_per_clip=2, refer_all=True)
video = synth_dataset(SynthSpec(n_clips=12, combos=seen, **kw), out / "video", seed=31)
image = synth_dataset(SynthSpec(n_clips=8, num_frames=1, modality="image", combos=seen, prefix="img", **kw),
                      out / "image", seed=32)
test = synth_dataset(SynthSpec(n_clips=4, combos=held, prefix="test", split="test", **kw), out / "test", seed=33)
ae = train_toy_autoencoder(video, AETrainConfig(steps=1500))

for decoder in ("vae", "cnn"):
    torch.manual_seed(0)
    net = DenoiserNet(DenoiserConfig(cnn_head=decoder == "cnn"))
    train_stage1(net, ae, image, TrainConfig(stage="stage1", epochs=10**6, max_steps=steps[0], decoder=decoder))
    train_stage2(net, ae, video, image, TrainConfig(stage="stage2", epochs=10**6, max_steps=steps[1], decoder=decoder))
    report = evaluate_dataset(Segmenter(net, ae, decoder=decoder), test, "held-out combos", out_dir=out / decoder)
    print(decoder, report.summary())
    for row in report.per_concept:
        print(f"    {row['concept']:>14}: J {row['J']:.3f} over {row['n']} samples")
# Full per-sample records are in <out>/04/<decoder>/report.json and report.csv.
# At this budget a single seed is close to a tie; seed-to-seed spread is larger
# than the gap, which is why the acceptance test averages three seeds.
