"""
Synthetic referral clips
========================

Moving coloured shapes on noisy backgrounds, each clip paired with referral
expressions and per-frame masks. Also shows how a single still image becomes
a short pseudo-video for joint image/video training.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from remseg import AugParams, SynthSpec, image_to_pseudo_video, load_sample, synth_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "01"

# Two objects per clip, one referral sample per object.
spec = SynthSpec(n_clips=4, objects_per_clip=2, refer_all=True)
manifest = synth_dataset(spec, out / "video", seed=0)
print(f"{len(manifest)} samples written to {out / 'video'}")

sample = load_sample(manifest, manifest.ids()[0])
print("clip", sample.clip_id, "frames", sample.clip.frames.shape, "concept", sample.concept)
for expr in sample.expressions:
    print("  expression:", expr)

# A strip of frames on top, their masks below
frames = np.concatenate(list(sample.clip.frames), axis=1)
masks = np.concatenate(list(sample.gt.masks), axis=1)
sheet = np.concatenate([frames, np.repeat(masks[..., None], 3, axis=-1).astype(np.float32)], axis=0)
Image.fromarray(np.round(sheet * 255).astype(np.uint8)).save(out / "clip_sheet.png")

# An image sample expands into 8 frames of gentle, cumulative jitter.
# Frame 0 is the untouched image.
image = synth_dataset(SynthSpec(n_clips=1, num_frames=1, modality="image", prefix="img"), out / "image", seed=1)
still = load_sample(image, image.ids()[0])
pv = image_to_pseudo_video(still.clip.frames[0], still.gt.masks[0], 8, AugParams(), seed=3,
                           expressions=still.expressions)
assert np.array_equal(pv.clip.frames[0], still.clip.frames[0])
print("pseudo-video", pv.clip.frames.shape, "foreground pixels per frame", pv.gt.masks.sum(axis=(1, 2)))
Image.fromarray(np.round(np.concatenate(list(pv.clip.frames), axis=1) * 255).astype(np.uint8)).save(
    out / "pseudo_video.png")
