"""
Turning three raters into one training target
=============================================

The four label sampling strategies on a single frame. ``combine:f``
mixes vote and random labels across a batch of frames.
"""

import numpy as np

from screenseg.sampling import LabelSampler, LabelStrategy, sample_labels
from screenseg.synthdata import PhantomConfig, generate_frames

frames = generate_frames(PhantomConfig(image_height=64, image_width=64, gland_axis_range=(10, 20), n_patients=1, frames_per_patient=8, seed=1))
masks = [f.rater_masks for f in frames]
rng = np.random.default_rng(0)

one = [masks[0]]
for name in ("vote", "random", "mean"):
    lab = sample_labels(LabelStrategy.parse(name), one, rng)[0]
    print(f"{name:>7}: {lab.values.dtype}, foreground sum {lab.values.sum():.1f}, source {lab.source}")

# mixing: 75% of frames get the vote label
labels = sample_labels(LabelStrategy.parse("combine:0.75"), masks, rng)
print("combine:0.75 sources:", [l.source for l in labels])

# the sampler redraws every epoch unless frozen
sampler = LabelSampler(LabelStrategy.parse("random"), masks, seed=0)
for epoch in range(3):
    print(f"epoch {epoch}:", [l.source for l in sampler.labels_for_epoch(epoch)])
