"""
Synthetic ultrasound-like phantom
=================================

Generate a small phantom dataset, look at one positive and one negative
frame, and compare the three simulated rater outlines with the truth.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from screenseg.synthdata import PhantomConfig, generate_frames
from screenseg.screen_eval import dice_coefficient

cfg = PhantomConfig(image_height=128, image_width=128, n_patients=2, frames_per_patient=10, seed=3)
frames = generate_frames(cfg)
print(f"{len(frames)} frames, patients {sorted({f.patient_id for f in frames})}")

pos = next(f for f in frames if f.true_mask.any())
neg = next(f for f in frames if not f.true_mask.any())

# how far does each rater drift from the truth?
for k, m in enumerate(pos.rater_masks, 1):
    print(f"rater {k}: Dice vs truth {dice_coefficient(m, pos.true_mask):.3f}")

fig, ax = plt.subplots(1, 2, figsize=(8, 4))
ax[0].imshow(pos.image, cmap="gray")
for m, c in zip(pos.rater_masks, ("r", "g", "b")):
    ax[0].contour(m, levels=[0.5], colors=c, linewidths=0.8)
ax[0].set_title(f"{pos.frame_id} (3 raters)")
ax[1].imshow(neg.image, cmap="gray")
ax[1].set_title(f"{neg.frame_id} (negative)")
for a in ax:
    a.axis("off")
fig.savefig("phantom.png", dpi=100)
print("wrote phantom.png")
