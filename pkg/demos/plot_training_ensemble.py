"""
Fold training and the test-time ensemble
========================================

Train a small segmenter per fold for a few epochs and average the fold
models on a held-out frame. A few minutes on one core.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from screenseg.models import SegNetSpec
from screenseg.synthdata import PhantomConfig, generate_frames
from screenseg.train import AugmentationConfig, EnsembleModel, TrainConfig, ensemble_predict, kfold_split, train_segmenter
from screenseg.screen_eval import dice_coefficient

torch.set_num_threads(1)
frames = generate_frames(PhantomConfig(image_height=64, image_width=64, gland_axis_range=(10, 20), n_patients=6, frames_per_patient=20, seed=4))
pool = [f for f in frames if f.split == "train"]
test = [f for f in frames if f.split == "test"]

folds = kfold_split(sorted({f.patient_id for f in pool}), 3, seed=0)
cfg = TrainConfig(epochs=20)
members = []
for k in range(3):
    tr, va = folds.frames(k, pool)
    model, hist = train_segmenter(tr, va, cfg, AugmentationConfig(), SegNetSpec(), fold=k)
    print(f"fold {k}: val Dice by epoch", " ".join(f"{h['val_dice']:.2f}" for h in hist))
    members.append(model)

ens = EnsembleModel(members)
frame = next(f for f in test if f.true_mask.any())
prob, mask = ensemble_predict(ens, frame.image)
print(f"{frame.frame_id}: ensemble Dice vs truth {dice_coefficient(mask, frame.true_mask):.3f}")

fig, ax = plt.subplots(1, 2, figsize=(8, 4))
ax[0].imshow(frame.image, cmap="gray")
ax[0].contour(frame.true_mask, levels=[0.5], colors="g")
ax[0].contour(mask, levels=[0.5], colors="r")
ax[1].imshow(prob, vmin=0, vmax=1)
ax[1].set_title("mean probability")
fig.savefig("ensemble.png", dpi=100)
