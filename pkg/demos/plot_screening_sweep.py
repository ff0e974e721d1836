"""
Pre-screening threshold sweep
=============================

Put a frame classifier in front of the segmenter ensemble and sweep the
logit threshold from 0 to 5. The classifier logits here are synthetic
(an honest classifier plus noise) so the script runs in seconds; see the
CLI ``sweep`` command for the trained version.
"""

import numpy as np
import torch

from screenseg.models import SegNetSpec, build_segmenter
from screenseg.screen_eval import ModelOutputs, evaluate, pipeline_decisions, segmentation_only, welch_t_test
from screenseg.sampling import frame_consensus_positive
from screenseg.synthdata import PhantomConfig, generate_frames
from screenseg.train import EnsembleModel

frames = generate_frames(PhantomConfig(image_height=64, image_width=64, gland_axis_range=(10, 20), n_patients=4, frames_per_patient=20, seed=2))
ens = EnsembleModel([build_segmenter(SegNetSpec(depth=3, base_channels=4), s).eval() for s in range(3)])
out = ModelOutputs.compute(None, ens, frames)

# stand-in classifier: positives centred at +4, negatives at -2
rng = np.random.default_rng(0)
truth = np.array([frame_consensus_positive(f.rater_masks) for f in frames])
out.logits = np.where(truth, 4.0, -2.0) + rng.normal(0, 1.5, len(frames))

# untrained segmenters call almost everything positive, which is exactly
# where screening earns its keep
wo = evaluate(frames, *segmentation_only(out))
print(f"seg only: FP {wo.confusion.fp}  FN {wo.confusion.fn}  FP area {wo.fp_area:.3f}")
for t in range(6):
    w = evaluate(frames, *pipeline_decisions(out, float(t)))
    c = w.confusion
    print(f"t={t}: FP {c.fp:3d}  FN {c.fn:3d}  FPR {c.fpr:.3f}  FNR {c.fnr:.3f}  FP area {w.fp_area:.3f}")

print("Welch example:", welch_t_test([0.1, 0.2, 0.3], [0.4, 0.5, 0.6]))
