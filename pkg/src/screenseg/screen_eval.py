"""Pre-screening pipeline and the evaluation protocol.

A frame reaches the segmenter only if the classifier logit is strictly
greater than the threshold. A frame is predicted positive when it passes
screening *and* its binarized ensemble mask is non-empty. Dice is reported
only over frames that are truly positive and predicted positive, so
correctly rejected frames never score 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .sampling import frame_consensus_positive, sample_vote
from .train import EnsembleModel, ensemble_predict, ensemble_probabilities, predict_logits

DEFAULT_THRESHOLDS = (0, 1, 2, 3, 4, 5)
GROUND_TRUTH_RULES = ("consensus", "phantom_truth")


@dataclass(frozen=True)
class ScreeningDecision:
    logit: float
    threshold: float
    passed: bool

    @property
    def out_of_range(self) -> bool:
        return not 0.0 <= self.threshold <= 5.0


def screen_logit(logit: float, threshold: float) -> ScreeningDecision:
    return ScreeningDecision(float(logit), float(threshold), bool(logit > threshold))


def screen_frame(classifier, frame, threshold: float) -> ScreeningDecision:
    return screen_logit(float(predict_logits(classifier, frame)), threshold)


@dataclass(frozen=True)
class FrameDecision:
    frame_id: str
    predicted_positive: bool
    true_positive: bool
    source: str  # classifier | segmenter | pipeline


def mask_is_positive(mask, min_area_pixels: int = 0) -> bool:
    return int(np.count_nonzero(mask)) > min_area_pixels


def pipeline_from_outputs(logit: float, mask, threshold: float, min_area_pixels: int = 0):
    """Combine precomputed classifier and segmenter outputs for one frame."""
    decision = screen_logit(logit, threshold)
    if not decision.passed:
        return False, np.zeros_like(mask)
    return mask_is_positive(mask, min_area_pixels), mask


def pipeline_predict(classifier, ensemble: EnsembleModel, frame, threshold: float, min_area_pixels: int = 0):
    """Screen ``frame``; segment it only if it passes. Returns ``(positive, mask)``."""
    image = np.asarray(frame.image if hasattr(frame, "image") else frame, dtype=np.float32)
    decision = screen_frame(classifier, image, threshold)
    if not decision.passed:
        return False, np.zeros(image.shape, dtype=np.uint8)
    _, mask = ensemble_predict(ensemble, image)
    return mask_is_positive(mask, min_area_pixels), mask


# ---------------------------------------------------------------------------
# metrics


def dice_coefficient(pred_mask, true_mask) -> float:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def fpr(self) -> float:
        d = self.fp + self.tn
        return self.fp / d if d else 0.0

    @property
    def fnr(self) -> float:
        d = self.fn + self.tp
        return self.fn / d if d else 0.0

    @property
    def fpr_undefined(self) -> bool:
        return self.fp + self.tn == 0

    @property
    def fnr_undefined(self) -> bool:
        return self.fn + self.tp == 0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0


@dataclass
class EvalReport:
    frame_ids: list[str]
    dice: list[float]  # one per included frame
    included_ids: list[str]
    confusion: ConfusionCounts
    fp_area: float
    threshold: float | None = None
    strategy: str = ""
    loss: str = ""
    source: str = "pipeline"
    p_values: dict = field(default_factory=dict)
    predicted_positive: list[bool] = field(default_factory=list)
    true_positive: list[bool] = field(default_factory=list)
    frame_dice: list[float | None] = field(default_factory=list)
    frame_area: list[float] = field(default_factory=list)

    @property
    def empty_inclusion(self) -> bool:
        return not self.dice

    @property
    def mean_dice(self) -> float | None:
        return float(np.mean(self.dice)) if self.dice else None

    @property
    def std_dice(self) -> float | None:
        return float(np.std(self.dice, ddof=1)) if len(self.dice) > 1 else None

    @property
    def median_dice(self) -> float | None:
        return float(np.median(self.dice)) if self.dice else None

    def summary(self) -> dict:
        c = self.confusion
        return {
            "strategy": self.strategy,
            "loss": self.loss,
            "source": self.source,
            "threshold": self.threshold,
            "n_frames": c.total,
            "n_included": len(self.dice),
            "mean_dice": self.mean_dice,
            "std_dice": self.std_dice,
            "median_dice": self.median_dice,
            "tp": c.tp,
            "fp": c.fp,
            "tn": c.tn,
            "fn": c.fn,
            "fpr": c.fpr,
            "fnr": c.fnr,
            "fpr_undefined": c.fpr_undefined,
            "fnr_undefined": c.fnr_undefined,
            "fp_area": self.fp_area,
            "empty_inclusion": self.empty_inclusion,
            **{f"p_{k}": v for k, v in self.p_values.items()},
        }


def ground_truth_masks(frames, rule: str = "consensus"):
    """Per-frame reference masks under the chosen ground-truth rule."""
    if rule == "consensus":
        return [sample_vote(f.rater_masks).values for f in frames]
    if rule == "phantom_truth":
        out = []
        for f in frames:
            if f.true_mask is None:
                raise ValueError(f"frame {f.frame_id} has no phantom truth mask")
            out.append(np.asarray(f.true_mask, dtype=np.uint8))
        return out
    raise ValueError(f"ground_truth_rule must be one of {GROUND_TRUTH_RULES}, got {rule!r}")


def evaluate(frames, decisions, masks, ground_truth_rule: str = "consensus", min_consensus_pixels: int = 1, **meta) -> EvalReport:
    """Score one set of frame predictions.

    ``decisions`` holds predicted positivity per frame (bools or
    FrameDecision), ``masks`` the predicted binary masks. Under the
    consensus rule a frame is truly positive when its majority-vote mask
    has at least ``min_consensus_pixels`` pixels.
    """
    frames = list(frames)
    if not (len(frames) == len(decisions) == len(masks)):
        raise ValueError(f"need one decision and mask per frame: {len(frames)} frames, {len(decisions)} decisions, {len(masks)} masks")
    truths = ground_truth_masks(frames, ground_truth_rule)
    pred_pos = [bool(d.predicted_positive if isinstance(d, FrameDecision) else d) for d in decisions]
    if ground_truth_rule == "consensus":
        true_pos = [frame_consensus_positive(f.rater_masks, min_consensus_pixels) for f in frames]
    else:
        true_pos = [int(t.sum()) >= min_consensus_pixels for t in truths]

    conf = ConfusionCounts()
    dice, included, frame_dice, frame_area, fp_areas = [], [], [], [], []
    for f, t, m, pp, tp in zip(frames, truths, masks, pred_pos, true_pos):
        m = np.asarray(m)
        area = float(np.count_nonzero(m)) / m.size if pp else 0.0
        frame_area.append(area)
        if tp and pp:
            conf.tp += 1
            d = dice_coefficient(m, t)
            dice.append(d)
            included.append(f.frame_id)
            frame_dice.append(d)
            continue
        frame_dice.append(None)
        if tp:
            conf.fn += 1
        elif pp:
            conf.fp += 1
            fp_areas.append(area)
        else:
            conf.tn += 1
    return EvalReport(
        frame_ids=[f.frame_id for f in frames],
        dice=dice,
        included_ids=included,
        confusion=conf,
        fp_area=float(np.mean(fp_areas)) if fp_areas else 0.0,
        predicted_positive=pred_pos,
        true_positive=true_pos,
        frame_dice=frame_dice,
        frame_area=frame_area,
        **meta,
    )


def welch_t_test(sample_a, sample_b) -> tuple[float, float]:
    """Two-sided unpaired t-test without assuming equal variances."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"each sample needs >= 2 values, got {len(a)} and {len(b)}")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0:
        raise ValueError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = 2 * stats.t.sf(abs(t), df)
    return float(t), float(min(p, 1.0))


# ---------------------------------------------------------------------------
# batch evaluation


@dataclass
class ModelOutputs:
    """Cached classifier logits and ensemble masks for a frame set."""

    frames: list
    logits: np.ndarray
    masks: np.ndarray

    @classmethod
    def compute(cls, classifier, ensemble: EnsembleModel, frames, batch_size: int = 32):
        frames = list(frames)
        images = np.stack([f.image for f in frames]).astype(np.float32)
        logits = predict_logits(classifier, images, batch_size) if classifier is not None else np.full(len(frames), np.inf)
        probs = ensemble_probabilities(ensemble, images, batch_size)
        return cls(frames, np.asarray(logits, dtype=np.float64), (probs >= 0.5).astype(np.uint8))


def pipeline_decisions(outputs: ModelOutputs, threshold: float, min_area_pixels: int = 0):
    """(predicted positive, masks) for every frame at one threshold; -inf disables screening."""
    pos, masks = [], []
    for logit, mask in zip(outputs.logits, outputs.masks):
        p, m = pipeline_from_outputs(logit, mask, threshold, min_area_pixels)
        pos.append(p)
        masks.append(m)
    return pos, masks


def segmentation_only(outputs: ModelOutputs, min_area_pixels: int = 0):
    return [mask_is_positive(m, min_area_pixels) for m in outputs.masks], list(outputs.masks)


def classifier_decisions(outputs: ModelOutputs, threshold: float):
    return [bool(l > threshold) for l in outputs.logits]


@dataclass
class SweepResult:
    reports: dict  # threshold -> EvalReport (pipeline)
    baseline: EvalReport  # segmentation only
    strategy: str = ""
    loss: str = ""

    def rows(self) -> list[dict]:
        """Long-format rows: strategy, loss, threshold, metric, value."""
        out = []
        items = [(t, r) for t, r in sorted(self.reports.items())] + [("seg_only", self.baseline)]
        for t, r in items:
            s = r.summary()
            for metric in ("mean_dice", "std_dice", "median_dice", "fpr", "fnr", "fp_area", "tp", "fp", "tn", "fn", "n_included"):
                out.append({"strategy": self.strategy, "loss": self.loss, "threshold": t, "metric": metric, "value": s[metric]})
        return out

    def table(self) -> list[dict]:
        """One row per threshold (plus the segmentation-only row) with FPR, FNR and FP area."""
        out = []
        for t, r in sorted(self.reports.items()):
            out.append({"threshold": t, "fpr": r.confusion.fpr, "fnr": r.confusion.fnr, "fp_area": r.fp_area, "mean_dice": r.mean_dice})
        b = self.baseline
        out.append({"threshold": "seg_only", "fpr": b.confusion.fpr, "fnr": b.confusion.fnr, "fp_area": b.fp_area, "mean_dice": b.mean_dice})
        return out


def check_monotone(reports: dict) -> None:
    """Assert pass-set inclusion across thresholds (FP non-increasing, FN non-decreasing)."""
    ts = sorted(reports)
    for lo, hi in zip(ts, ts[1:]):
        a, b = reports[lo], reports[hi]
        pos_lo = {i for i, p in zip(a.frame_ids, a.predicted_positive) if p}
        pos_hi = {i for i, p in zip(b.frame_ids, b.predicted_positive) if p}
        if not pos_hi <= pos_lo:
            raise AssertionError(f"positives at threshold {hi} are not a subset of those at {lo}")
        if b.confusion.fp > a.confusion.fp or b.confusion.fn < a.confusion.fn:
            raise AssertionError(f"FP/FN not monotone between thresholds {lo} and {hi}")


def threshold_sweep(
    classifier,
    ensemble: EnsembleModel,
    frames,
    thresholds=DEFAULT_THRESHOLDS,
    ground_truth_rule: str = "consensus",
    min_area_pixels: int = 0,
    min_consensus_pixels: int = 1,
    outputs: ModelOutputs | None = None,
    strategy: str = "",
    loss: str = "",
) -> SweepResult:
    outputs = outputs or ModelOutputs.compute(classifier, ensemble, frames)
    meta = dict(strategy=strategy, loss=loss)
    reports = {}
    for t in thresholds:
        pos, masks = pipeline_decisions(outputs, t, min_area_pixels)
        reports[t] = evaluate(outputs.frames, pos, masks, ground_truth_rule, min_consensus_pixels, threshold=t, source="pipeline", **meta)
    pos, masks = segmentation_only(outputs, min_area_pixels)
    baseline = evaluate(outputs.frames, pos, masks, ground_truth_rule, min_consensus_pixels, source="segmenter", **meta)
    check_monotone(reports)
    return SweepResult(reports, baseline, strategy, loss)


def compare_with_without(with_screen: EvalReport, without: EvalReport) -> float | None:
    """Welch p-value between the Dice lists, or None when undefined."""
    try:
        return welch_t_test(with_screen.dice, without.dice)[1]
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# report files


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_frame_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame_id", "true_positive", "predicted_positive", "dice", "predicted_area"])
        for row in zip(report.frame_ids, report.true_positive, report.predicted_positive, report.frame_dice, report.frame_area):
            w.writerow([_fmt(v) for v in row])


def write_summary_csv(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in keys})


def write_json(obj, path) -> None:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))

    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n")
