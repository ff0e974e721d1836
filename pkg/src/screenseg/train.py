"""Training loops, paired augmentation, patient-level folds and the fold ensemble."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .losses import LOSS_NAMES, classifier_bce, get_loss
from .models import (
    ClassifierSpec,
    FrameClassifier,
    SegNet,
    SegNetSpec,
    build_classifier,
    build_segmenter,
    classifier_input,
    save_checkpoint,
    segmenter_input,
)
from .sampling import LabelSampler, LabelStrategy, frame_consensus_positive, sample_vote

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _check_fields(cls, d):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    seg_initial_lr: float = 1e-3
    clf_initial_lr: float = 1e-4
    gamma: float = 0.99
    epochs: int = 40
    clf_epochs: int | None = None  # defaults to ``epochs``
    loss: str = "dice"
    label_strategy: str = "vote"
    bce_reduction: str = "mean"
    swap_wbce_weights: bool = False
    freeze_sampling: bool = False
    min_consensus_pixels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.clf_epochs is not None and self.clf_epochs < 1:
            raise ValueError(f"clf_epochs must be >= 1, got {self.clf_epochs}")
        if self.loss not in LOSS_NAMES:
            raise ValueError(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")
        if self.bce_reduction not in ("sum", "mean"):
            raise ValueError(f"bce_reduction must be 'sum' or 'mean', got {self.bce_reduction!r}")
        LabelStrategy.parse(self.label_strategy)

    @property
    def strategy(self) -> LabelStrategy:
        return LabelStrategy.parse(self.label_strategy)

    @classmethod
    def from_dict(cls, d):
        _check_fields(cls, d)
        return cls(**d)


@dataclass(frozen=True)
class AugmentationConfig:
    p: float = 0.3
    rotation_deg: float = 2.5
    max_translation: float = 0.05
    scale_range: tuple[float, float] = (0.95, 1.0)
    affine: bool = True
    flip: bool = True
    augment_as_bundle: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        if not 0 <= self.p <= 1:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.rotation_deg < 0 or self.max_translation < 0:
            raise ValueError("rotation_deg and max_translation must be >= 0")

    @classmethod
    def from_dict(cls, d):
        _check_fields(cls, d)
        return cls(**d)


@dataclass(frozen=True)
class AugmentParams:
    affine: bool
    flip: bool
    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)  # fraction of (height, width)
    scale: float = 1.0


def sample_augmentation(config: AugmentationConfig, rng: np.random.Generator) -> AugmentParams:
    # fixed number of draws per call keeps the stream aligned across configs
    u_affine, u_flip = rng.random(2)
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    shift = rng.uniform(-config.max_translation, config.max_translation, 2)
    scale = rng.uniform(*config.scale_range)
    if config.augment_as_bundle:
        fire_affine = fire_flip = u_affine < config.p
    else:
        fire_affine, fire_flip = u_affine < config.p, u_flip < config.p
    return AugmentParams(
        affine=bool(fire_affine and config.affine),
        flip=bool(fire_flip and config.flip),
        angle_deg=float(angle),
        shift=(float(shift[0]), float(shift[1])),
        scale=float(scale),
    )


def _affine(arr, params: AugmentParams, order: int, mode: str):
    h, w = arr.shape
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    t = np.array([params.shift[0] * h, params.shift[1] * w])
    th = np.deg2rad(params.angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    # output -> input coordinates of "scale and rotate about the centre, then shift"
    m = rot.T / params.scale
    offset = c - m @ (c + t)
    return ndimage.affine_transform(arr, m, offset=offset, order=order, mode=mode, cval=0.0)


def apply_augmentation(image, label, params: AugmentParams, soft: bool = False):
    image = np.asarray(image, dtype=np.float32)
    label = np.asarray(label)
    if image.shape != label.shape:
        raise ValueError(f"image shape {image.shape} != label shape {label.shape}")
    if params.affine:
        image = _affine(image, params, order=1, mode="nearest")
        if soft:
            label = np.clip(_affine(label.astype(np.float32), params, order=1, mode="constant"), 0, 1)
        else:
            label = _affine(label, params, order=0, mode="constant")
    if params.flip:
        image = image[:, ::-1]
        label = label[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def augment(image, label, config: AugmentationConfig, rng: np.random.Generator, soft: bool = False):
    """Randomly transform an image and its label with identical geometry."""
    return apply_augmentation(image, label, sample_augmentation(config, rng), soft=soft)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    folds: list[list[str]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def patients(self, i: int) -> tuple[list[str], list[str]]:
        """(train patients, val patients) for fold ``i``."""
        val = list(self.folds[i])
        train = [p for j, f in enumerate(self.folds) if j != i for p in f]
        return train, val

    def frames(self, i: int, frames):
        train_p, val_p = self.patients(i)
        train_p, val_p = set(train_p), set(val_p)
        train = [f for f in frames if f.patient_id in train_p]
        val = [f for f in frames if f.patient_id in val_p]
        return train, val


def kfold_split(patients, k: int = 3, seed: int = 0) -> FoldSplit:
    patients = list(dict.fromkeys(patients))
    if len(patients) < k:
        raise ValueError(f"need at least {k} patients for {k} folds, got {len(patients)}")
    order = np.random.default_rng([seed, 0xF01D]).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    return FoldSplit([list(chunk) for chunk in np.array_split(np.array(shuffled, dtype=object), k)])


# ---------------------------------------------------------------------------
# inference helpers


@torch.no_grad()
def predict_probabilities(model: SegNet, images, batch_size: int = 32) -> np.ndarray:
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 2
    if single:
        images = images[None]
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(segmenter_input(images[i : i + batch_size]))[:, 0].numpy())
    probs = np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.float32)
    return probs[0] if single else probs


@torch.no_grad()
def predict_logits(model: FrameClassifier, images, batch_size: int = 32) -> np.ndarray:
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 2
    if single:
        images = images[None]
    out = [model(classifier_input(images[i : i + batch_size], model.spec)).numpy() for i in range(0, len(images), batch_size)]
    logits = np.concatenate(out) if out else np.zeros(0, np.float32)
    return logits[0] if single else logits


def _mask_dice(pred, true) -> float:
    a, b = pred.astype(bool), true.astype(bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * (a & b).sum() / denom


# ---------------------------------------------------------------------------
# training


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss, what, epoch):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what}: non-finite loss {loss.item()} at epoch {epoch}")


def write_history(history: list[dict], path) -> None:
    if not history:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0]), lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def train_segmenter(
    train_frames,
    val_frames,
    config: TrainConfig,
    aug_config: AugmentationConfig | None = None,
    spec: SegNetSpec | None = None,
    out_dir=None,
    fold: int = 0,
):
    """Train one segmenter; returns ``(model at best val Dice, history)``.

    Training labels are redrawn every epoch from the rater masks according
    to ``config.label_strategy``. Validation Dice is the mean hard Dice
    against the majority-vote label over consensus-positive val frames.
    """
    aug_config = aug_config or AugmentationConfig()
    spec = spec or SegNetSpec()
    seed = config.seed * 1000 + fold
    model = build_segmenter(spec, seed=seed)
    torch.manual_seed(seed)
    loss_fn = get_loss(config.loss, config.bce_reduction, config.swap_wbce_weights)
    opt = torch.optim.Adam(model.parameters(), lr=config.seg_initial_lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.gamma)
    sampler = LabelSampler(config.strategy, [f.rater_masks for f in train_frames], seed, config.freeze_sampling)
    rng = np.random.default_rng([seed, 0xA06])

    images = np.stack([f.image for f in train_frames]).astype(np.float32)
    val_images = np.stack([f.image for f in val_frames]).astype(np.float32) if val_frames else None
    val_pos = [i for i, f in enumerate(val_frames) if frame_consensus_positive(f.rater_masks, config.min_consensus_pixels)]
    val_targets = [sample_vote(val_frames[i].rater_masks).values for i in val_pos]

    history, best_dice, best_state = [], -math.inf, None
    for epoch in range(config.epochs):
        lr = opt.param_groups[0]["lr"]
        labels = sampler.labels_for_epoch(epoch)
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(images), config.batch_size, rng):
            xs, ys = [], []
            for i in idx:
                x, y = augment(images[i], labels[i].values, aug_config, rng, soft=not labels[i].hard)
                xs.append(x)
                ys.append(y.astype(np.float32))
            pred = model(segmenter_input(np.stack(xs)))[:, 0]
            loss = loss_fn(pred, torch.from_numpy(np.stack(ys)))
            _check_finite(loss, f"segmenter fold {fold}", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()

        val_dice = float("nan")
        if val_pos:
            probs = predict_probabilities(model, val_images[val_pos], config.batch_size)
            val_dice = float(np.mean([_mask_dice(p >= 0.5, t) for p, t in zip(probs, val_targets)]))
        history.append({"epoch": epoch, "lr": lr, "train_loss": total / count, "val_dice": val_dice})
        log.info("seg fold %d epoch %d loss %.4f val_dice %.4f", fold, epoch, total / count, val_dice)
        score = val_dice if not math.isnan(val_dice) else -total / count
        if score > best_dice:
            best_dice, best_state = score, copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        _save_run(model, history, out_dir, seed, {"fold": fold, "best_val_dice": best_dice, "train_config": asdict(config)})
    return model, history


def train_classifier(
    train_frames,
    val_frames,
    config: TrainConfig,
    spec: ClassifierSpec | None = None,
    aug_config: AugmentationConfig | None = None,
    out_dir=None,
    fold: int = 0,
    pretrained_path=None,
):
    """Train the frame classifier on consensus positivity; returns ``(model, history)``.

    The returned model is the epoch with the best validation accuracy
    (logit > 0 counts as positive).
    """
    aug_config = aug_config or AugmentationConfig()
    spec = spec or ClassifierSpec()
    seed = config.seed * 1000 + 500 + fold
    model = build_classifier(spec, seed=seed, pretrained_path=pretrained_path)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.clf_initial_lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.gamma)
    rng = np.random.default_rng([seed, 0xC1F])

    images = np.stack([f.image for f in train_frames]).astype(np.float32)
    targets = np.array([frame_consensus_positive(f.rater_masks, config.min_consensus_pixels) for f in train_frames], np.float32)
    val_images = np.stack([f.image for f in val_frames]).astype(np.float32) if val_frames else None
    val_targets = np.array([frame_consensus_positive(f.rater_masks, config.min_consensus_pixels) for f in val_frames], bool)

    epochs = config.clf_epochs or config.epochs
    history, best_acc, best_state = [], -math.inf, None
    for epoch in range(epochs):
        lr = opt.param_groups[0]["lr"]
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(images), config.batch_size, rng):
            xs = [augment(images[i], images[i], aug_config, rng)[0] for i in idx]
            logits = model(classifier_input(np.stack(xs), spec))
            loss = classifier_bce(logits, torch.from_numpy(targets[idx]))
            _check_finite(loss, f"classifier fold {fold}", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()

        val_acc = float("nan")
        if val_images is not None:
            val_acc = float(np.mean((predict_logits(model, val_images, config.batch_size) > 0) == val_targets))
        history.append({"epoch": epoch, "lr": lr, "train_loss": total / count, "val_acc": val_acc})
        log.info("clf fold %d epoch %d loss %.4f val_acc %.4f", fold, epoch, total / count, val_acc)
        score = val_acc if not math.isnan(val_acc) else -total / count
        if score > best_acc:
            best_acc, best_state = score, copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        _save_run(model, history, out_dir, seed, {"fold": fold, "best_val_acc": best_acc, "train_config": asdict(config)})
    return model, history


def _save_run(model, history, out_dir, seed, extra):
    out_dir = Path(out_dir)
    save_checkpoint(model, out_dir, seed, extra)
    write_history(history, out_dir / "history.csv")


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class EnsembleModel:
    members: list[SegNet] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        specs = {m.spec for m in self.members}
        if len(specs) != 1:
            raise ValueError(f"ensemble members disagree on spec: {specs}")

    @property
    def spec(self) -> SegNetSpec:
        return self.members[0].spec


def ensemble_probabilities(ensemble: EnsembleModel, images, batch_size: int = 32) -> np.ndarray:
    maps = [predict_probabilities(m, images, batch_size) for m in ensemble.members]
    # float64 so averaging identical members reproduces them exactly
    return np.mean(np.stack(maps), axis=0, dtype=np.float64)


def ensemble_predict(ensemble: EnsembleModel, frame, batch_size: int = 32):
    """Mean member probability map and its ``>= 0.5`` mask.

    ``frame`` may be one (H, W) image or an (N, H, W) batch.
    """
    prob = ensemble_probabilities(ensemble, frame, batch_size)
    return prob, (prob >= 0.5).astype(np.uint8)


def save_run_config(path, **sections) -> None:
    with open(path, "w") as f:
        json.dump({k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in sections.items()}, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
