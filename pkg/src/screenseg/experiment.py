"""Fold training, checkpoint loading, and the with/without screening comparison.

Checkpoint layout under a root directory::

    seg/<strategy>__<loss>/fold<k>/{params.pt, model.json, history.csv}
    clf/{params.pt, model.json, history.csv}
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch

from .config import RunConfig, cell_name
from .models import load_checkpoint
from .screen_eval import ModelOutputs, compare_with_without, evaluate, pipeline_decisions, segmentation_only, threshold_sweep
from .synthdata import load_dataset
from .train import EnsembleModel, kfold_split, train_classifier, train_segmenter

log = logging.getLogger(__name__)


def set_deterministic(on: bool = True) -> None:
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def split_frames(frames):
    pool = [f for f in frames if f.split in ("train", "val")]
    test = [f for f in frames if f.split == "test"]
    return pool, test


def make_folds(cfg: RunConfig, pool):
    return kfold_split(sorted({f.patient_id for f in pool}), cfg.folds, cfg.seed)


def seg_dir(root, strategy, loss, fold=None) -> Path:
    d = Path(root) / "seg" / cell_name(strategy, loss)
    return d if fold is None else d / f"fold{fold}"


def clf_dir(root) -> Path:
    return Path(root) / "clf"


def _train_seg_fold(args):
    cfg_dict, frames, strategy, loss, fold, root, deterministic = args
    set_deterministic(deterministic)
    cfg = RunConfig.from_dict(cfg_dict)
    pool, _ = split_frames(frames)
    folds = make_folds(cfg, pool)
    tr, va = folds.frames(fold, pool)
    tcfg = replace(cfg.train, label_strategy=strategy, loss=loss)
    _, history = train_segmenter(tr, va, tcfg, cfg.augment, cfg.segmenter, seg_dir(root, strategy, loss, fold), fold)
    return history


def train_segmenters(cfg: RunConfig, frames, root, jobs: int = 1, deterministic: bool = True):
    """Train ``cfg.folds`` segmenters for every (strategy, loss) cell."""
    tasks = [
        (cfg.to_dict(), frames, s, l, k, str(root), deterministic)
        for s, l in cfg.cells()
        for k in range(cfg.folds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            histories = list(ex.map(_train_seg_fold, tasks))
    else:
        histories = [_train_seg_fold(t) for t in tasks]
    return {(t[2], t[3], t[4]): h for t, h in zip(tasks, histories)}


def train_frame_classifier(cfg: RunConfig, frames, root, fold: int = 0):
    """Train the classifier on one fold's train/val patients."""
    pool, _ = split_frames(frames)
    tr, va = make_folds(cfg, pool).frames(fold, pool)
    return train_classifier(tr, va, cfg.train, cfg.classifier, cfg.augment, clf_dir(root), fold, cfg.pretrained_path)


def load_ensemble(root, strategy, loss) -> EnsembleModel:
    d = seg_dir(root, strategy, loss)
    fold_dirs = sorted(d.glob("fold*"))
    if not fold_dirs:
        raise FileNotFoundError(f"no segmenter checkpoints under {d}")
    return EnsembleModel([load_checkpoint(p)[0] for p in fold_dirs])


def load_classifier(root):
    return load_checkpoint(clf_dir(root))[0]


def load_frames(cfg: RunConfig):
    return load_dataset(Path(cfg.data_dir) / "manifest.csv")


def evaluate_cells(cfg: RunConfig, frames, root):
    """Evaluate every (strategy, loss, threshold) cell on the test split.

    Returns ``(summary rows, {(strategy, loss, threshold): (with, without)})``.
    """
    _, test = split_frames(frames)
    classifier = load_classifier(root)
    rows, reports = [], {}
    for s, l in cfg.cells():
        ensemble = load_ensemble(root, s, l)
        outputs = ModelOutputs.compute(classifier, ensemble, test)
        pos, masks = segmentation_only(outputs, cfg.min_area_pixels)
        without = evaluate(test, pos, masks, cfg.ground_truth_rule, cfg.train.min_consensus_pixels, strategy=s, loss=l, source="segmenter")
        for t in cfg.thresholds:
            pos, masks = pipeline_decisions(outputs, t, cfg.min_area_pixels)
            with_ = evaluate(test, pos, masks, cfg.ground_truth_rule, cfg.train.min_consensus_pixels, threshold=t, strategy=s, loss=l)
            p = compare_with_without(with_, without)
            with_.p_values["w_vs_wo"] = p
            reports[(s, l, t)] = (with_, without)
            rows.append(
                {
                    "strategy": s,
                    "loss": l,
                    "threshold": t,
                    "n_test_frames": len(test),
                    "mean_dice_w": with_.mean_dice,
                    "std_dice_w": with_.std_dice,
                    "median_dice_w": with_.median_dice,
                    "n_included_w": len(with_.dice),
                    "mean_dice_wo": without.mean_dice,
                    "std_dice_wo": without.std_dice,
                    "median_dice_wo": without.median_dice,
                    "n_included_wo": len(without.dice),
                    "p_value": p,
                    "fpr_w": with_.confusion.fpr,
                    "fnr_w": with_.confusion.fnr,
                    "fp_area_w": with_.fp_area,
                    "fpr_wo": without.confusion.fpr,
                    "fnr_wo": without.confusion.fnr,
                    "fp_area_wo": without.fp_area,
                    "seg_checkpoints": str(seg_dir(root, s, l)),
                    "clf_checkpoint": str(clf_dir(root)),
                }
            )
    return rows, reports


def sweep_cells(cfg: RunConfig, frames, root):
    _, test = split_frames(frames)
    classifier = load_classifier(root)
    results = []
    for s, l in cfg.cells():
        ensemble = load_ensemble(root, s, l)
        results.append(
            threshold_sweep(
                classifier,
                ensemble,
                test,
                cfg.thresholds,
                cfg.ground_truth_rule,
                cfg.min_area_pixels,
                cfg.train.min_consensus_pixels,
                strategy=s,
                loss=l,
            )
        )
    return results
