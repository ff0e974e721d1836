"""Static figures from long-format sweep rows."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# strip timestamps/versions so identical data gives identical bytes
_PNG_META = {"Software": None}


def _series(rows, metric):
    out = {}
    for r in rows:
        if r["metric"] != metric:
            continue
        out.setdefault((r["strategy"], r["loss"]), []).append((r["threshold"], r["value"]))
    return out


def _numeric(points):
    pts = [(float(t), v) for t, v in points if t != "seg_only"]
    return sorted(pts)


def assert_fpr_non_increasing(rows) -> None:
    for key, pts in _series(rows, "fpr").items():
        vals = [v for _, v in _numeric(pts)]
        if any(b > a + 1e-12 for a, b in zip(vals, vals[1:])):
            raise AssertionError(f"FPR series for {key} increases with threshold: {vals}")


def plot_dice_vs_threshold(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for (s, l), pts in sorted(_series(rows, "mean_dice").items()):
        pts = [(t, v) for t, v in _numeric(pts) if v is not None]
        if pts:
            ax.plot([t for t, _ in pts], [v for _, v in pts], marker="o", label=f"{s} / {l}")
    ax.set_xlabel("classifier threshold (logit)")
    ax.set_ylabel("mean Dice (positive frames)")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_fp_fn(rows, path) -> None:
    """FPR / FNR / FP-area bars: pipeline thresholds, then segmentation-only per loss."""
    assert_fpr_non_increasing(rows)
    fpr, fnr, area = _series(rows, "fpr"), _series(rows, "fnr"), _series(rows, "fp_area")
    labels, vals = [], {"FP rate": [], "FN rate": [], "FP area": []}
    keys = sorted(fpr)
    for key in keys:
        for t, v in _numeric(fpr[key]):
            labels.append(f"{key[0]} t={t:g}")
            vals["FP rate"].append(v)
            vals["FN rate"].append(dict(_numeric(fnr[key]))[t])
            vals["FP area"].append(dict(_numeric(area[key]))[t])
    n_pipeline = len(labels)
    for key in keys:
        seg = {t: v for t, v in fpr[key] if t == "seg_only"}
        if seg:
            labels.append(f"seg-only {key[1]}")
            vals["FP rate"].append(seg["seg_only"])
            vals["FN rate"].append(dict(fnr[key])["seg_only"])
            vals["FP area"].append(dict(area[key])["seg_only"])

    x = np.arange(len(labels))
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 0.5 * len(labels) + 2), 4))
    axes[0].bar(x - 0.2, vals["FP rate"], 0.4, label="FP rate")
    axes[0].bar(x + 0.2, vals["FN rate"], 0.4, label="FN rate")
    axes[0].set_ylabel("frame-level rate")
    axes[1].bar(x, vals["FP area"], 0.6, color="tab:red")
    axes[1].set_ylabel("mean FP area (fraction of frame)")
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
        ax.axvline(n_pipeline - 0.5, color="k", linestyle=":")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def read_sweep_csv(path) -> list[dict]:
    import csv

    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            t = r["threshold"]
            rows.append(
                {
                    "strategy": r["strategy"],
                    "loss": r["loss"],
                    "threshold": t if t == "seg_only" else float(t),
                    "metric": r["metric"],
                    "value": float(r["value"]) if r["value"] != "" else None,
                }
            )
    return rows
