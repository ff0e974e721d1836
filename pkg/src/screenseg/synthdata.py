"""Synthetic ultrasound-like phantom frames with three simulated raters.

Positive frames show a dark elliptical gland with a bright rim; negative
frames show background tissue only (optionally with a rimless dark
distractor). Every pixel is fully determined by ``PhantomConfig.seed``.

On disk a dataset is::

    <root>/manifest.csv
    <root>/phantom_config.json
    <root>/images/<frame_id>.png
    <root>/masks/r1/<frame_id>.png   (and r2, r3)
    <root>/truth/<frame_id>.png      (phantom ground truth, synthetic only)
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MANIFEST_COLUMNS = (
    "patient_id",
    "frame_id",
    "image_path",
    "mask_path_r1",
    "mask_path_r2",
    "mask_path_r3",
    "split",
)
SPLITS = ("train", "val", "test")
N_RATERS = 3


class DatasetError(Exception):
    """Raised when a dataset on disk is missing files or is malformed."""


@dataclass(frozen=True)
class PhantomConfig:
    image_height: int = 128
    image_width: int = 128
    n_patients: int = 10
    frames_per_patient: int = 20
    negative_frame_fraction: float = 0.2
    gland_axis_range: tuple[float, float] = (16.0, 40.0)
    speckle_strength: float = 0.5
    rater_boundary_jitter: int = 3
    rater_miss_probability: float = 0.05
    test_fraction: float = 0.2
    distractor_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gland_axis_range", tuple(float(v) for v in self.gland_axis_range))
        self.validate()

    def validate(self) -> None:
        for name in ("image_height", "image_width"):
            if int(getattr(self, name)) < 32:
                raise ValueError(f"{name} must be >= 32, got {getattr(self, name)}")
        for name in ("n_patients", "frames_per_patient"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in (
            "negative_frame_fraction",
            "rater_miss_probability",
            "test_fraction",
            "distractor_probability",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.speckle_strength < 0:
            raise ValueError(f"speckle_strength must be >= 0, got {self.speckle_strength}")
        if self.rater_boundary_jitter < 0:
            raise ValueError(f"rater_boundary_jitter must be >= 0, got {self.rater_boundary_jitter}")
        lo, hi = self.gland_axis_range
        if len(self.gland_axis_range) != 2 or not 2 <= lo <= hi:
            raise ValueError(f"gland_axis_range must be (lo, hi) with 2 <= lo <= hi, got {self.gland_axis_range}")
        if 2 * (hi + 4) > min(self.image_height, self.image_width):
            raise ValueError(
                f"gland_axis_range upper bound {hi} does not fit a "
                f"{self.image_height}x{self.image_width} frame"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PhantomConfig field(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gland_axis_range"] = list(self.gland_axis_range)
        return d


@dataclass
class FrameRecord:
    patient_id: str
    frame_id: str
    image: np.ndarray  # float32 in [0, 1], quantized to 8 bits
    rater_masks: tuple[np.ndarray, np.ndarray, np.ndarray]  # uint8 in {0, 1}
    split: str
    true_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"frame {self.frame_id}: split must be one of {SPLITS}, got {self.split!r}")
        if len(self.rater_masks) != N_RATERS:
            raise ValueError(f"frame {self.frame_id}: expected {N_RATERS} rater masks, got {len(self.rater_masks)}")
        for m in self.rater_masks:
            if m.shape != self.image.shape:
                raise ValueError(f"frame {self.frame_id}: mask shape {m.shape} != image shape {self.image.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class DatasetManifest:
    path: Path
    rows: list[dict]

    def __len__(self):
        return len(self.rows)

    @property
    def root(self) -> Path:
        return self.path.parent

    def patients(self, split: str | None = None) -> list[str]:
        seen = dict.fromkeys(r["patient_id"] for r in self.rows if split is None or r["split"] == split)
        return list(seen)


# ---------------------------------------------------------------------------
# geometry helpers


def ellipse_mask(shape, center, axes, angle) -> np.ndarray:
    """Binary filled ellipse; ``axes`` are (semi-axis along rows, along cols)."""
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return ((u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0).astype(np.uint8)


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return yy**2 + xx**2 <= radius**2


def _smooth_noise(shape, sigma, rng) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to zero mean, unit variance."""
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = n.std()
    return (n - n.mean()) / sd if sd > 0 else np.zeros(shape)


# ---------------------------------------------------------------------------
# raters


def simulate_raters(true_mask, jitter, miss_prob, rng, n_raters=N_RATERS):
    """Perturb ``true_mask`` independently once per rater.

    Each rater gets a signed morphological offset (dilation or erosion by a
    disk of radius up to ``ceil(jitter / 2)``) followed by a smooth elastic
    displacement whose peak magnitude is about ``jitter / 2`` pixels, so the
    total boundary displacement stays within ``jitter``. With probability
    ``miss_prob`` a rater returns an empty mask for a non-empty input.
    """
    true_mask = np.asarray(true_mask).astype(bool)
    out = []
    for _ in range(n_raters):
        # draws happen unconditionally so the rng stream does not depend on content
        offset = int(rng.integers(-((jitter + 1) // 2), (jitter + 1) // 2 + 1)) if jitter > 0 else 0
        field_y = rng.standard_normal(true_mask.shape)
        field_x = rng.standard_normal(true_mask.shape)
        missed = rng.random() < miss_prob
        if not true_mask.any() or missed:
            out.append(np.zeros(true_mask.shape, dtype=np.uint8))
            continue
        m = true_mask
        if offset > 0:
            m = ndimage.binary_dilation(m, structure=_disk(offset))
        elif offset < 0:
            m = ndimage.binary_erosion(m, structure=_disk(-offset))
        if jitter > 0:
            sigma = max(true_mask.shape) / 8
            amp = jitter / 2
            dy = ndimage.gaussian_filter(field_y, sigma, mode="wrap")
            dx = ndimage.gaussian_filter(field_x, sigma, mode="wrap")
            peak = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
            dy, dx = dy * amp / peak, dx * amp / peak
            yy, xx = np.mgrid[: m.shape[0], : m.shape[1]]
            m = ndimage.map_coordinates(m.astype(np.uint8), [yy + dy, xx + dx], order=0, mode="constant")
        out.append(np.asarray(m, dtype=np.uint8))
    return tuple(out)


# ---------------------------------------------------------------------------
# frames


def _background(shape, rng):
    h, w = shape
    bg = 0.45 + 0.08 * _smooth_noise(shape, max(h, w) / 8, rng)
    # brighter near field under the probe, darker with depth
    bg += np.linspace(0.08, -0.08, h)[:, None]
    return bg


def _render_frame(cfg: PhantomConfig, gland, rng):
    """Return (image quantized to 8 bits, true mask)."""
    shape = (cfg.image_height, cfg.image_width)
    clean = _background(shape, rng)
    mask = np.zeros(shape, dtype=np.uint8)
    distractor = rng.random() < cfg.distractor_probability
    d_center = (rng.uniform(0.25, 0.75) * shape[0], rng.uniform(0.25, 0.75) * shape[1])
    d_axes = (rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6))
    if gland is not None:
        center, axes, angle = gland
        mask = ellipse_mask(shape, center, axes, angle)
        rim_w = max(1.5, min(axes) / 5)
        outer = ellipse_mask(shape, center, (axes[0] + rim_w, axes[1] + rim_w), angle).astype(bool)
        rim = outer & ~mask.astype(bool)
        clean = np.where(rim, 0.88, clean)
        clean = np.where(mask.astype(bool), 0.18 + 0.04 * _smooth_noise(shape, 3, rng), clean)
    elif distractor:
        lo = cfg.gland_axis_range[0]
        d = ellipse_mask(shape, d_center, (lo * (0.5 + d_axes[0]), lo * (0.5 + d_axes[1])), 0.0)
        clean = np.where(d.astype(bool), 0.25, clean)
    clean = ndimage.gaussian_filter(clean, 1.0)
    speckle = _smooth_noise(shape, 0.8, rng)
    img = np.clip(clean * (1.0 + cfg.speckle_strength * speckle), 0.0, 1.0)
    img = np.round(img * 255).astype(np.uint8).astype(np.float32) / 255.0
    return img, mask


def _patient_glands(cfg: PhantomConfig, rng):
    """Gland geometry for each positive frame position of one patient."""
    h, w = cfg.image_height, cfg.image_width
    lo, hi = cfg.gland_axis_range
    base_axes = np.array([rng.uniform(lo, hi), rng.uniform(lo, hi)])
    base_angle = rng.uniform(-np.pi / 6, np.pi / 6)
    out = []
    for i in range(cfg.frames_per_patient):
        t = (i + 0.5) / cfg.frames_per_patient
        # sweeping through the gland: largest cross-section mid-sweep
        s = 0.8 + 0.2 * np.sin(np.pi * t)
        axes = np.clip(base_axes * s * rng.uniform(0.95, 1.05, 2), lo, hi)
        margin = axes.max() + max(1.5, axes.min() / 5) + 2
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        angle = base_angle + rng.uniform(-0.1, 0.1)
        out.append(((cy, cx), (float(axes[0]), float(axes[1])), float(angle)))
    return out


def _patient_splits(cfg: PhantomConfig) -> list[str]:
    rng = np.random.default_rng([cfg.seed, 0xD17])
    n_test = int(round(cfg.test_fraction * cfg.n_patients))
    if cfg.n_patients > 1:
        n_test = min(max(n_test, 1 if cfg.test_fraction > 0 else 0), cfg.n_patients - 1)
    test = set(rng.permutation(cfg.n_patients)[:n_test].tolist())
    return ["test" if p in test else "train" for p in range(cfg.n_patients)]


def generate_frames(config: PhantomConfig) -> list[FrameRecord]:
    """Build all frames in memory (what ``generate_dataset`` writes)."""
    cfg = config
    cfg.validate()
    splits = _patient_splits(cfg)
    n_neg = int(round(cfg.negative_frame_fraction * cfg.frames_per_patient))
    records = []
    for p in range(cfg.n_patients):
        rng = np.random.default_rng([cfg.seed, p])
        glands = _patient_glands(cfg, rng)
        negative = set(rng.permutation(cfg.frames_per_patient)[:n_neg].tolist())
        pid = f"P{p:03d}"
        for i in range(cfg.frames_per_patient):
            gland = None if i in negative else glands[i]
            img, truth = _render_frame(cfg, gland, rng)
            masks = simulate_raters(truth, cfg.rater_boundary_jitter, cfg.rater_miss_probability, rng)
            if gland is None:
                masks = _false_annotations(cfg, masks, rng)
            records.append(
                FrameRecord(
                    patient_id=pid,
                    frame_id=f"{pid}_F{i:03d}",
                    image=img,
                    rater_masks=masks,
                    split=splits[p],
                    true_mask=truth,
                )
            )
    return records


def _false_annotations(cfg, masks, rng):
    # a rater occasionally outlines a gland that is not there
    shape = masks[0].shape
    lo = cfg.gland_axis_range[0]
    out = []
    for m in masks:
        fire = rng.random() < cfg.rater_miss_probability
        center = (rng.uniform(0.3, 0.7) * shape[0], rng.uniform(0.3, 0.7) * shape[1])
        if fire:
            m = ellipse_mask(shape, center, (lo, lo), 0.0)
        out.append(m)
    return tuple(out)


# ---------------------------------------------------------------------------
# disk I/O


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def generate_dataset(config: PhantomConfig, out_dir) -> DatasetManifest:
    """Write the phantom dataset to ``out_dir`` and return its manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for sub in ("images", "masks/r1", "masks/r2", "masks/r3", "truth"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise DatasetError(f"dataset directory {out} is not writable")

    records = generate_frames(config)
    rows = []
    for rec in records:
        row = {
            "patient_id": rec.patient_id,
            "frame_id": rec.frame_id,
            "image_path": f"images/{rec.frame_id}.png",
            "mask_path_r1": f"masks/r1/{rec.frame_id}.png",
            "mask_path_r2": f"masks/r2/{rec.frame_id}.png",
            "mask_path_r3": f"masks/r3/{rec.frame_id}.png",
            "split": rec.split,
        }
        _write_png(out / row["image_path"], np.round(rec.image * 255))
        for r in range(N_RATERS):
            _write_png(out / row[f"mask_path_r{r + 1}"], rec.rater_masks[r] * 255)
        _write_png(out / "truth" / f"{rec.frame_id}.png", rec.true_mask * 255)
        rows.append(row)

    manifest_path = out / "manifest.csv"
    with open(manifest_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "phantom_config.json", "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return DatasetManifest(manifest_path, rows)


def read_manifest(manifest_path) -> DatasetManifest:
    path = Path(manifest_path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DatasetError(f"manifest columns {reader.fieldnames} != {list(MANIFEST_COLUMNS)}")
        rows = list(reader)
    by_patient: dict[str, str] = {}
    for row in rows:
        if row["split"] not in SPLITS:
            raise DatasetError(f"frame {row['frame_id']}: unknown split {row['split']!r}")
        prev = by_patient.setdefault(row["patient_id"], row["split"])
        if prev != row["split"]:
            raise DatasetError(f"patient {row['patient_id']} spans splits {prev!r} and {row['split']!r}")
    return DatasetManifest(path, rows)


def _read_mask(path: Path, frame_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"frame {frame_id}: missing file {path}")
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DatasetError(f"frame {frame_id}: mask {path} is not single-channel")
    if not np.isin(arr, (0, 255)).all():
        raise DatasetError(f"frame {frame_id}: mask {path} is not binary (values must be 0 or 255)")
    return (arr > 0).astype(np.uint8)


def _load_row(root: Path, row: dict, with_truth: bool) -> FrameRecord:
    fid = row["frame_id"]
    img_path = root / row["image_path"]
    if not img_path.is_file():
        raise DatasetError(f"frame {fid}: missing file {img_path}")
    img = np.asarray(Image.open(img_path))
    if img.ndim != 2:
        raise DatasetError(f"frame {fid}: image {img_path} is not grayscale")
    masks = tuple(_read_mask(root / row[f"mask_path_r{r + 1}"], fid) for r in range(N_RATERS))
    for m in masks:
        if m.shape != img.shape:
            raise DatasetError(f"frame {fid}: mask shape {m.shape} != image shape {img.shape}")
    truth = None
    truth_path = root / "truth" / f"{fid}.png"
    if with_truth and truth_path.is_file():
        truth = _read_mask(truth_path, fid)
    return FrameRecord(
        patient_id=row["patient_id"],
        frame_id=fid,
        image=img.astype(np.float32) / 255.0,
        rater_masks=masks,
        split=row["split"],
        true_mask=truth,
    )


def iter_dataset(manifest_path, with_truth: bool = True):
    """Lazily yield FrameRecords in manifest order."""
    manifest = read_manifest(manifest_path)
    for row in manifest.rows:
        yield _load_row(manifest.root, row, with_truth)


def load_dataset(manifest_path, with_truth: bool = True) -> list[FrameRecord]:
    return list(iter_dataset(manifest_path, with_truth))


def dataset_checksum(root) -> str:
    """SHA-256 over the manifest, sidecar and every referenced file."""
    import hashlib

    root = Path(root)
    manifest = read_manifest(root / "manifest.csv")
    h = hashlib.sha256()
    names = ["manifest.csv", "phantom_config.json"]
    for row in manifest.rows:
        names += [row["image_path"]] + [row[f"mask_path_r{r + 1}"] for r in range(N_RATERS)]
        names.append(f"truth/{row['frame_id']}.png")
    for name in names:
        p = root / name
        if p.is_file():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()
