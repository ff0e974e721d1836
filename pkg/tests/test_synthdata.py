import csv
import filecmp
import json

import numpy as np
import pytest

from screenseg.sampling import sample_vote
from screenseg.screen_eval import dice_coefficient
from screenseg.synthdata import (
    MANIFEST_COLUMNS,
    DatasetError,
    PhantomConfig,
    dataset_checksum,
    ellipse_mask,
    generate_dataset,
    generate_frames,
    load_dataset,
    read_manifest,
    simulate_raters,
)

SMALL = dict(image_height=64, image_width=64, gland_axis_range=(10, 20))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = PhantomConfig(n_patients=10, frames_per_patient=20, negative_frame_fraction=0.2, seed=7, **SMALL)
    return cfg, root, generate_dataset(cfg, root)


def test_counts_and_negatives(dataset):
    cfg, root, manifest = dataset
    assert len(manifest) == 200
    assert len(list((root / "images").glob("*.png"))) == 200
    records = load_dataset(manifest.path)
    for pid in manifest.patients():
        frames = [r for r in records if r.patient_id == pid]
        assert len(frames) == 20
        assert sum(r.true_mask.sum() == 0 for r in frames) == 4


def test_manifest_schema_and_sidecar(dataset):
    cfg, root, manifest = dataset
    with open(manifest.path) as f:
        assert tuple(next(csv.reader(f))) == MANIFEST_COLUMNS
    assert PhantomConfig.from_dict(json.loads((root / "phantom_config.json").read_text())) == cfg


def test_patient_level_split(dataset):
    _, _, manifest = dataset
    splits = {}
    for row in manifest.rows:
        splits.setdefault(row["patient_id"], set()).add(row["split"])
    assert all(len(s) == 1 for s in splits.values())
    n_test = sum(s == {"test"} for s in splits.values())
    assert n_test == 2  # 80:20 of 10 patients


def test_determinism(tmp_path, dataset):
    cfg, root, _ = dataset
    generate_dataset(cfg, tmp_path)
    cmp = filecmp.dircmp(root, tmp_path)
    assert dataset_checksum(root) == dataset_checksum(tmp_path)
    for name in ("manifest.csv", "phantom_config.json"):
        assert (root / name).read_bytes() == (tmp_path / name).read_bytes()
    assert not cmp.diff_files


def test_round_trip(dataset):
    cfg, root, manifest = dataset
    mem = generate_frames(cfg)
    disk = load_dataset(manifest.path)
    assert len(mem) == len(disk)
    for a, b in zip(mem, disk):
        assert a.frame_id == b.frame_id and a.split == b.split
        for ma, mb in zip(a.rater_masks, b.rater_masks):
            np.testing.assert_array_equal(ma, mb)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.true_mask, b.true_mask)


def test_no_negatives():
    cfg = PhantomConfig(n_patients=2, frames_per_patient=5, negative_frame_fraction=0.0, **SMALL)
    assert all(r.true_mask.any() for r in generate_frames(cfg))


def test_negative_frames_have_empty_raters_without_miss():
    cfg = PhantomConfig(n_patients=3, frames_per_patient=10, rater_miss_probability=0.0, **SMALL)
    for r in generate_frames(cfg):
        if not r.true_mask.any():
            assert all(m.sum() == 0 for m in r.rater_masks)


def test_image_range():
    for r in generate_frames(PhantomConfig(n_patients=1, frames_per_patient=4, **SMALL)):
        assert r.image.min() >= 0 and r.image.max() <= 1
        assert r.image.shape == (64, 64)
        for m in r.rater_masks:
            assert set(np.unique(m)) <= {0, 1}


@pytest.mark.parametrize(
    "field,value",
    [
        ("image_height", 16),
        ("n_patients", 0),
        ("negative_frame_fraction", 1.5),
        ("rater_miss_probability", -0.1),
        ("speckle_strength", -1.0),
        ("rater_boundary_jitter", -1),
    ],
)
def test_invalid_config_names_field(field, value):
    with pytest.raises(ValueError, match=field):
        PhantomConfig(**{field: value})


def test_unknown_field():
    with pytest.raises(ValueError, match="bogus"):
        PhantomConfig.from_dict({"bogus": 1})


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError):
        generate_dataset(PhantomConfig(n_patients=1, frames_per_patient=1, **SMALL), blocker / "sub")


def test_missing_mask_names_frame(tmp_path):
    cfg = PhantomConfig(n_patients=2, frames_per_patient=3, **SMALL)
    m = generate_dataset(cfg, tmp_path)
    row = m.rows[4]
    (tmp_path / row["mask_path_r2"]).unlink()
    with pytest.raises(DatasetError, match=row["frame_id"]):
        load_dataset(m.path)


def test_non_binary_mask_names_frame(tmp_path):
    from PIL import Image

    m = generate_dataset(PhantomConfig(n_patients=1, frames_per_patient=2, **SMALL), tmp_path)
    row = m.rows[1]
    Image.fromarray(np.full((64, 64), 128, np.uint8)).save(tmp_path / row["mask_path_r1"])
    with pytest.raises(DatasetError, match=row["frame_id"]):
        load_dataset(m.path)


def test_shape_mismatch_names_frame(tmp_path):
    from PIL import Image

    m = generate_dataset(PhantomConfig(n_patients=1, frames_per_patient=2, **SMALL), tmp_path)
    row = m.rows[0]
    Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / row["mask_path_r3"])
    with pytest.raises(DatasetError, match=row["frame_id"]):
        load_dataset(m.path)


def test_split_spanning_patient_rejected(tmp_path):
    m = generate_dataset(PhantomConfig(n_patients=2, frames_per_patient=2, **SMALL), tmp_path)
    lines = m.path.read_text().splitlines()
    first = lines[1].split(",")
    first[-1] = "test" if first[-1] == "train" else "train"
    lines[1] = ",".join(first)
    m.path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="spans splits"):
        read_manifest(m.path)


# raters


def _ellipse64():
    return ellipse_mask((64, 64), (32, 30), (12, 16), 0.3)


def test_raters_identity():
    m = _ellipse64()
    for r in simulate_raters(m, 0, 0.0, np.random.default_rng(0)):
        np.testing.assert_array_equal(r, m)


def test_raters_empty():
    for r in simulate_raters(np.zeros((64, 64)), 3, 0.5, np.random.default_rng(0)):
        assert r.sum() == 0


def test_raters_jitter_dice_bounds():
    m = _ellipse64()
    for r in simulate_raters(m, 3, 0.0, np.random.default_rng(11)):
        assert 0.7 < dice_coefficient(r, m) < 1.0


def test_raters_miss_probability():
    m = _ellipse64()
    rng = np.random.default_rng(3)
    masks = [r for _ in range(300) for r in simulate_raters(m, 1, 0.2, rng)]
    missed = sum(r.sum() == 0 for r in masks)
    assert 0.15 * 900 < missed < 0.25 * 900


def test_majority_vote_does_not_degrade():
    """Vote Dice >= mean single-rater Dice - 0.05 over >= 100 positive frames."""
    cfg = PhantomConfig(n_patients=8, frames_per_patient=20, rater_boundary_jitter=3, rater_miss_probability=0.0, seed=5, **SMALL)
    vote, single = [], []
    for r in generate_frames(cfg):
        if r.true_mask.any():
            vote.append(dice_coefficient(sample_vote(r.rater_masks).values, r.true_mask))
            single.extend(dice_coefficient(m, r.true_mask) for m in r.rater_masks)
    assert len(vote) >= 100
    assert np.mean(vote) >= np.mean(single) - 0.05
