import math
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference_grad
from screenseg.losses import (
    ClassWeights,
    bce,
    class_weights,
    classifier_bce,
    dice_bce,
    dice_loss,
    get_loss,
    soft_dice,
    w_bce,
)

T4 = np.array([[1.0, 0.0], [1.0, 0.0]])
HALF4 = np.full((2, 2), 0.5)


def test_soft_dice_identity():
    m = np.array([[1, 0, 1], [0, 1, 1]], dtype=float)
    assert float(soft_dice(m, m)) == pytest.approx(1.0, abs=1e-6)


def test_soft_dice_half():
    assert float(soft_dice(HALF4, T4)) == pytest.approx(0.5, abs=1e-6)
    assert float(dice_loss(HALF4, T4)) == pytest.approx(0.5, abs=1e-6)


def test_soft_dice_empty_both():
    z = np.zeros((3, 3))
    assert float(soft_dice(z, z)) == 1.0
    assert float(dice_loss(z, z)) == 0.0


def test_bce_values():
    assert float(bce(HALF4, T4, "sum")) == pytest.approx(4 * math.log(2), abs=1e-10)
    assert float(bce(HALF4, T4, "mean")) == float(bce(HALF4, T4, "sum")) / 4
    assert float(bce(T4, T4, "sum")) <= 4 * -math.log(1 - 1e-7) + 1e-12


def test_dice_bce_values():
    assert float(dice_bce(HALF4, T4)) == pytest.approx(0.25 + 0.5 * math.log(2), abs=1e-6)
    assert float(dice_bce(T4, T4)) == pytest.approx(0.0, abs=1e-5)


def test_dice_bce_is_composition(rng):
    for _ in range(20):
        p = torch.as_tensor(rng.uniform(0.01, 0.99, (8, 8)))
        t = torch.as_tensor(rng.integers(0, 2, (8, 8)).astype(float))
        for red in ("mean", "sum"):
            assert dice_bce(p, t, red).item() == (0.5 * dice_loss(p, t) + 0.5 * bce(p, t, red)).item()


def test_class_weights():
    t = np.zeros((10, 10))
    t.flat[:2] = 1
    assert class_weights(t) == ClassWeights(0.5, 0.5)
    t.flat[:100] = 1
    w = class_weights(t)
    assert (w.w0, w.w1) == (0.99, 0.01)
    assert class_weights(np.zeros((4, 4))) == ClassWeights(0.0, 1.0)
    soft = np.array([[2 / 3, 1 / 3], [1.0, 0.0]])
    assert class_weights(soft).w1 == 0.5


def test_w_bce_values(rng):
    w = class_weights(T4)
    assert float(w_bce(HALF4, T4, w, "sum")) == pytest.approx(0.5 * 4 * math.log(2), abs=1e-10)
    for _ in range(10):
        p = rng.uniform(0.01, 0.99, (6, 6))
        t = rng.integers(0, 2, (6, 6)).astype(float)
        for red in ("sum", "mean"):
            assert float(w_bce(p, t, ClassWeights(0.5, 0.5), red)) == pytest.approx(0.5 * float(bce(p, t, red)), rel=1e-12)


def test_w_bce_weight_placement():
    # one positive pixel predicted 0.5, one negative pixel predicted 0.5
    p = np.full((1, 2), 0.5)
    t = np.array([[1.0, 0.0]])
    w = ClassWeights(w0=0.9, w1=0.1)
    assert float(w_bce(p, t, w, "sum")) == pytest.approx(0.9 * math.log(2) + 0.1 * math.log(2))
    p = np.array([[0.25, 0.5]])
    literal = -(0.9 * math.log(0.25) + 0.1 * math.log(0.5))
    swapped = -(0.1 * math.log(0.25) + 0.9 * math.log(0.5))
    assert float(w_bce(p, t, w, "sum")) == pytest.approx(literal)
    assert float(w_bce(p, t, w, "sum", swap_wbce_weights=True)) == pytest.approx(swapped)


def test_w_bce_default_weights_per_frame(rng):
    p = rng.uniform(0.05, 0.95, (2, 8, 8))
    t = rng.integers(0, 2, (2, 8, 8)).astype(float)
    batch = float(w_bce(p, t))
    per = np.mean([float(w_bce(p[i], t[i], class_weights(t[i]))) for i in range(2)])
    assert batch == pytest.approx(per, rel=1e-12)


def test_shape_mismatch():
    for f in (soft_dice, dice_loss, bce, dice_bce, w_bce):
        with pytest.raises(ValueError):
            f(np.zeros((2, 2)), np.zeros((2, 3)))


def test_bad_reduction():
    with pytest.raises(ValueError):
        bce(HALF4, T4, "max")


@pytest.mark.parametrize(
    "name,fn",
    [
        ("dice_loss", lambda p, t: dice_loss(p, t)),
        ("bce", lambda p, t: bce(p, t, "mean")),
        ("bce_sum", lambda p, t: bce(p, t, "sum")),
        ("w_bce", lambda p, t: w_bce(p, t, reduction="mean")),
        ("w_bce_sum", lambda p, t: w_bce(p, t, reduction="sum")),
        ("dice_bce", lambda p, t: dice_bce(p, t)),
    ],
)
def test_gradients_match_finite_differences(name, fn):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        p0 = rng.uniform(0.05, 0.95, (8, 8))
        t = torch.as_tensor(rng.integers(0, 2, (8, 8)).astype(np.float64))
        p = torch.tensor(p0, requires_grad=True)
        fn(p, t).backward()
        numeric = central_difference_grad(lambda x: float(fn(torch.as_tensor(x), t)), p0, eps=1e-5)
        np.testing.assert_allclose(p.grad.numpy(), numeric, rtol=1e-4, atol=1e-9)


unit = arrays(np.float64, (6, 6), elements=st.floats(0.0, 1.0))


@settings(max_examples=50)
@given(unit, unit)
def test_soft_dice_bounds_and_symmetry(p, t):
    a = float(soft_dice(p, t))
    assert -1e-12 <= a <= 1 + 1e-12
    assert a == pytest.approx(float(soft_dice(t, p)), rel=1e-12)


@settings(max_examples=50)
@given(unit, unit, st.permutations(range(36)))
def test_pixel_permutation_invariance(p, t, perm):
    perm = np.array(perm)
    pp = p.ravel()[perm].reshape(6, 6)
    tp = t.ravel()[perm].reshape(6, 6)
    for f in (soft_dice, bce, w_bce):
        assert float(f(p, t)) == pytest.approx(float(f(pp, tp)), rel=1e-9, abs=1e-12)


def test_get_loss():
    assert get_loss("dice") is dice_loss
    assert float(get_loss("dice_bce", "sum")(HALF4, T4)) == float(dice_bce(HALF4, T4, "sum"))
    with pytest.raises(ValueError):
        get_loss("focal")


def test_classifier_bce():
    assert classifier_bce(torch.zeros(4), torch.ones(4)).item() == pytest.approx(math.log(2))
