import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_force_majority(masks):
    """Per-pixel vote count by explicit enumeration of every pixel."""
    h, w = masks[0].shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            votes = 0
            for m in masks:
                votes += int(m[i][j])
            out[i][j] = 1 if 2 * votes > len(masks) else 0
    return out


def central_difference_grad(f, x, eps=1e-5):
    """Numerical gradient of scalar f at float64 array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g
