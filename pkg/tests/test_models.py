import numpy as np
import pytest
import torch

from screenseg.models import (
    ClassifierSpec,
    SegNetSpec,
    build_classifier,
    build_segmenter,
    classifier_input,
    load_checkpoint,
    normalize_frame,
    parameter_checksum,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def seg():
    return build_segmenter(SegNetSpec(), seed=0).eval()


@pytest.fixture(scope="module")
def clf():
    return build_classifier(ClassifierSpec(), seed=0).eval()


def test_segmenter_shape_and_range(seg):
    with torch.no_grad():
        y = seg(torch.randn(1, 1, 128, 128))
    assert y.shape == (1, 1, 128, 128)
    assert (y > 0).all() and (y < 1).all()


def test_segmenter_divisibility(seg):
    with torch.no_grad():
        assert seg(torch.randn(1, 1, 96, 96)).shape == (1, 1, 96, 96)
        with pytest.raises(ValueError, match="divisible by 16"):
            seg(torch.randn(1, 1, 100, 100))


def test_segmenter_fully_convolutional(seg):
    n = sum(p.numel() for p in seg.parameters())
    with torch.no_grad():
        seg(torch.randn(2, 1, 32, 48))
    assert sum(p.numel() for p in seg.parameters()) == n


def test_segmenter_determinism():
    a = parameter_checksum(build_segmenter(SegNetSpec(), seed=3))
    assert a == parameter_checksum(build_segmenter(SegNetSpec(), seed=3))
    assert a != parameter_checksum(build_segmenter(SegNetSpec(), seed=4))


def test_segmenter_build_leaves_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_segmenter(SegNetSpec(depth=2), seed=9)
    assert torch.rand(1) == expected


@pytest.mark.parametrize("kw", [dict(depth=1), dict(base_channels=0), dict(upsample="bicubic")])
def test_segnet_spec_invalid(kw):
    with pytest.raises(ValueError):
        SegNetSpec(**kw)


def test_segmenter_variants():
    for spec in (SegNetSpec(upsample="nearest"), SegNetSpec(preactivation=True), SegNetSpec(depth=3, base_channels=4)):
        m = build_segmenter(spec, 0).eval()
        with torch.no_grad():
            assert m(torch.randn(1, 1, 32, 32)).shape == (1, 1, 32, 32)


def test_classifier_single_logit(clf):
    for shape in ((64, 64), (403, 361), (128, 96)):
        x = classifier_input(np.random.default_rng(0).random(shape))
        assert x.shape == (1, 1, 224, 224)
        with torch.no_grad():
            out = clf(x)
        assert out.shape == (1,)
        assert torch.isfinite(out).all()


def test_classifier_extremes_finite(clf):
    with torch.no_grad():
        for v in (0.0, 1.0):
            assert torch.isfinite(clf(classifier_input(np.full((64, 64), v)))).all()


def test_classifier_determinism():
    assert parameter_checksum(build_classifier(seed=2)) == parameter_checksum(build_classifier(seed=2))


def test_resnext50_variant_builds():
    m = build_classifier(ClassifierSpec(variant="resnext50"), seed=0).eval()
    n = sum(p.numel() for p in m.parameters())
    assert 20e6 < n < 30e6
    with torch.no_grad():
        assert m(classifier_input(np.zeros((64, 64)))).shape == (1,)


def test_pretrained_hook_collapses_rgb(tmp_path):
    src = build_classifier(seed=1)
    state = {k: v.clone() for k, v in src.state_dict().items()}
    rgb = torch.randn(state["conv1.weight"].shape[0], 3, 7, 7)
    state["conv1.weight"] = rgb
    state["fc.weight"] = torch.randn(1000, state["fc.weight"].shape[1])
    state["fc.bias"] = torch.randn(1000)
    torch.save(state, tmp_path / "w.pt")
    m = build_classifier(seed=5, pretrained_path=tmp_path / "w.pt")
    torch.testing.assert_close(m.conv1.weight, rgb.mean(dim=1, keepdim=True))
    torch.testing.assert_close(m.layer1[0].conv1.weight, src.layer1[0].conv1.weight)
    assert m.fc.weight.shape == (1, src.fc.weight.shape[1])


def test_pretrained_hook_rejects_mismatch(tmp_path):
    state = build_classifier(ClassifierSpec(cardinality=16), seed=1).state_dict()
    torch.save(state, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="incompatible"):
        build_classifier(seed=0, pretrained_path=tmp_path / "bad.pt")
    with pytest.raises(FileNotFoundError):
        build_classifier(seed=0, pretrained_path=tmp_path / "missing.pt")


def test_normalize_classifier_path():
    out = normalize_frame(np.full((64, 64), 0.449, np.float32), "classifier")
    assert out.shape == (224, 224)
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_normalize_segmenter_path():
    img = np.random.default_rng(0).random((64, 48)).astype(np.float32)
    out = normalize_frame(img, "segmenter")
    assert abs(out.mean()) < 1e-6
    assert abs(out.std() - 1) < 1e-4
    np.testing.assert_array_equal(normalize_frame(np.full((32, 32), 0.3), "segmenter"), 0.0)
    with pytest.raises(ValueError):
        normalize_frame(img, "other")


def test_checkpoint_round_trip(tmp_path, seg):
    for model in (seg, build_classifier(seed=4)):
        d = save_checkpoint(model, tmp_path / type(model).__name__, seed=4)
        loaded, meta = load_checkpoint(d)
        assert parameter_checksum(loaded) == parameter_checksum(model) == meta["checksum"]
        assert loaded.spec == model.spec
