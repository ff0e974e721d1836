"""Residual U-Net segmenter, grouped-convolution frame classifier, and
their input normalization and checkpoint format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CLF_MEAN = 0.449
CLF_STD = 0.226
CLF_SIZE = 224
VAR_EPS = 1e-8
PROB_EPS = 1e-7


# ---------------------------------------------------------------------------
# segmenter


@dataclass(frozen=True)
class SegNetSpec:
    depth: int = 5
    base_channels: int = 16
    upsample: str = "transpose"  # or "nearest"
    preactivation: bool = False
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.upsample not in ("transpose", "nearest"):
            raise ValueError(f"upsample must be 'transpose' or 'nearest', got {self.upsample!r}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with batch norm and an identity (or 1x1) shortcut."""

    def __init__(self, cin, cout, preactivation=False):
        super().__init__()
        self.preactivation = preactivation
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cin if preactivation else cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        if self.preactivation:
            y = self.conv1(F.relu(self.bn1(x)))
            y = self.conv2(F.relu(self.bn2(y)))
            return y + self.shortcut(x)
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.shortcut(x))


class SegNet(nn.Module):
    def __init__(self, spec: SegNetSpec):
        super().__init__()
        self.spec = spec
        chans = [spec.base_channels * 2**i for i in range(spec.depth)]
        self.encoders = nn.ModuleList()
        prev = spec.in_channels
        for c in chans:
            self.encoders.append(ResBlock(prev, c, spec.preactivation))
            prev = c
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c in reversed(chans[:-1]):
            if spec.upsample == "transpose":
                self.ups.append(nn.ConvTranspose2d(prev, c, 2, stride=2))
            else:
                self.ups.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(prev, c, 3, padding=1)))
            self.decoders.append(ResBlock(2 * c, c, spec.preactivation))
            prev = c
        self.head = nn.Conv2d(prev, 1, 1)

    def check_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        d = self.spec.divisor
        if h % d or w % d:
            raise ValueError(f"input size {h}x{w} is not divisible by {d} (depth {self.spec.depth})")

    def logits(self, x):
        self.check_input(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x)).clamp(PROB_EPS, 1 - PROB_EPS)


def build_segmenter(spec: SegNetSpec | None = None, seed: int = 0) -> SegNet:
    spec = spec or SegNetSpec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegNet(spec)


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class ClassifierSpec:
    variant: str = "small"  # "small" (3 stages) or "resnext50" (4 stages, 32x4d)
    cardinality: int = 32
    input_size: int = CLF_SIZE
    mean: float = CLF_MEAN
    std: float = CLF_STD

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown classifier variant {self.variant!r}; expected one of {sorted(_VARIANTS)}")
        if self.cardinality < 1:
            raise ValueError("cardinality must be >= 1")
        if self.std <= 0:
            raise ValueError("std must be > 0")


# stem channels, blocks per stage, grouped width per stage, output channels per stage
_VARIANTS = {
    "small": (32, (1, 1, 1), (64, 128, 256), (64, 128, 256)),
    "resnext50": (64, (3, 4, 6, 3), (128, 256, 512, 1024), (256, 512, 1024, 2048)),
}


class Bottleneck(nn.Module):
    def __init__(self, cin, width, cout, stride, groups):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, groups=groups, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return F.relu(y + (x if self.downsample is None else self.downsample(x)))


class FrameClassifier(nn.Module):
    """ResNeXt-style classifier, one input channel, one output logit.

    Module names follow the common torchvision layout so ImageNet weights
    for ``resnext50`` can be loaded with :func:`load_pretrained`.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        stem, blocks, widths, outs = _VARIANTS[spec.variant]
        self.conv1 = nn.Conv2d(1, stem, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(stem)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        prev = stem
        for i, (n, w, o) in enumerate(zip(blocks, widths, outs)):
            layer = []
            for b in range(n):
                stride = 2 if (i > 0 and b == 0) else 1
                layer.append(Bottleneck(prev, w, o, stride, spec.cardinality))
                prev = o
            self.add_module(f"layer{i + 1}", nn.Sequential(*layer))
        self.n_stages = len(blocks)
        self.fc = nn.Linear(prev, 1)

    def forward(self, x):
        """``x``: normalized ``(N, 1, S, S)`` batch. Returns ``(N,)`` logits."""
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        for i in range(self.n_stages):
            x = getattr(self, f"layer{i + 1}")(x)
        x = torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)
        return self.fc(x).squeeze(1)


def load_pretrained(model: FrameClassifier, path) -> None:
    """Load weights from a state-dict file into ``model``.

    A 3-channel first convolution is collapsed to one channel by averaging.
    A classification head of a different shape is left at its initial
    values. Any other mismatch raises ValueError.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pretrained weights not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    own = model.state_dict()
    w = state.get("conv1.weight")
    if w is not None and w.ndim == 4 and w.shape[1] == 3:
        state = dict(state)
        state["conv1.weight"] = w.mean(dim=1, keepdim=True)
    merged = {}
    for k, v in own.items():
        if k not in state:
            raise ValueError(f"incompatible pretrained file {path}: missing {k}")
        if state[k].shape != v.shape:
            if k.startswith("fc."):
                merged[k] = v
                continue
            raise ValueError(f"incompatible pretrained file {path}: {k} has shape {tuple(state[k].shape)}, expected {tuple(v.shape)}")
        merged[k] = state[k]
    model.load_state_dict(merged)


def build_classifier(spec: ClassifierSpec | None = None, seed: int = 0, pretrained_path=None) -> FrameClassifier:
    spec = spec or ClassifierSpec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FrameClassifier(spec)
    if pretrained_path is not None:
        load_pretrained(model, pretrained_path)
    return model


# ---------------------------------------------------------------------------
# normalization


def segmenter_input(images) -> torch.Tensor:
    """(N, H, W) or (H, W) in [0, 1] -> (N, 1, H, W) standardized per image."""
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images, dtype=torch.float32)
    if x.ndim == 2:
        x = x[None]
    x = x.double()
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return ((x - mean) / torch.sqrt(var + VAR_EPS))[:, None].float()


def classifier_input(images, spec: ClassifierSpec | None = None) -> torch.Tensor:
    """(N, H, W) or (H, W) in [0, 1] -> (N, 1, S, S) resized and normalized."""
    spec = spec or ClassifierSpec()
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images, dtype=torch.float32)
    if x.ndim == 2:
        x = x[None]
    x = x[:, None]
    if x.shape[-2:] != (spec.input_size, spec.input_size):
        x = F.interpolate(x, size=(spec.input_size, spec.input_size), mode="bilinear", align_corners=False)
    return (x - spec.mean) / spec.std


def normalize_frame(image, path: str = "segmenter", spec: ClassifierSpec | None = None) -> np.ndarray:
    """Normalize one 2D frame for the ``segmenter`` or ``classifier`` path."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D frame, got shape {image.shape}")
    if path == "segmenter":
        return segmenter_input(image)[0, 0].numpy()
    if path == "classifier":
        return classifier_input(image, spec)[0, 0].numpy()
    raise ValueError(f"path must be 'segmenter' or 'classifier', got {path!r}")


# ---------------------------------------------------------------------------
# checkpoints


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: nn.Module, directory, seed: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kind = "segmenter" if isinstance(model, SegNet) else "classifier"
    torch.save(model.state_dict(), directory / "params.pt")
    meta = {"kind": kind, "spec": asdict(model.spec), "seed": seed, "checksum": parameter_checksum(model)}
    if extra:
        meta.update(extra)
    with open(directory / "model.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return directory


def load_checkpoint(directory):
    """Rebuild the model stored in ``directory``; returns ``(model, meta)``."""
    directory = Path(directory)
    meta_path, params_path = directory / "model.json", directory / "params.pt"
    if not meta_path.is_file() or not params_path.is_file():
        raise FileNotFoundError(f"not a checkpoint directory: {directory}")
    meta = json.loads(meta_path.read_text())
    if meta["kind"] == "segmenter":
        model = SegNet(_spec_from(SegNetSpec, meta["spec"]))
    elif meta["kind"] == "classifier":
        model = FrameClassifier(_spec_from(ClassifierSpec, meta["spec"]))
    else:
        raise ValueError(f"unknown checkpoint kind {meta['kind']!r} in {directory}")
    model.load_state_dict(torch.load(params_path, map_location="cpu", weights_only=True))
    model.eval()
    return model, meta


def _spec_from(cls, d):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})
