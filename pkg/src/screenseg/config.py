"""Single JSON run configuration shared by all CLI commands."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import LOSS_NAMES
from .models import ClassifierSpec, SegNetSpec
from .sampling import LabelStrategy
from .screen_eval import DEFAULT_THRESHOLDS, GROUND_TRUTH_RULES
from .synthdata import PhantomConfig
from .train import AugmentationConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _build(cls, d, section):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    segmenter: SegNetSpec = field(default_factory=SegNetSpec)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    pretrained_path: str | None = None
    strategies: list[str] = field(default_factory=lambda: ["vote"])
    losses: list[str] = field(default_factory=lambda: ["dice"])
    thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    folds: int = 3
    ground_truth_rule: str = "consensus"
    min_area_pixels: int = 0

    _SECTIONS = {
        "phantom": PhantomConfig,
        "train": TrainConfig,
        "augment": AugmentationConfig,
        "segmenter": SegNetSpec,
        "classifier": ClassifierSpec,
    }

    def __post_init__(self):
        for s in self.strategies:
            try:
                LabelStrategy.parse(s)
            except ValueError as e:
                raise ConfigError(str(e)) from e
        for l in self.losses:
            if l not in LOSS_NAMES:
                raise ConfigError(f"unknown loss {l!r}; expected one of {LOSS_NAMES}")
        if not self.strategies or not self.losses:
            raise ConfigError("strategies and losses must be non-empty")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.ground_truth_rule not in GROUND_TRUTH_RULES:
            raise ConfigError(f"ground_truth_rule must be one of {GROUND_TRUTH_RULES}")
        if self.min_area_pixels < 0:
            raise ConfigError("min_area_pixels must be >= 0")
        self.thresholds = sorted(float(t) for t in self.thresholds)
        # one seed drives everything
        self.phantom = replace(self.phantom, seed=self.seed)
        self.train = replace(self.train, seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        kw = dict(d)
        for name, sub in cls._SECTIONS.items():
            if name in kw:
                sec = dict(kw[name]) if isinstance(kw[name], dict) else kw[name]
                if isinstance(sec, dict):
                    sec.pop("seed", None)
                kw[name] = _build(sub, sec, name)
        return cls(**kw)

    @classmethod
    def load(cls, path, seed: int | None = None) -> "RunConfig":
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        if seed is not None:
            d["seed"] = seed
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if isinstance(v, PhantomConfig) else (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
        return d

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def cells(self) -> list[tuple[str, str]]:
        return [(s, l) for s in self.strategies for l in self.losses]


def cell_name(strategy: str, loss: str) -> str:
    return f"{strategy.replace(':', '-')}__{loss}"
