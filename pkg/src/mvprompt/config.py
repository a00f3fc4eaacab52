"""Training configuration and the key=value config file format.

Config files hold one ``key = value`` assignment per line; ``#`` starts a
comment and blank lines are ignored. Values are parsed as JSON where
possible (numbers, booleans, null, lists) and fall back to plain strings,
so ``beta_range = [-1.2566, -0.6283]`` and ``backbone = tiny-cnn`` both
work. CLI flags override file values, which override the defaults below.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from .data import DATASET_KINDS
from .errors import ValidationError
from .fusion import MODES


@dataclass
class TrainConfig:
    dataset: str = "synthetic"
    data_root: Optional[str] = None
    n_points: int = 1024
    synthetic_classes: int = 8
    synthetic_per_class: int = 40
    shots: int = 16
    n_views: int = 4
    mode: str = "full"
    backbone: str = "tiny-cnn"
    weights_path: Optional[str] = None
    image_size: int = 224
    c1: int = 64
    c2: int = 256
    k_neighbors: int = 32
    token_stride: int = 16
    lr: float = 5e-4
    weight_decay: float = 5e-2
    epochs: int = 300
    batch_size: int = 16
    seed: int = 0
    alpha_range: Tuple[float, float] = (-math.pi, math.pi)
    beta_range: Tuple[float, float] = (-0.4 * math.pi, -0.2 * math.pi)
    augment: bool = True
    tta_votes: int = 10
    out_dir: str = "runs/latest"

    def validate(self) -> "TrainConfig":
        if self.dataset not in DATASET_KINDS:
            raise ValidationError(
                f"unknown dataset {self.dataset!r}; choose from {DATASET_KINDS}"
            )
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        for name in ("n_points", "shots", "n_views", "image_size", "c1", "c2",
                     "k_neighbors", "token_stride", "lr", "weight_decay", "epochs",
                     "batch_size", "tta_votes"):
            value = getattr(self, name)
            if not value > 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        for name in ("alpha_range", "beta_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ValidationError(f"{name} must be a (lo, hi) interval, got {rng}")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["alpha_range"] = list(self.alpha_range)
        out["beta_range"] = list(self.beta_range)
        return out

    @classmethod
    def from_dict(cls, mapping: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        values = dict(mapping)
        for name in ("alpha_range", "beta_range"):
            if name in values and values[name] is not None:
                values[name] = tuple(float(v) for v in values[name])
        return cls(**values)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from defaults, an optional file, and overrides."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values).validate()
