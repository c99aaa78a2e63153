"""Experiment configuration with a canonical JSON form.

Every dataclass here, including the nested library configs, round-trips
through :func:`to_dict` / :func:`from_dict`. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from hypm.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "ppm"
    root: str | None = None  # PPM tree for source="ppm"
    num_domains: int = 4
    num_classes: int = 7
    per_class: int = 40
    seed: int = 0
    image_size: int = 32

    def __post_init__(self):
        if self.source not in ("synthetic", "ppm"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "ppm" and not self.root:
            raise ConfigError("data.root is required for source='ppm'")


@dataclass(frozen=True)
class SplitConfig:
    test_domain: str | None = None  # default: last domain
    num_unknown: int = 1


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "symmetric"
    ratio: float = 0.2
    seed: int = 0
    similarity: str | None = None  # CSV path, asymmetric noise only
    labels: str | None = None  # pre-computed training-label CSV; skips injection

    def __post_init__(self):
        if self.kind not in ("symmetric", "asymmetric", "none"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = 0.5
    output_dir: str | None = None


# ----------------------------------------------------------------------
# dict conversion


def _init_fields(cls) -> list[dataclasses.Field]:
    return [f for f in dataclasses.fields(cls) if f.init]


def to_dict(obj) -> dict[str, Any]:
    out = {}
    for f in _init_fields(type(obj)):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def from_dict(cls, data: dict[str, Any], where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in _init_fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown key(s) {extra} in {where or cls.__name__}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value, f"{where}.{name}" if where else name)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the canonical form with ``output_dir`` left out."""
    d = to_dict(cfg)
    d.pop("output_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(ExperimentConfig, data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(canonical_json(cfg))


def with_overrides(cfg: ExperimentConfig, **sections: dict[str, Any]) -> ExperimentConfig:
    """Rebuild ``cfg`` with per-section key overrides, e.g.
    ``with_overrides(cfg, train={"seed": 3}, sgd={"lr": 0.1})``.

    ``sgd``, ``ball``, ``augment`` and ``mode`` address the nested train
    sections.
    """
    d = to_dict(cfg)
    for section, values in sections.items():
        if not values:
            continue
        if section in ("sgd", "ball", "augment", "mode"):
            target = d["train"][section]
        elif section == "top":
            target = d
        else:
            target = d[section]
        for k, v in values.items():
            if k not in target:
                raise ConfigError(f"unknown key {k!r} in section {section!r}")
            target[k] = list(v) if isinstance(v, tuple) else v
    # eps is derived from gamma unless set explicitly
    if "gamma" in sections.get("ball", {}) and "eps" not in sections.get("ball", {}):
        d["train"]["ball"]["eps"] = None
    return from_dict(ExperimentConfig, d)
