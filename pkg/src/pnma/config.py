"""Run configuration: a flat dataclass, a line-oriented config-file format,
and flag overrides (flags win over file values, file values over defaults).
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass

from .errors import ConfigError

ENV_CONFIG = "PNMA_CONFIG"


@dataclass
class TrainConfig:
    """Hyperparameters for both training phases plus model dimensions.

    Defaults are the full-scale settings: 100 epochs at 1e-3 halved after
    epochs 50 and 75, weight decay 1e-4, K=64 neighbors over a 15% memory,
    20 phase-2 epochs at a constant 4e-4.
    """

    epochs: int = 100
    base_lr: float = 1e-3
    lr_halving_epochs: tuple[int, ...] = (50, 75)
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 5.0
    clip_enabled: bool = False
    k_neighbors: int = 64
    memory_fraction: float = 0.15
    phase2_epochs: int = 20
    phase2_lr: float = 4e-4
    phase2_fresh_head: bool = False
    dropout_embed: float = 0.5
    dropout_layer: float = 0.1
    d_word: int = 64
    d_pred: int = 50
    d_hidden: int = 300
    n_layers: int = 4
    dtype: str = "float32"
    scheme: str = "bio-span"
    min_frequency: int = 2
    neighborhood_mode: str = "distinct"
    threads: int = 1

    def __post_init__(self) -> None:
        for name in ("base_lr", "phase2_lr", "memory_fraction"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        pts = tuple(self.lr_halving_epochs)
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ConfigError(f"lr_halving_epochs must be strictly increasing, got {pts}")
        self.lr_halving_epochs = pts
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.scheme not in ("bio-span", "per-token-role"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if not (0.0 <= self.dropout_embed < 1.0 and 0.0 <= self.dropout_layer < 1.0):
            raise ConfigError("dropout rates must lie in [0, 1)")

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch: halved after each schedule point."""
        halvings = sum(1 for p in self.lr_halving_epochs if epoch > p)
        return self.base_lr * (0.5 ** halvings)

    def to_echo(self) -> str:
        lines = ["format_version = 1"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


# keys that name files/directories rather than hyperparameters
PATH_KEYS = ("train", "valid", "test", "vocab", "checkpoint", "memory", "out", "out_dir")

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _convert(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name}: expected a boolean, got {raw!r}")
    if f.name == "lr_halving_epochs":
        if not raw:
            return ()
        return tuple(int(x) for x in raw.split(","))
    return raw


def parse_config_lines(lines, source: str) -> dict[str, str]:
    """key = value pairs, '#' comments, blank lines ignored."""
    out: dict[str, str] = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key == "format_version":
            continue
        if key not in _FIELDS and key not in PATH_KEYS:
            raise ConfigError(f"{source}:{no}: unknown config key {key!r}")
        out[key] = val.strip()
    return out


def load_run_config(
    path: str | None, overrides: dict[str, object] | None = None, quiet: bool = False
) -> tuple[TrainConfig, dict[str, str]]:
    """Merge defaults <- config file <- overrides; returns (config, path values).

    Defaulted hyperparameter keys are reported once on stderr so a run's
    effective configuration is never a surprise.
    """
    raw: dict[str, str] = {}
    if path is None:
        path = os.environ.get(ENV_CONFIG) or None
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = parse_config_lines(fh.read().splitlines(), path)
    paths = {k: v for k, v in raw.items() if k in PATH_KEYS}
    kwargs: dict[str, object] = {
        k: _convert(k, v) for k, v in raw.items() if k in _FIELDS
    }
    if overrides:
        for k, v in overrides.items():
            if v is None:
                continue
            if k in PATH_KEYS:
                paths[k] = str(v)
            elif k in _FIELDS:
                kwargs[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
    defaulted = sorted(set(_FIELDS) - set(kwargs))
    if defaulted and not quiet:
        print(f"config: using defaults for: {', '.join(defaulted)}", file=sys.stderr)
    try:
        cfg = TrainConfig(**kwargs)  # type: ignore[arg-type]
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, paths


def config_from_echo(echo: str) -> TrainConfig:
    """Rebuild a TrainConfig from a checkpoint's config echo."""
    raw = parse_config_lines(echo.splitlines(), "<checkpoint echo>")
    kwargs = {k: _convert(k, v) for k, v in raw.items() if k in _FIELDS}
    return TrainConfig(**kwargs)  # type: ignore[arg-type]
