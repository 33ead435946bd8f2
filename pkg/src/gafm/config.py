"""Flat ``key = value`` run configuration.

Recognised keys (all optional)::

    seed            int      0
    stem_width      int      16
    widths          ints     16,32,64
    blocks          ints     2,2,2
    strides         ints     1,2,2
    input_size      int      64
    se_ratio        int      16
    lr              float    0.001
    batch_size      int      32
    epochs_phase1   int      100
    epochs_phase2   int      50
    k               int      5
    val_fold        int      0
    patience        int      10
    factor          float    0.1
    threshold       float    0.0001
    min_lr          float    1e-06
    precision       str      single | double
    augment         bool     true
    vnn_hidden      ints     64,32
    phase1_checkpoint path   (train-phase2 only)

Blank lines and ``#`` comments are ignored. Command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .model import GafmConfig
from .training import TrainConfig

__all__ = ["ConfigFileError", "RunConfig", "parse_config", "load_config"]


class ConfigFileError(ValueError):
    """Malformed or invalid run configuration."""


def _ints(v: str) -> tuple:
    return tuple(int(p) for p in v.replace(" ", "").split(",") if p)


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    seed: int = 0
    stem_width: int = 16
    widths: tuple = (16, 32, 64)
    blocks: tuple = (2, 2, 2)
    strides: tuple = (1, 2, 2)
    input_size: int = 64
    se_ratio: int = 16
    lr: float = 1e-3
    batch_size: int = 32
    epochs_phase1: int = 100
    epochs_phase2: int = 50
    k: int = 5
    val_fold: int = 0
    patience: int = 10
    factor: float = 0.1
    threshold: float = 1e-4
    min_lr: float = 1e-6
    precision: str = "single"
    augment: bool = True
    vnn_hidden: tuple = (64, 32)
    phase1_checkpoint: Optional[str] = None
    paths: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigFileError(f"lr must be > 0, got {self.lr}")
        if self.k < 2:
            raise ConfigFileError(f"k must be >= 2, got {self.k}")
        if not 0 <= self.val_fold < self.k:
            raise ConfigFileError(f"val_fold must lie in 0..{self.k - 1}")
        if self.precision not in ("single", "double"):
            raise ConfigFileError(f"precision must be single or double, got {self.precision!r}")
        if len(self.vnn_hidden) != 2:
            raise ConfigFileError("vnn_hidden needs exactly two sizes")
        for name, p in self.paths.items():
            if p is not None and not Path(p).exists():
                raise ConfigFileError(f"{name}: {p} does not exist")

    def model_config(self) -> GafmConfig:
        return GafmConfig(self.stem_width, self.widths, self.blocks, self.strides,
                          self.input_size, 3, self.se_ratio)

    def train_config(self, phase: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs_phase1 if phase == 1 else self.epochs_phase2,
            k=self.k,
            seed=self.seed,
            val_fold=self.val_fold,
            patience=self.patience,
            factor=self.factor,
            threshold=self.threshold,
            min_lr=self.min_lr,
            precision=self.precision,
            augment=self.augment,
        )


_PARSERS = {
    "widths": _ints,
    "blocks": _ints,
    "strides": _ints,
    "vnn_hidden": _ints,
    "augment": _bool,
    "precision": str.strip,
    "phase1_checkpoint": str.strip,
}


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    known = {f.name: f for f in fields(RunConfig) if f.name != "paths"}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigFileError(f"line {lineno}: expected key = value")
        if key not in known:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        default = getattr(RunConfig, key, None)
        conv = _PARSERS.get(key) or type(default)
        try:
            setattr(cfg, key, conv(value))
        except ValueError as exc:
            raise ConfigFileError(f"line {lineno}: {key}: {exc}") from None
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
