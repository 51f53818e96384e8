"""Flat key=value configuration shared by the CLI, training, and inference.

Every field can be set in a config file (one ``key = value`` per line,
``#`` comments allowed) and overridden by CLI flags.  The canonical text
rendering feeds the checkpoint header hash, so a checkpoint records the
exact configuration that produced it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # geometry and widths
    proc_size: int = 64            # square working resolution for crops (multiple of 16)
    matching_channels: int = 32    # width of the level-3 matching feature
    encoding_channels: int = 16    # width of mask encodings
    backbone_widths: tuple = (16, 32, 64, 64)
    shared_reduction: bool = False  # share the channel-reduction conv between branches
    # transduction branch
    tau: float = 1.0 / 30.0
    attn_proj_div: int = 4         # query/key projection width = C / this
    transformer_layers: int = 1    # extra layers reuse the same projections
    encoder_norm_per_frame: bool = False
    # induction branch
    kernel_size: int = 3
    inner_steps_train: int = 5
    inner_steps_init: int = 10
    inner_steps_update: int = 2
    lambda_init: float = 0.1
    # online pipeline
    memory_capacity: int = 20
    memory_period: int = 5
    crop_factor: float = 5.0
    # offline training
    iters: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    n_train_frames: int = 4
    train_window: int = 100
    lambda_cos: float = 0.01
    augment: bool = True
    checkpoint_every: int = 500
    # ablation switches
    branches: str = "joint"        # joint | tb | ib
    label_heads: str = "two"       # two | single
    # misc
    seed: int = 0
    deterministic: bool = True
    _file: str = field(default="", repr=False, compare=False)

    def validate(self) -> None:
        if self.proc_size % 16 != 0 or self.proc_size <= 0:
            raise ConfigError(f"proc_size must be a positive multiple of 16, got {self.proc_size}")
        if len(self.backbone_widths) != 4:
            raise ConfigError("backbone_widths needs exactly 4 entries")
        if self.matching_channels % self.attn_proj_div != 0:
            raise ConfigError("matching_channels must be divisible by attn_proj_div")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.branches not in ("joint", "tb", "ib"):
            raise ConfigError(f"branches must be joint|tb|ib, got {self.branches!r}")
        if self.label_heads not in ("two", "single"):
            raise ConfigError(f"label_heads must be two|single, got {self.label_heads!r}")
        if self.memory_capacity < 1 or self.memory_period < 1:
            raise ConfigError("memory capacity and period must be >= 1")


_SKIP = {"_file"}


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "on", "yes"):
                return True
            if raw.lower() in ("0", "false", "off", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> Config:
    cfg = Config()
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(Config)}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key in _SKIP or key not in kinds:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _parse_value(key, raw, kinds[key]))
        cfg._file = str(path)
    for key, value in (overrides or {}).items():
        if key not in kinds or key in _SKIP:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value, kinds[key])
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def canonical_text(cfg: Config) -> str:
    lines = []
    for f in sorted(fields(Config), key=lambda f: f.name):
        if f.name in _SKIP:
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: Config) -> bytes:
    return hashlib.sha256(canonical_text(cfg).encode()).digest()


def write_config(cfg: Config, path: str | Path) -> None:
    """Echo the effective configuration for provenance."""
    Path(path).write_text(canonical_text(cfg))
