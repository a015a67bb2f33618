"""Flat ``key=value`` run configuration."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Optional, Union

from .backbone import BackboneConfig
from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    """Defaults follow the ViT-B/16 recipe; desk-scale runs override them."""

    image_size: int = 224
    patch: int = 16
    dim: int = 768
    depth: int = 12
    heads: int = 12
    adapter_ratio: int = 4
    variant: str = "avit"
    epochs: int = 200
    batch: int = 16
    lr: float = 1e-4
    seed: int = 0
    steps: Optional[int] = None
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        for name in ("image_size", "patch", "dim", "depth", "heads", "adapter_ratio", "epochs", "batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        # surfaces divisibility errors at parse time
        self.model_config()

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            image_size=self.image_size, patch_size=self.patch, embed_dim=self.dim,
            depth=self.depth, num_heads=self.heads, adapter_ratio=self.adapter_ratio,
        )

    def model_config(self, variant: Optional[str] = None) -> ModelConfig:
        return ModelConfig.variant(variant or self.variant, self.backbone_config())

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch, lr=self.lr, seed=self.seed, max_steps=self.steps)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _convert(name: str, raw: str, typ):
    if typ in ("int", "Optional[int]"):
        if typ == "Optional[int]" and raw.lower() in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if typ == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, types[key])
    return RunConfig(**values)


def load_config(path: Union[str, os.PathLike, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={'' if v is None else v}")
    return "\n".join(lines) + "\n"
