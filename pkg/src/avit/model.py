"""Model variants (BASE, BASE*, AViT and its ablations) and the freezing contract."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .backbone import Backbone, BackboneConfig
from .decoder import Decoder
from .errors import ConfigError, DimensionError
from .nn import Module, ParamFactory
from .prompt_gen import PromptGenerator
from .tensor import Tensor

# use_adapters, use_prompt, freeze_backbone, tune_backbone_norms
VARIANTS: Dict[str, tuple] = {
    "avit": (True, True, True, True),
    "base": (False, False, False, False),
    "base_star": (False, False, True, False),
    "no_adapter": (False, True, True, True),
    "no_prompt": (True, False, True, True),
}

_LN_NAME = re.compile(r"^backbone\.(layer\d+\.ln[12]|norm)\.")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    use_adapters: bool = True
    use_prompt: bool = True
    freeze_backbone: bool = True
    tune_backbone_norms: bool = True
    decoder_width: int = 256

    def __post_init__(self):
        if self.backbone.adapters_enabled != self.use_adapters:
            object.__setattr__(
                self, "backbone", dataclasses.replace(self.backbone, adapters_enabled=self.use_adapters)
            )
        if self.use_prompt and self.backbone.image_size % 4:
            raise ConfigError("prompt generator needs an image size divisible by 4")
        if self.backbone.patch_size % 4:
            raise ConfigError("patch size must be a multiple of 4 to meet the prompt resolution")
        if self.decoder_width < 1:
            raise ConfigError("decoder width must be positive")

    @classmethod
    def variant(cls, name: str, backbone: Optional[BackboneConfig] = None, **kw) -> "ModelConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        a, p, fr, ln = VARIANTS[name]
        return cls(
            backbone=backbone or BackboneConfig(), use_adapters=a, use_prompt=p,
            freeze_backbone=fr, tune_backbone_norms=ln, **kw,
        )

    @property
    def variant_name(self) -> Optional[str]:
        key = (self.use_adapters, self.use_prompt, self.freeze_backbone, self.tune_backbone_norms)
        for name, flags in VARIANTS.items():
            if flags == key:
                return name
        return None


@dataclass
class NamedParam:
    name: str
    tensor: Tensor
    trainable: bool


def is_trainable(name: str, cfg: ModelConfig) -> bool:
    """The tuned set: adapters, prompt generator, backbone layer norms, decoder."""
    if not cfg.freeze_backbone or not name.startswith("backbone."):
        return True
    if ".adapter_" in name:
        return True
    return bool(cfg.tune_backbone_norms and _LN_NAME.match(name))


class Model(Module):
    def __init__(self, cfg: ModelConfig, f: ParamFactory):
        super().__init__()
        self.cfg = cfg
        bc = cfg.backbone
        self.backbone = Backbone(bc, f.spawn("backbone"), with_adapters=cfg.use_adapters)
        self.prompt = PromptGenerator(f.spawn("prompt")) if cfg.use_prompt else None
        self.decoder = Decoder(bc.embed_dim, bc.patch_size, f.spawn("decoder"), cfg.use_prompt, cfg.decoder_width)
        self.apply_freezing()

    def apply_freezing(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad = is_trainable(name, self.cfg)

    def named_params(self) -> List[NamedParam]:
        return [NamedParam(n, p, is_trainable(n, self.cfg)) for n, p in self.named_parameters()]

    def features(self, image: Tensor) -> Tensor:
        return self.backbone(image)

    def forward(self, image: Tensor) -> Tensor:
        s = self.cfg.backbone.image_size
        if image.ndim != 4 or image.shape[1:] != (3, s, s):
            raise DimensionError(f"expected image batch (B,3,{s},{s}), got {image.shape}")
        V = self.backbone(image)
        prompt = self.prompt(image) if self.prompt is not None else None
        return self.decoder(V, prompt)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32, materialize: bool = True) -> Model:
    """Deterministically initialise a model; ``materialize=False`` gives a shape-only model."""
    return Model(cfg, ParamFactory(seed, dtype, materialize))


def trainable_parameters(model: Model) -> List[NamedParam]:
    return [p for p in model.named_params() if p.trainable]


def frozen_parameters(model: Model) -> List[NamedParam]:
    return [p for p in model.named_params() if not p.trainable]
