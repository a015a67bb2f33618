"""
Parameter and FLOP bookkeeping.

Counts come in two independent flavours: :func:`count_params` walks a live
model's parameter registry, :func:`closed_form_counts` evaluates the layer
formulas from the configuration alone. They are expected to agree exactly.

FLOP convention: ``flops_per_mac`` FLOPs per multiply-accumulate (default 1,
the convention under which published ViT-B/16 costs are ~17.6 GFLOPs),
1 FLOP per output element for elementwise ops, 8 per element for layer norm
and 5 per element for softmax.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

from .model import Model, ModelConfig, is_trainable
from .prompt_gen import PROMPT_CHANNELS

GROUPS = ("backbone", "layernorm", "adapters", "prompt", "decoder")
LN_FLOPS = 8
SOFTMAX_FLOPS = 5

_LN = re.compile(r"^backbone\.(layer\d+\.ln[12]|norm)\.")


def group_of(name: str) -> str:
    if name.startswith("backbone."):
        if ".adapter_" in name:
            return "adapters"
        return "layernorm" if _LN.match(name) else "backbone"
    if name.startswith("prompt."):
        return "prompt"
    return "decoder"


@dataclass
class BudgetReport:
    variant: Optional[str]
    groups: Dict[str, int]
    trainable_groups: Dict[str, int]
    gflops: Optional[float] = None
    image_size: Optional[int] = None

    @property
    def total(self) -> int:
        return sum(self.groups.values())

    @property
    def trainable(self) -> int:
        return sum(self.trainable_groups.values())

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total

    def to_record(self) -> dict:
        rec = {"variant": self.variant}
        rec.update({g: self.groups[g] for g in GROUPS})
        rec.update(total=self.total, trainable=self.trainable, trainable_fraction=self.trainable_fraction)
        if self.gflops is not None:
            rec.update(gflops=self.gflops, image_size=self.image_size)
        return rec

    def to_text(self) -> str:
        lines = [f"variant: {self.variant}"]
        for g in GROUPS:
            lines.append(f"{g}: {self.groups[g]} ({self.groups[g] / 1e6:.3f}M)")
        lines.append(f"total: {self.total} ({self.total / 1e6:.2f}M)")
        lines.append(f"tuned: {self.trainable} ({self.trainable / 1e6:.2f}M)")
        lines.append(f"tuned_fraction: {100 * self.trainable_fraction:.2f}%")
        if self.gflops is not None:
            lines.append(f"gflops@{self.image_size}: {self.gflops:.3f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def count_params(model: Model) -> BudgetReport:
    groups = {g: 0 for g in GROUPS}
    tuned = {g: 0 for g in GROUPS}
    for p in model.named_params():
        g = group_of(p.name)
        groups[g] += p.tensor.size
        if p.trainable:
            tuned[g] += p.tensor.size
    return BudgetReport(model.cfg.variant_name, groups, tuned)


# closed forms ---------------------------------------------------------------


def _conv(c_in, c_out, k, bias=True):
    return c_in * c_out * k * k + (c_out if bias else 0)


def prompt_param_count() -> int:
    C = PROMPT_CHANNELS
    convs = _conv(3, C, 7, bias=False) + 6 * _conv(C, C, 3, bias=False)
    return convs + 7 * 2 * C


def decoder_param_count(embed_dim: int, use_prompt: bool, width: int = 256) -> int:
    D, W = embed_dim, width
    aspp = _conv(D, W, 1) + 3 * _conv(D, W, 3) + _conv(D, W, 1) + _conv(5 * W, W, 1)
    head = _conv(W + (PROMPT_CHANNELS if use_prompt else 0), W, 3) + _conv(W, W, 3) + _conv(W, 1, 1)
    return aspp + head


def adapter_param_count(cfg: ModelConfig) -> int:
    b = cfg.backbone
    return b.depth * 2 * 2 * b.embed_dim * b.bottleneck if cfg.use_adapters else 0


def closed_form_counts(cfg: ModelConfig) -> BudgetReport:
    b = cfg.backbone
    D, L, Hd, P = b.embed_dim, b.depth, b.hidden_dim, b.patch_size
    per_layer = (3 * D * D + 3 * D) + (D * D + D) + (D * Hd + Hd) + (Hd * D + D)
    groups = {
        "backbone": (D * 3 * P * P + D) + D + (b.num_patches + 1) * D + L * per_layer,
        "layernorm": L * 4 * D + 2 * D,
        "adapters": adapter_param_count(cfg),
        "prompt": prompt_param_count() if cfg.use_prompt else 0,
        "decoder": decoder_param_count(D, cfg.use_prompt, cfg.decoder_width),
    }
    probe = {
        "backbone": "backbone.patch_embed.weight",
        "layernorm": "backbone.norm.weight",
        "adapters": "backbone.layer0.adapter_msa.w_up",
        "prompt": "prompt.stem.conv.weight",
        "decoder": "decoder.head.conv1.weight",
    }
    tuned = {g: (n if is_trainable(probe[g], cfg) else 0) for g, n in groups.items()}
    return BudgetReport(cfg.variant_name, groups, tuned)


# flops ----------------------------------------------------------------------


@dataclass
class FlopBreakdown:
    parts: Dict[str, float] = field(default_factory=dict)

    def add(self, key: str, value: float) -> None:
        self.parts[key] = self.parts.get(key, 0.0) + value

    @property
    def total(self) -> float:
        return sum(self.parts.values())


def _conv_cost(c_in, c_out, k, h_out, w_out, mac) -> float:
    # bias adds are folded into the multiply-accumulate count
    return mac * c_in * c_out * k * k * h_out * w_out


def flop_breakdown(cfg: ModelConfig, image_size: Optional[int] = None, flops_per_mac: float = 1.0) -> FlopBreakdown:
    b = cfg.backbone
    s = b.image_size if image_size is None else image_size
    mac = flops_per_mac
    D, L, Hd, P, h = b.embed_dim, b.depth, b.hidden_dim, b.patch_size, b.num_heads
    N = (s // P) ** 2
    S = N + 1
    out = FlopBreakdown()

    out.add("patch_embed", mac * N * 3 * P * P * D + S * D)
    layer = (
        LN_FLOPS * S * D
        + mac * S * D * 3 * D
        + mac * S * S * D + h * S * S + SOFTMAX_FLOPS * h * S * S + mac * S * S * D
        + mac * S * D * D + S * D
        + LN_FLOPS * S * D
        + mac * S * D * Hd + S * Hd
        + mac * S * Hd * D + S * D
    )
    out.add("transformer", L * layer)
    out.add("final_norm", LN_FLOPS * S * D)
    if cfg.use_adapters:
        r = b.bottleneck
        out.add("adapters", L * 2 * (mac * S * D * r + S * r + mac * S * r * D))

    q = s // 4
    if cfg.use_prompt:
        C = PROMPT_CHANNELS
        s2 = s // 2
        stem = _conv_cost(3, C, 7, s2, s2, mac) + 3 * C * s2 * s2
        pool = 9 * C * q * q
        blocks = 3 * (2 * _conv_cost(C, C, 3, q, q, mac) + 2 * 2 * C * q * q + 3 * C * q * q)
        out.add("prompt", stem + pool + blocks)

    W = cfg.decoder_width
    g = s // P
    aspp = (
        _conv_cost(D, W, 1, g, g, mac) + 3 * _conv_cost(D, W, 3, g, g, mac)
        + D * g * g + _conv_cost(D, W, 1, 1, 1, mac)
        + _conv_cost(5 * W, W, 1, g, g, mac)
        + 5 * W * g * g + W * g * g
    )
    c_head = W + (PROMPT_CHANNELS if cfg.use_prompt else 0)
    head = (
        (W * q * q if P != 4 else 0)
        + _conv_cost(c_head, W, 3, q, q, mac) + W * q * q
        + _conv_cost(W, W, 3, q, q, mac) + W * q * q
        + _conv_cost(W, 1, 1, q, q, mac)
        + s * s
    )
    out.add("decoder", aspp + head)
    return out


def estimate_flops(cfg: ModelConfig, image_size: Optional[int] = None, flops_per_mac: float = 1.0) -> float:
    """Inference cost in GFLOPs for one image."""
    return flop_breakdown(cfg, image_size, flops_per_mac).total / 1e9


def adapter_overhead_closed_form(cfg: ModelConfig, image_size: Optional[int] = None, flops_per_mac: float = 1.0) -> float:
    """Matmul cost of all adapters in GFLOPs: 2 adapters x (N+1) tokens x 2 D^2/r MACs per layer."""
    b = cfg.backbone
    s = b.image_size if image_size is None else image_size
    S = (s // b.patch_size) ** 2 + 1
    return flops_per_mac * b.depth * 2 * S * (2 * b.embed_dim**2 // b.adapter_ratio) / 1e9


def budget(cfg: ModelConfig, image_size: Optional[int] = None, flops_per_mac: float = 1.0) -> BudgetReport:
    rep = closed_form_counts(cfg)
    rep.image_size = cfg.backbone.image_size if image_size is None else image_size
    rep.gflops = estimate_flops(cfg, rep.image_size, flops_per_mac)
    return rep


def storage_amortization(n_domains: int, backbone=None) -> Tuple[int, int]:
    """Parameters stored for ``n`` datasets: full fine-tuning vs one shared frozen backbone."""
    if n_domains < 1:
        raise ValueError("need at least one domain")
    base = closed_form_counts(ModelConfig.variant("base", backbone))
    avit = closed_form_counts(ModelConfig.variant("avit", backbone))
    frozen = avit.total - avit.trainable
    return n_domains * base.total, frozen + n_domains * avit.trainable
