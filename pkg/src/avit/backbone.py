"""Plain ViT encoder with optional bottleneck adapters after MSA and MLP."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Module, ParamFactory
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    adapter_ratio: int = 4
    adapters_enabled: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}")
        if self.embed_dim % self.adapter_ratio:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by adapter ratio {self.adapter_ratio}")
        if min(self.image_size, self.patch_size, self.embed_dim, self.depth, self.num_heads) < 1:
            raise ConfigError("backbone sizes must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def bottleneck(self) -> int:
        return self.embed_dim // self.adapter_ratio


VIT_B16 = BackboneConfig()
VIT_L16 = BackboneConfig(embed_dim=1024, depth=24, num_heads=16)
TOY = BackboneConfig(image_size=32, patch_size=4, embed_dim=32, depth=2, num_heads=4)


class LayerNorm(Module):
    def __init__(self, dim: int, f: ParamFactory, eps: float = 1e-6):
        super().__init__()
        self.weight = f.ones((dim,))
        self.bias = f.zeros((dim,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, f: ParamFactory):
        super().__init__()
        self.weight = f.trunc_normal((d_out, d_in), 0.02)
        self.bias = f.zeros((d_out,))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Adapter(Module):
    """GELU(x @ w_down) @ w_up, no biases. ``w_up`` starts at zero."""

    def __init__(self, dim: int, ratio: int, f: ParamFactory):
        super().__init__()
        self.w_down = f.uniform((dim, dim // ratio), 1.0 / math.sqrt(dim))
        self.w_up = f.zeros((dim // ratio, dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(T.gelu(T.matmul(x, self.w_down)), self.w_up)


class PatchEmbed(Module):
    def __init__(self, cfg: BackboneConfig, f: ParamFactory):
        super().__init__()
        self.patch = cfg.patch_size
        self.image_size = cfg.image_size
        self.weight = f.trunc_normal((cfg.embed_dim, 3 * cfg.patch_size**2), 0.02)
        self.bias = f.zeros((cfg.embed_dim,))

    def forward(self, image: Tensor) -> Tensor:
        B, C, H, W = image.shape
        P = self.patch
        if H % P or W % P:
            raise ConfigError(f"image {H}x{W} not divisible by patch size {P}")
        if C != 3 or H != self.image_size or W != self.image_size:
            raise DimensionError(f"expected image (B,3,{self.image_size},{self.image_size}), got {image.shape}")
        gh, gw = H // P, W // P
        x = T.reshape(image, (B, C, gh, P, gw, P))
        # raster over the grid; each patch flattened channel-major
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (B, gh * gw, C * P * P))
        return T.linear(x, self.weight, self.bias)


def msa_forward(z: Tensor, qkv: Linear, proj: Linear, heads: int) -> Tensor:
    """Multi-head self-attention, softmax(QK^T / sqrt(d)) V per head."""
    B, S, D = z.shape
    d = D // heads
    x = T.reshape(qkv(z), (B, S, 3, heads, d))
    x = T.transpose(x, (2, 0, 3, 1, 4))
    q, k, v = x[0], x[1], x[2]
    attn = T.softmax_lastdim(T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d)))
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, S, D))
    return proj(out)


class TransformerLayer(Module):
    """Pre-norm ViT layer.

    Checkpoint names keep the flat layout ``layer{i}.{ln1,qkv,proj,ln2,fc1,fc2}``,
    so the attention and MLP projections live directly on the layer.
    """

    def __init__(self, cfg: BackboneConfig, f: ParamFactory, with_adapters: bool):
        super().__init__()
        D = cfg.embed_dim
        self.heads = cfg.num_heads
        self.ln1 = LayerNorm(D, f, cfg.ln_eps)
        self.qkv = Linear(D, 3 * D, f)
        self.proj = Linear(D, D, f)
        self.ln2 = LayerNorm(D, f, cfg.ln_eps)
        self.fc1 = Linear(D, cfg.hidden_dim, f)
        self.fc2 = Linear(cfg.hidden_dim, D, f)
        self.adapter_msa: Optional[Adapter] = None
        self.adapter_mlp: Optional[Adapter] = None
        if with_adapters:
            fa = f.spawn("adapters")
            self.adapter_msa = Adapter(D, cfg.adapter_ratio, fa)
            self.adapter_mlp = Adapter(D, cfg.adapter_ratio, fa)

    def msa(self, z: Tensor) -> Tensor:
        return msa_forward(z, self.qkv, self.proj, self.heads)

    def mlp(self, z: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(z)))

    def forward(self, z: Tensor, adapters_enabled: bool = False) -> Tensor:
        if adapters_enabled:
            if self.adapter_msa is None:
                raise ConfigError("adapters requested but this layer was built without them")
            z1 = T.add(self.adapter_msa(self.msa(self.ln1(z))), z)
            return T.add(self.adapter_mlp(self.mlp(self.ln2(z1))), z1)
        z1 = T.add(self.msa(self.ln1(z)), z)
        return T.add(self.mlp(self.ln2(z1)), z1)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, f: ParamFactory, with_adapters: Optional[bool] = None):
        super().__init__()
        self.cfg = cfg
        if with_adapters is None:
            with_adapters = cfg.adapters_enabled
        self.adapters_enabled = bool(with_adapters)
        D = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg, f)
        self.class_token = f.trunc_normal((1, D), 0.02)
        self.pos_embed = f.trunc_normal((cfg.num_patches + 1, D), 0.02)
        self.layers: List[TransformerLayer] = []
        for i in range(cfg.depth):
            layer = TransformerLayer(cfg, f.spawn(f"layer{i}"), with_adapters)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)
        self.norm = LayerNorm(D, f, cfg.ln_eps)

    def embed(self, image: Tensor) -> Tensor:
        """Patch embedding, class token and position embedding: z0."""
        return prepend_and_position(self.patch_embed(image), self.class_token, self.pos_embed)

    def forward(self, image: Tensor, adapters: Optional[bool] = None, return_layers: bool = False):
        use = self.adapters_enabled if adapters is None else adapters
        z = self.embed(image)
        states = [z]
        for layer in self.layers:
            z = layer(z, use)
            states.append(z)
        V = extract_feature_map(self.norm(z))
        return (V, states) if return_layers else V


def prepend_and_position(x: Tensor, class_token: Tensor, pos_embed: Tensor) -> Tensor:
    B, N, D = x.shape
    if pos_embed.shape != (N + 1, D):
        raise DimensionError(f"pos_embed {pos_embed.shape} does not fit {N} tokens of width {D}")
    cls = T.broadcast_to(T.reshape(class_token, (1, 1, D)), (B, 1, D))
    return T.add(T.concat([cls, x], axis=1), pos_embed)


def extract_feature_map(z: Tensor) -> Tensor:
    """Drop the class token and lay tokens back on the patch grid: (B, D, g, g)."""
    B, S, D = z.shape
    N = S - 1
    g = int(math.isqrt(N))
    if g * g != N:
        raise ConfigError(f"{N} patch tokens do not form a square grid")
    x = T.reshape(z[:, 1:, :], (B, g, g, D))
    return T.transpose(x, (0, 3, 1, 2))
