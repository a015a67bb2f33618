"""Lightweight decoder: ASPP on the ViT feature map, fusion with the prompt, conv head."""
from __future__ import annotations

from typing import Optional, Sequence

from . import tensor as T
from .errors import DimensionError
from .nn import Module, ParamFactory
from .prompt_gen import PROMPT_CHANNELS, Conv2d
from .tensor import Tensor

ASPP_DILATIONS = (6, 12, 18)


class ASPP(Module):
    def __init__(self, c_in: int, f: ParamFactory, c_out: int = 256, dilations: Sequence[int] = ASPP_DILATIONS):
        super().__init__()
        self.c_out = c_out
        self.branch0 = Conv2d(c_in, c_out, 1, f, init="uniform")
        for i, d in enumerate(dilations, start=1):
            setattr(self, f"branch{i}", Conv2d(c_in, c_out, 3, f, padding=d, dilation=d, init="uniform"))
        self.n_rates = len(dilations)
        self.pool = Conv2d(c_in, c_out, 1, f, init="uniform")
        self.fuse = Conv2d((self.n_rates + 2) * c_out, c_out, 1, f, init="uniform")

    def forward(self, V: Tensor) -> Tensor:
        B, _, h, w = V.shape
        outs = [T.relu(self.branch0(V))]
        for i in range(1, self.n_rates + 1):
            outs.append(T.relu(getattr(self, f"branch{i}")(V)))
        pooled = T.relu(self.pool(T.global_avgpool2d(V)))
        outs.append(T.broadcast_to(pooled, (B, self.c_out, h, w)))
        return T.relu(self.fuse(T.concat(outs, axis=1)))


class ProjectionHead(Module):
    def __init__(self, c_in: int, f: ParamFactory, width: int = 256):
        super().__init__()
        self.conv1 = Conv2d(c_in, width, 3, f, padding=1, init="uniform")
        self.conv2 = Conv2d(width, width, 3, f, padding=1, init="uniform")
        self.conv3 = Conv2d(width, 1, 1, f, init="uniform")

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        return self.conv3(x)


class Decoder(Module):
    """ASPP(V) -> upsample to the prompt's stride -> concat T -> head -> upsample to input size.

    ``patch_size`` is the ViT stride; the head works at stride 4 (the prompt's
    resolution) whether or not a prompt is used.
    """

    def __init__(self, embed_dim: int, patch_size: int, f: ParamFactory, use_prompt: bool = True, width: int = 256):
        super().__init__()
        if patch_size % 4:
            raise DimensionError(f"patch size {patch_size} must be a multiple of the prompt stride 4")
        self.v_factor = patch_size // 4
        self.use_prompt = use_prompt
        self.aspp = ASPP(embed_dim, f.spawn("aspp"), width)
        c_head = width + (PROMPT_CHANNELS if use_prompt else 0)
        self.head = ProjectionHead(c_head, f.spawn("head"), width)

    def forward(self, V: Tensor, prompt: Optional[Tensor] = None) -> Tensor:
        v_hat = T.upsample_bilinear(self.aspp(V), self.v_factor)
        if self.use_prompt:
            if prompt is None:
                raise DimensionError("decoder was built with a prompt input but none was given")
            if prompt.shape[2:] != v_hat.shape[2:] or prompt.shape[0] != v_hat.shape[0]:
                raise DimensionError(
                    f"prompt {prompt.shape} does not match upsampled feature {v_hat.shape}"
                )
            v_hat = T.concat([v_hat, prompt], axis=1)
        return T.upsample_bilinear(self.head(v_hat), 4)


def count_decoder_params(d: Decoder) -> int:
    return int(sum(p.size for _, p in d.named_parameters()))
