"""Shallow CNN prompt generator: the ResNet-34 stem plus its first stage."""
from __future__ import annotations

from . import tensor as T
from .errors import ConfigError
from .nn import Module, ParamFactory
from .tensor import Tensor

PROMPT_CHANNELS = 64


class BatchNorm2d(Module):
    def __init__(self, channels: int, f: ParamFactory, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = f.ones((channels,))
        self.bias = f.zeros((channels,))
        self.register_buffer("running_mean", f.buffer((channels,), 0.0))
        self.register_buffer("running_var", f.buffer((channels,), 1.0))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, f: ParamFactory, stride=1, padding=0, dilation=1, bias=True, init="he"):
        super().__init__()
        fan_in = c_in * k * k
        if init == "he":
            self.weight = f.he_normal((c_out, c_in, k, k), fan_in)
        else:
            self.weight = f.uniform((c_out, c_in, k, k), fan_in**-0.5)
        self.bias = f.uniform((c_out,), fan_in**-0.5) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Stem(Module):
    def __init__(self, f: ParamFactory):
        super().__init__()
        self.conv = Conv2d(3, PROMPT_CHANNELS, 7, f, stride=2, padding=3, bias=False)
        self.bn = BatchNorm2d(PROMPT_CHANNELS, f)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class BasicBlock(Module):
    def __init__(self, channels: int, f: ParamFactory):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, f, padding=1, bias=False)
        self.bn1 = BatchNorm2d(channels, f)
        self.conv2 = Conv2d(channels, channels, 3, f, padding=1, bias=False)
        self.bn2 = BatchNorm2d(channels, f)

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return T.relu(T.add(out, x))


class PromptGenerator(Module):
    """Maps an image (B,3,H,W) to the prompt embedding T of shape (B,64,H/4,W/4)."""

    def __init__(self, f: ParamFactory):
        super().__init__()
        self.stem = Stem(f.spawn("stem"))
        self.blocks = []
        for i in range(3):
            block = BasicBlock(PROMPT_CHANNELS, f.spawn(f"block{i}"))
            setattr(self, f"block{i}", block)
            self.blocks.append(block)

    def forward(self, image: Tensor) -> Tensor:
        _, _, H, W = image.shape
        if H % 4 or W % 4:
            raise ConfigError(f"prompt generator needs H, W divisible by 4, got {H}x{W}")
        x = T.maxpool2d(self.stem(image), 3, 2, 1)
        for block in self.blocks:
            x = block(x)
        return x

    def convs(self):
        return [m for _, m in self.named_modules() if isinstance(m, Conv2d)]


def count_prompt_params(g: PromptGenerator) -> int:
    """Learnable scalars: conv weights plus BatchNorm affine terms."""
    return int(sum(p.size for _, p in g.named_parameters()))
