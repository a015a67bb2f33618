"""Finite-difference checks for every primitive op and every trainable group of a toy model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .analysis import group_of
from .backbone import TOY, BackboneConfig
from .model import ModelConfig, build_model
from .tensor import Tensor, finite_diff_check
from .train import combined_loss, dice_loss

TOLERANCE = 1e-4
STEP = 1e-4
MODEL_STEP = 1e-3
STRICT_STEPS = (1e-5, 1e-6, 1e-7)

Builder = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[np.ndarray]]]


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape) -> np.ndarray:
    # well-separated values so max-pool winners never swap under a +-h nudge
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.05 + rng.uniform(-0.01, 0.01, shape)).astype(np.float64)


def _op_cases() -> Dict[str, Builder]:
    n = lambda rng, *s: rng.standard_normal(s)
    c: Dict[str, Builder] = {}
    c["add"] = lambda r: (lambda a, b: a + b, [n(r, 3, 4), n(r, 4)])
    c["sub"] = lambda r: (lambda a, b: a - b, [n(r, 3, 4), n(r, 3, 1)])
    c["mul"] = lambda r: (lambda a, b: a * b, [n(r, 2, 3, 4), n(r, 3, 4)])
    c["div"] = lambda r: (lambda a, b: a / b, [n(r, 3, 4), r.uniform(0.5, 2.0, (3, 4))])
    c["matmul"] = lambda r: (T.matmul, [n(r, 2, 3, 5), n(r, 5, 4)])
    c["linear"] = lambda r: (T.linear, [n(r, 6, 5), n(r, 4, 5), n(r, 4)])
    c["sum"] = lambda r: (lambda a: T.sum(a, axis=1, keepdims=True), [n(r, 3, 4, 2)])
    c["mean"] = lambda r: (lambda a: T.mean(a, axis=(0, 2)), [n(r, 3, 4, 2)])
    c["reshape"] = lambda r: (lambda a: T.reshape(a, (4, 6)), [n(r, 2, 3, 4)])
    c["transpose"] = lambda r: (lambda a: T.transpose(a, (2, 0, 1)), [n(r, 2, 3, 4)])
    c["concat"] = lambda r: (lambda a, b: T.concat([a, b], axis=1), [n(r, 2, 3), n(r, 2, 4)])
    c["getitem"] = lambda r: (lambda a: a[:, 1:3], [n(r, 3, 4)])
    c["broadcast_to"] = lambda r: (lambda a: T.broadcast_to(a, (3, 2, 4)), [n(r, 1, 4)])
    c["relu"] = lambda r: (T.relu, [_away_from_zero(n(r, 4, 5))])
    c["sigmoid"] = lambda r: (T.sigmoid, [3 * n(r, 4, 5)])
    c["erf"] = lambda r: (T.erf, [n(r, 4, 5)])
    c["gelu"] = lambda r: (T.gelu, [2 * n(r, 4, 5)])
    c["softmax_lastdim"] = lambda r: (T.softmax_lastdim, [2 * n(r, 3, 6)])
    c["layernorm"] = lambda r: (T.layernorm, [n(r, 3, 8), 1 + 0.2 * n(r, 8), n(r, 8)])

    def bn(training):
        def build(r):
            mean, var = 0.1 * n(r, 3), r.uniform(0.5, 1.5, 3)
            f = lambda x, g, b: T.batchnorm2d(x, g, b, mean.copy(), var.copy(), training=training)
            return f, [n(r, 2, 3, 4, 4), 1 + 0.2 * n(r, 3), n(r, 3)]
        return build

    c["batchnorm2d_train"] = bn(True)
    c["batchnorm2d_eval"] = bn(False)
    c["conv2d"] = lambda r: (
        lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), [n(r, 2, 3, 5, 5), n(r, 4, 3, 3, 3), n(r, 4)]
    )
    c["conv2d_strided"] = lambda r: (lambda x, w: T.conv2d(x, w, stride=2, padding=3), [n(r, 1, 2, 9, 9), n(r, 3, 2, 7, 7)])
    c["conv2d_dilated"] = lambda r: (
        lambda x, w: T.conv2d(x, w, padding=2, dilation=2), [n(r, 1, 2, 6, 6), n(r, 2, 2, 3, 3)]
    )
    c["maxpool2d"] = lambda r: (lambda x: T.maxpool2d(x, 3, 2, 1), [_distinct(r, (2, 2, 6, 6))])
    c["global_avgpool2d"] = lambda r: (T.global_avgpool2d, [n(r, 2, 3, 4, 4)])
    c["upsample_bilinear"] = lambda r: (lambda x: T.upsample_bilinear(x, 4), [n(r, 1, 2, 3, 3)])

    def bce(r):
        y = r.integers(0, 2, (2, 1, 4, 4)).astype(np.float64)
        return (lambda x: T.bce_with_logits(x, y)), [3 * n(r, 2, 1, 4, 4)]

    c["bce_with_logits"] = bce
    c["dice_loss"] = lambda r: (lambda x: dice_loss(x, np.eye(4)[None, None].repeat(2, 0)), [n(r, 2, 1, 4, 4)])
    c["combined_loss"] = lambda r: (lambda x: combined_loss(x, np.eye(4)[None, None].repeat(2, 0)), [n(r, 2, 1, 4, 4)])
    return c


OP_CASES = _op_cases()


def check_op(name: str, trials: int = 10, seed: int = 0, h: float = STEP) -> float:
    """Worst relative FD error of op ``name`` over ``trials`` random draws, all inputs."""
    build = OP_CASES[name]
    worst = 0.0
    with T.precision(np.float64):
        for t in range(trials):
            rng = np.random.default_rng([seed, t])
            fn, arrays = build(rng)
            inputs = [Tensor(a) for a in arrays]
            out_shape = fn(*inputs).shape
            weight = rng.standard_normal(out_shape)
            for k, target in enumerate(inputs):

                def f(x, k=k):
                    args = list(inputs)
                    args[k] = x
                    out = fn(*args)
                    return T.sum(out * weight) if out.ndim else out

                worst = max(worst, finite_diff_check(f, target, h))
    return worst


@dataclass
class GradcheckResult:
    ops: Dict[str, float]
    groups: Dict[str, float]
    strict_groups: Dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max([*self.ops.values(), *self.groups.values(), *self.strict_groups.values()])

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE

    def lines(self) -> List[str]:
        out = []
        for kind, table in (("op", self.ops), ("group", self.groups), ("strict", self.strict_groups)):
            for k, v in table.items():
                out.append(f"{kind} {k}: max_rel_err={v:.3e} {'ok' if v < TOLERANCE else 'FAIL'}")
        return out


def check_model_groups(
    variant: str,
    backbone: BackboneConfig = TOY,
    seed: int = 0,
    per_tensor: int = 3,
    batch: int = 2,
    h: float = MODEL_STEP,
    strict: bool = False,
) -> Dict[str, float]:
    """Worst FD error per trainable group, sampling ``per_tensor`` entries of every trainable tensor.

    ``strict`` instead checks each tensor's largest-gradient entry with a purely
    relative error, so tiny gradients are not excused by the ``max(1, |g|)``
    denominator. ReLU and max-pool kinks spoil large steps and roundoff spoils
    small ones, so the best step of a short ladder is reported.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        model = build_model(ModelConfig.variant(variant, backbone), seed, dtype=np.float64)
        # nonzero W_up so gradients reach the down projections too
        for name, p in model.named_parameters():
            if name.endswith(".w_up"):
                p.data[...] = 0.1 * rng.standard_normal(p.shape)
        s = backbone.image_size
        x = rng.uniform(0, 1, (batch, 3, s, s))
        y = (rng.uniform(0, 1, (batch, 1, s, s)) > 0.6).astype(np.float64)
        model.train()
        loss = lambda _: combined_loss(model(Tensor(x)), y)
        if strict:
            model.zero_grad()
            with T.tape_scope() as tape:
                T.backward(loss(None), tape)
            grads = {p.name: p.tensor.grad.copy() for p in model.named_params() if p.trainable}
        worst: Dict[str, float] = {}
        for p in model.named_params():
            if not p.trainable:
                continue
            if strict:
                idx = [np.unravel_index(int(np.argmax(np.abs(grads[p.name]))), p.tensor.shape)]
                err = min(finite_diff_check(loss, p.tensor, h_, idx, floor=1e-30) for h_ in STRICT_STEPS)
            else:
                flat = rng.choice(p.tensor.size, size=min(per_tensor, p.tensor.size), replace=False)
                idx = [np.unravel_index(int(i), p.tensor.shape) for i in flat]
                err = finite_diff_check(loss, p.tensor, h, idx)
            g = group_of(p.name)
            worst[g] = max(worst.get(g, 0.0), err)
    return worst


def run_suite(
    backbone: BackboneConfig = TOY,
    seed: int = 0,
    trials: int = 10,
    variants: Sequence[str] = ("avit", "base"),
) -> GradcheckResult:
    """All ops plus every trainable group; ``base`` covers the backbone weights AViT freezes."""
    ops = {name: check_op(name, trials, seed) for name in OP_CASES}
    groups: Dict[str, float] = {}
    strict: Dict[str, float] = {}
    for v in variants:
        for table, flag in ((groups, False), (strict, True)):
            for g, e in check_model_groups(v, backbone, seed, strict=flag).items():
                table[g] = max(table.get(g, 0.0), e)
    return GradcheckResult(ops, groups, strict)
