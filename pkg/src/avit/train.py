"""Losses, AdamW, step-decay schedule, augmentation, training and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ContractError, InputError
from .model import Model, NamedParam, trainable_parameters
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    """RGB image in [0, 1] with shape (3, H, W) and a binary mask (1, H, W)."""

    image: np.ndarray
    mask: np.ndarray
    id: str = ""


# losses ---------------------------------------------------------------------


def dice_loss(logits: Tensor, mask, smooth: float = 1.0) -> Tensor:
    """Soft Dice over the whole batch: 1 - (2 sum(p*y) + s) / (sum p + sum y + s)."""
    m = T.as_tensor(np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=logits.dtype))
    p = T.sigmoid(logits)
    inter = T.sum(T.mul(p, m))
    num = T.add(T.scale(inter, 2.0), smooth)
    den = T.add(T.add(T.sum(p), float(m.data.sum())), smooth)
    return T.sub(1.0, T.div(num, den))


def bce_loss(logits: Tensor, mask) -> Tensor:
    return T.bce_with_logits(logits, np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=logits.dtype))


def combined_loss(logits: Tensor, mask, dice_weight: float = 0.5) -> Tensor:
    return T.add(T.scale(dice_loss(logits, mask), dice_weight), T.scale(bce_loss(logits, mask), 1.0 - dice_weight))


# optimizer ------------------------------------------------------------------


def decays(p: NamedParam) -> bool:
    """Weight decay goes to weight matrices and kernels only."""
    leaf = p.name.rsplit(".", 1)[-1]
    return p.tensor.ndim >= 2 and leaf not in ("class_token", "pos_embed")


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[NamedParam], state: OptimState, lr: Optional[float] = None) -> None:
    """One decoupled-weight-decay Adam update, in place on every trainable tensor."""
    lr = state.lr if lr is None else lr
    for p in params:
        if p.trainable and p.tensor.grad is None:
            raise ContractError(f"no gradient for trainable parameter {p.name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        if not p.trainable:
            continue
        x = p.tensor.data
        g = p.tensor.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(x)
            state.v[p.name] = np.zeros_like(x)
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay and decays(p):
            x -= x.dtype.type(lr * state.weight_decay) * x
        x -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(x.dtype)


# schedule -------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    step_size: int = 50
    gamma: float = 0.5
    weight_decay: float = 0.01
    seed: int = 0
    max_steps: Optional[int] = None
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.step_size < 1:
            raise InputError("epochs, batch_size, lr and step_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise InputError("max_steps must be positive")


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Step decay: lr0 * gamma ** floor(epoch / step_size)."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


# augmentation ---------------------------------------------------------------


@dataclass
class AugmentParams:
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False
    noise_sigma: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def is_identity_affine(self) -> bool:
        return self.scale == 1.0 and self.shift == (0.0, 0.0) and self.angle == 0.0


def draw_augment(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        scale=float(rng.uniform(0.9, 1.1)),
        shift=(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1))),
        angle=float(rng.uniform(-30.0, 30.0)),
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        noise_sigma=float(rng.uniform(0.0, 0.05)),
        brightness=float(rng.uniform(-0.2, 0.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
    )


def apply_augment(sample: Sample, a: AugmentParams, rng: np.random.Generator) -> Sample:
    img = sample.image
    mask = sample.mask
    H, W = img.shape[1:]
    if not a.is_identity_affine:
        th = math.radians(a.angle)
        # output -> input coordinate map about the image centre
        rot = np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]]) / a.scale
        c = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
        t = np.array([a.shift[0] * H, a.shift[1] * W])
        offset = c - rot @ (c + t)
        img = np.stack(
            [ndimage.affine_transform(ch, rot, offset, order=1, mode="reflect") for ch in img]
        ).astype(sample.image.dtype)
        mask = ndimage.affine_transform(mask[0], rot, offset, order=0, mode="reflect")[None]
    if a.hflip:
        img, mask = img[:, :, ::-1], mask[:, :, ::-1]
    if a.vflip:
        img, mask = img[:, ::-1, :], mask[:, ::-1, :]
    if a.noise_sigma > 0:
        img = img + rng.normal(0.0, a.noise_sigma, size=img.shape).astype(img.dtype)
    if a.contrast != 1.0 or a.brightness != 0.0:
        mu = img.mean()
        img = (img - mu) * img.dtype.type(a.contrast) + mu + img.dtype.type(a.brightness)
    img = np.clip(img, 0.0, 1.0)
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), sample.id)


def augment(sample: Sample, rng_seed) -> Sample:
    """Random affine (shared by image and mask), flips, noise, brightness/contrast."""
    rng = np.random.default_rng(rng_seed)
    return apply_augment(sample, draw_augment(rng), rng)


# metrics --------------------------------------------------------------------


def dice_iou(pred: np.ndarray, gt: np.ndarray):
    """Dice and IoU of two binary masks; two empty masks score 1."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    inter = int(np.logical_and(p, g).sum())
    ps, gs = int(p.sum()), int(g.sum())
    union = ps + gs - inter
    if union == 0:
        return 1.0, 1.0
    return 2.0 * inter / (ps + gs), inter / union


@dataclass
class MetricsReport:
    dice: float
    iou: float
    per_sample: List[tuple] = field(default_factory=list)


def stack_batch(samples: Sequence[Sample], dtype=np.float32):
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples]).astype(dtype)
    return x, y


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    was = model.training
    model.eval()
    outs = []
    dtype = next(iter(model.parameters())).dtype
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[i : i + batch_size].astype(dtype))).data)
    model.train(was)
    return np.concatenate(outs) if outs else np.zeros((0, 1) + images.shape[2:])


def evaluate(model: Model, dataset: Sequence[Sample], batch_size: int = 32) -> MetricsReport:
    """Per-sample Dice/IoU of sigmoid(logit) > 0.5, averaged over samples."""
    if not dataset:
        return MetricsReport(float("nan"), float("nan"))
    x, y = stack_batch(dataset)
    logits = predict_logits(model, x, batch_size)
    per = [dice_iou(l > 0, m > 0.5) for l, m in zip(logits, y)]
    return MetricsReport(float(np.mean([d for d, _ in per])), float(np.mean([i for _, i in per])), per)


# training loop --------------------------------------------------------------


@dataclass
class TrainReport:
    records: List[dict]
    steps: int
    final_loss: float
    best_val_dice: Optional[float] = None
    best_state: Optional[Dict[str, np.ndarray]] = None
    final_metrics: Optional[MetricsReport] = None


def train_step(model: Model, params: List[NamedParam], state: OptimState, x: np.ndarray, y: np.ndarray, lr: float) -> float:
    model.zero_grad()
    with T.tape_scope() as tape:
        loss = combined_loss(model(Tensor(x)), y)
        T.backward(loss, tape)
    adamw_step(params, state, lr)
    return loss.item()


def sample_seed(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, index])


def train_loop(
    model: Model,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    val_set: Optional[Sequence[Sample]] = None,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainReport:
    """Seeded mini-batch training; one record per epoch, best-val-Dice state kept."""
    if not dataset:
        raise InputError("cannot train on an empty dataset")
    params = trainable_parameters(model)
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    dtype = next(iter(model.parameters())).dtype
    records: List[dict] = []
    best, best_state = None, None
    steps = 0
    last_loss = float("nan")
    model.train()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = [
                augment(dataset[i], sample_seed(cfg.seed, epoch, int(i))) if cfg.augment else dataset[i]
                for i in idx
            ]
            x, y = stack_batch(batch, dtype)
            last_loss = train_step(model, params, state, x, y, lr)
            losses.append(last_loss)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        rec = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "steps": steps}
        if val_set:
            metrics = evaluate(model, val_set)
            rec["val_dice"], rec["val_iou"] = metrics.dice, metrics.iou
            if best is None or metrics.dice > best:
                best = metrics.dice
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            model.train()
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        logger.debug("epoch %d %s", epoch, rec)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return TrainReport(records, steps, last_loss, best, best_state)

