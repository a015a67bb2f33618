"""Desk-scale ablation: one frozen donor backbone shared by every PEFT variant."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import TOY, BackboneConfig
from .checkpoint import load_state
from .data import synth_dataset
from .model import ModelConfig, build_model
from .train import TrainConfig, evaluate, train_loop

ABLATION_VARIANTS = ("base_star", "no_adapter", "no_prompt", "avit")


@dataclass
class AblationSetup:
    backbone: BackboneConfig = TOY
    n_samples: int = 500
    n_test: int = 100
    steps: int = 200
    lr: float = 1e-3
    seeds: Sequence[int] = (0, 1, 2)
    data_seed: int = 7
    # donor: a BASE model trained on a simpler source domain, standing in for pre-training
    donor_samples: int = 500
    donor_steps: int = 300
    donor_seed: int = 1000
    donor_easy: bool = True


@dataclass
class AblationResult:
    dice: Dict[str, List[float]] = field(default_factory=dict)
    donor_dice: Optional[float] = None
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.dice[variant]))

    def lines(self) -> List[str]:
        out = [f"donor source-domain dice: {self.donor_dice:.4f}"]
        for v, ds in self.dice.items():
            out.append(f"{v}: mean={np.mean(ds):.4f} runs={[round(d, 4) for d in ds]}")
        return out


def pretrain_donor(setup: AblationSetup) -> Tuple[Dict[str, np.ndarray], float]:
    """Train BASE on the source domain; return its ``backbone.`` tensors and source Dice."""
    src = synth_dataset(setup.donor_samples, setup.backbone.image_size, setup.donor_seed, easy=setup.donor_easy)
    donor = build_model(ModelConfig.variant("base", setup.backbone), setup.donor_seed)
    train_loop(donor, src, TrainConfig(epochs=10_000, lr=setup.lr, max_steps=setup.donor_steps, seed=setup.donor_seed))
    state = {k: v.copy() for k, v in donor.state_dict().items() if k.startswith("backbone.")}
    return state, evaluate(donor, src[: setup.n_test]).dice


def run_variant(variant: str, donor_state, train_set, test_set, seed: int, setup: AblationSetup) -> float:
    model = build_model(ModelConfig.variant(variant, setup.backbone), seed)
    load_state(model, donor_state, partial=True, prefixes=("backbone.",))
    cfg = TrainConfig(epochs=10_000, lr=setup.lr, max_steps=setup.steps, seed=seed)
    train_loop(model, train_set, cfg)
    return evaluate(model, test_set).dice


def run_ablation(setup: AblationSetup = AblationSetup(), variants: Sequence[str] = ABLATION_VARIANTS, log=None) -> AblationResult:
    t0 = time.perf_counter()
    donor_state, donor_dice = pretrain_donor(setup)
    data = synth_dataset(setup.n_samples, setup.backbone.image_size, setup.data_seed)
    train_set, test_set = data[: -setup.n_test], data[-setup.n_test :]
    res = AblationResult(donor_dice=donor_dice)
    for v in variants:
        res.dice[v] = []
        for seed in setup.seeds:
            d = run_variant(v, donor_state, train_set, test_set, seed, setup)
            res.dice[v].append(d)
            if log is not None:
                log(f"{v} seed={seed} dice={d:.4f} t={time.perf_counter() - t0:.0f}s")
    res.seconds = time.perf_counter() - t0
    return res
