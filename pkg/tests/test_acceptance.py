"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest -v -s tests/test_acceptance.py`` to see the report lines;
they are also collected and printed again at the end of the module.
"""
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from avit import tensor as T
from avit.analysis import adapter_overhead_closed_form, estimate_flops, flop_breakdown
from avit.backbone import TOY, VIT_B16, extract_feature_map
from avit.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from avit.cli import main
from avit.config import load_config
from avit.data import synth_dataset, threshold_predict
from avit.experiments import AblationSetup, run_ablation
from avit.gradcheck import TOLERANCE, run_suite
from avit.model import ModelConfig, build_model
from avit.tensor import Tensor
from avit.train import TrainConfig, bce_loss, dice_iou, evaluate, lr_at, train_loop

TOY_CFG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"
REPORT = []


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None and REPORT:
        tr.write_line("")
        tr.write_line("acceptance summary")
        for line in REPORT:
            tr.write_line(line)


def record(capsys, n, title, checks, seconds, limit):
    """Print and store the criterion line; ``checks`` maps a description to a bool."""
    timed = seconds < limit
    ok = all(checks.values()) and timed
    failed = [k for k, v in checks.items() if not v] + ([] if timed else [f"runtime {seconds:.1f}s >= {limit}s"])
    detail = "; ".join(checks) if ok else "failed: " + "; ".join(failed)
    line = f"{'PASS' if ok else 'FAIL'} criterion {n} ({title}) [{seconds:.1f}s < {limit}s]: {detail}"
    REPORT.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


def rel(a, b):
    return abs(a - b) / abs(b)


def sha(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def test_c01_parameter_bookkeeping(capsys):
    t0 = time.perf_counter()
    assert main(["params", "--variant", "all", "--json"]) == 0
    recs = {r["variant"]: r for r in map(json.loads, capsys.readouterr().out.splitlines())}
    dt = time.perf_counter() - t0
    a, b = recs["avit"], recs["base"]
    checks = {
        f"backbone {a['backbone'] / 1e6:.3f}M within 0.5% of 85.8M": rel(a["backbone"], 85.8e6) <= 0.005,
        f"adapters {a['adapters']} == 7077888": a["adapters"] == 7_077_888,
        f"prompt {a['prompt'] / 1e6:.3f}M in [0.225M, 0.245M]": 225_000 <= a["prompt"] <= 245_000,
        f"tuned {a['trainable'] / 1e6:.2f}M within 10% of 13.6M": rel(a["trainable"], 13.6e6) <= 0.10,
        f"tuned fraction {100 * a['trainable_fraction']:.2f}% within 1pp of 13.7%": abs(a["trainable_fraction"] - 0.137) <= 0.01,
        f"BASE {b['total'] / 1e6:.2f}M within 2% of 91.8M": rel(b["total"], 91.8e6) <= 0.02,
    }
    assert record(capsys, 1, "parameter bookkeeping", checks, dt, 1.0)


def test_c02_flop_reconciliation(capsys):
    t0 = time.perf_counter()
    base = estimate_flops(ModelConfig.variant("base", VIT_B16))
    cfg = ModelConfig.variant("avit", VIT_B16)
    avit = estimate_flops(cfg)
    counted = flop_breakdown(cfg).parts["adapters"] / 1e9
    closed = adapter_overhead_closed_form(cfg)
    dt = time.perf_counter() - t0
    checks = {
        f"BASE {base:.2f} GFLOPs within 25% of 18.0": rel(base, 18.0) <= 0.25,
        f"AViT {avit:.2f} GFLOPs within 25% of 20.9": rel(avit, 20.9) <= 0.25,
        f"adapter overhead {counted:.4f} vs closed form {closed:.4f} (rel {rel(counted, closed):.1e})": rel(counted, closed) < 1e-3,
    }
    assert record(capsys, 2, "FLOP reconciliation", checks, dt, 1.0)


def test_c03_gradient_correctness(capsys):
    t0 = time.perf_counter()
    res = run_suite(TOY, seed=0, trials=10)
    dt = time.perf_counter() - t0
    worst_op = max(res.ops, key=res.ops.get)
    worst_g = max(res.groups, key=res.groups.get)
    worst_s = max(res.strict_groups, key=res.strict_groups.get)
    checks = {
        f"{len(res.ops)} ops, worst {worst_op} {res.ops[worst_op]:.2e} < {TOLERANCE:g}": res.ops[worst_op] < TOLERANCE,
        f"{len(res.groups)} groups, worst {worst_g} {res.groups[worst_g]:.2e}": res.groups[worst_g] < TOLERANCE,
        f"strict relative check worst {worst_s} {res.strict_groups[worst_s]:.2e}": res.strict_groups[worst_s] < TOLERANCE,
    }
    assert record(capsys, 3, "gradient correctness", checks, dt, 300.0)


def test_c04_freezing_contract(capsys):
    t0 = time.perf_counter()
    data = synth_dataset(64, 32, seed=21)
    checks = {}
    for variant in ("avit", "base_star"):
        m = build_model(ModelConfig.variant(variant, TOY), 0)
        before = {p.name: (p.trainable, sha(p.tensor.data)) for p in m.named_params()}
        rep = train_loop(m, data, TrainConfig(epochs=100, lr=1e-3, max_steps=50, seed=0))
        after = {p.name: sha(p.tensor.data) for p in m.named_params()}
        frozen = [n for n, (tr, _) in before.items() if not tr]
        tuned = [n for n, (tr, _) in before.items() if tr]
        same = sum(after[n] == before[n][1] for n in frozen)
        changed = sum(after[n] != before[n][1] for n in tuned)
        checks[f"{variant}: {rep.steps} steps, {same}/{len(frozen)} frozen hashes unchanged"] = rep.steps == 50 and same == len(frozen)
        checks[f"{variant}: {changed}/{len(tuned)} trainable tensors changed"] = changed == len(tuned)
    dt = time.perf_counter() - t0
    assert record(capsys, 4, "PEFT freezing contract", checks, dt, 120.0)


def test_c05_zero_init_identity(capsys):
    t0 = time.perf_counter()
    with T.precision(np.float64):
        m = build_model(ModelConfig.variant("avit", TOY), 3, dtype=np.float64)
        zero = all(not np.any(p.tensor.data) for p in m.named_params() if p.name.endswith("w_up"))
        x = Tensor(np.random.default_rng(5).uniform(size=(2, 3, 32, 32)))
        V, states = m.backbone(x, return_layers=True)
        step = max(float(np.abs(b.data - a.data).max()) for a, b in zip(states, states[1:]))
        # the adapter-free reference: every adapted layer collapses to its skip path
        ref = extract_feature_map(m.backbone.norm(m.backbone.embed(x))).data
    dt = time.perf_counter() - t0
    checks = {
        "all W_up zero at init": zero,
        f"max |z_l - z_(l-1)| = {step:.1e} <= 1e-6": step <= 1e-6,
        "V bit-identical to the adapter-free reference": V.data.tobytes() == ref.tobytes(),
    }
    assert record(capsys, 5, "zero-init identity", checks, dt, 60.0)


def test_c06_ablation_direction(capsys):
    t0 = time.perf_counter()
    res = run_ablation(AblationSetup())
    dt = time.perf_counter() - t0
    with capsys.disabled():
        print()
        for line in res.lines():
            print("  " + line)
    m = {v: res.mean(v) for v in res.dice}
    gap = 0.005

    def order(hi, lo):
        return f"{hi} {m[hi]:.4f} > {lo} {m[lo]:.4f} by > 0.5pt", m[hi] - m[lo] > gap

    checks = dict(
        order(*pair)
        for pair in (("avit", "no_prompt"), ("no_prompt", "base_star"), ("avit", "no_adapter"), ("no_adapter", "base_star"))
    )
    assert record(capsys, 6, "ablation direction", checks, dt, 1800.0)


def test_c07_learning_sanity(capsys):
    t0 = time.perf_counter()
    cfg = load_config(TOY_CFG)
    data = synth_dataset(500, cfg.image_size, seed=7)
    train, test = data[:400], data[400:]
    m = build_model(cfg.model_config("avit"), cfg.seed)
    rep = train_loop(m, train, cfg.train_config())
    dice = evaluate(m, test).dice
    easy = synth_dataset(200, cfg.image_size, seed=8, easy=True)
    oracle = float(np.mean([dice_iou(threshold_predict(s), s.mask[0] > 0.5)[0] for s in easy]))
    dt = time.perf_counter() - t0
    checks = {
        f"AViT held-out Dice {dice:.4f} > 0.85 after {rep.steps} steps": dice > 0.85 and rep.steps <= 200,
        f"easy threshold oracle Dice {oracle:.4f} > 0.95": oracle > 0.95,
    }
    assert record(capsys, 7, "learning sanity", checks, dt, 600.0)


def brute_force(p, g):
    tp = fp = fn = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        tp += a and b
        fp += a and not b
        fn += b and not a
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def test_c08_metric_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    exact = ident = 0
    for i in range(200):
        shape = tuple(rng.integers(1, 24, 2))
        density = rng.uniform(0, 1) if i % 20 else 0.0
        p, g = rng.uniform(size=shape) < density, rng.uniform(size=shape) < rng.uniform(0, 1)
        d, j = dice_iou(p, g)
        exact += (d, j) == brute_force(p, g)
        ident += abs(j - d / (2 - d)) <= 1e-12
    dt = time.perf_counter() - t0
    checks = {f"{exact}/200 match the counting oracle exactly": exact == 200, f"{ident}/200 satisfy IoU = Dice/(2-Dice)": ident == 200}
    assert record(capsys, 8, "metric oracles", checks, dt, 10.0)


def test_c09_determinism_and_persistence(capsys, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert main(["make-synthetic", "--n", "60", "--size", "32", "--out", str(data), "--seed", "4"]) == 0
    # the toy recipe with a short step budget: determinism does not depend on run length
    cfg = tmp_path / "cv.cfg"
    keep = [l for l in TOY_CFG.read_text().splitlines() if not l.startswith(("steps=", "data_dir="))]
    cfg.write_text("\n".join(keep + ["steps=10", f"data_dir={data}"]) + "\n")
    capsys.readouterr()
    outs = []
    for _ in range(2):
        assert main(["cv", "--config", str(cfg), "--folds", "5", "--seed", "1"]) == 0
        outs.append(capsys.readouterr().out)

    m = build_model(ModelConfig.variant("avit", TOY), 6)
    save_checkpoint(m, tmp_path / "m.avck")
    back = read_checkpoint(tmp_path / "m.avck")
    exact = list(back) == list(m.state_dict()) and all(
        back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes() for k, v in m.state_dict().items()
    )

    with T.precision(np.float64):
        donor = build_model(ModelConfig.variant("base", TOY), 1, dtype=np.float64)
        train_loop(donor, synth_dataset(32, 32, seed=9), TrainConfig(epochs=10, lr=1e-3, max_steps=5, seed=1))
        save_checkpoint(donor, tmp_path / "donor.avck")
        rec = build_model(ModelConfig.variant("avit", TOY), 2, dtype=np.float64)
        load_checkpoint(tmp_path / "donor.avck", rec, partial=True, prefixes=("backbone.",))
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
        plain = rec.backbone(x, adapters=False).data.tobytes() == donor.backbone(x).data.tobytes()
        zero = rec.backbone(x).data.tobytes() == extract_feature_map(donor.backbone.norm(donor.backbone.embed(x))).data.tobytes()
    dt = time.perf_counter() - t0
    checks = {
        f"two cv runs byte-identical ({len(outs[0])} bytes)": outs[0] == outs[1] and outs[0].count("fold ") == 5,
        "checkpoint round trip bit-exact": exact,
        "partial backbone load reproduces donor V with adapters bypassed": plain,
        "zero-adapter forward equals the donor's adapter-free reference V": zero,
    }
    assert record(capsys, 9, "determinism and persistence", checks, dt, 1200.0)


def test_c10_schedule_and_loss_spot_values(capsys):
    t0 = time.perf_counter()
    with T.precision(np.float64):
        b = bce_loss(Tensor(np.zeros((2, 1, 4, 4))), np.ones((2, 1, 4, 4))).item()
    dt = time.perf_counter() - t0
    checks = {
        f"lr_at(0) = {lr_at(0):g}": math.isclose(lr_at(0), 1e-4, rel_tol=1e-12),
        f"lr_at(50) = {lr_at(50):g}": math.isclose(lr_at(50), 5e-5, rel_tol=1e-12),
        f"bce at zero logits = {b:.12f}": abs(b - math.log(2)) <= 1e-9,
    }
    assert record(capsys, 10, "schedule and loss spot values", checks, dt, 1.0)
