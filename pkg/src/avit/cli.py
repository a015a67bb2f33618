"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import analysis, data, gradcheck
from .checkpoint import load_checkpoint, load_state, read_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config
from .errors import AvitError, InputError
from .model import VARIANTS, build_model
from .train import evaluate, predict_logits, stack_batch, train_loop

log = logging.getLogger("avit")

BACKBONE_PREFIX = "backbone."


def _model(cfg: RunConfig, variant: Optional[str] = None, materialize: bool = True):
    return build_model(cfg.model_config(variant), cfg.seed, materialize=materialize)


def _init_from(model, path: Optional[str], partial: bool) -> None:
    if path is None:
        return
    # a partial load imports only backbone tensors: heads differ between variants
    names = load_checkpoint(path, model, partial=partial, prefixes=(BACKBONE_PREFIX,) if partial else None)
    log.info("loaded %d tensors from %s", len(names), path)


def _dataset(directory, cfg: RunConfig):
    samples = data.load_dataset(directory, cfg.image_size)
    if not samples:
        raise InputError(f"no samples found in {directory}")
    return samples


# subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train = _dataset(args.data or cfg.data_dir, cfg)
    val = _dataset(args.val, cfg) if args.val else None
    model = _model(cfg)
    _init_from(model, args.init, args.partial)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:

        def emit(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        report = train_loop(model, train, cfg.train_config(), val_set=val, on_record=emit)
    save_checkpoint(model, out / "last.avck")
    if report.best_state is not None:
        save_checkpoint(report.best_state, out / "best.avck")
    print(f"steps: {report.steps}")
    print(f"final_loss: {report.final_loss:.6f}")
    if report.best_val_dice is not None:
        print(f"best_val_dice: {report.best_val_dice:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = _model(cfg)
    load_checkpoint(args.ckpt, model)
    m = evaluate(model, _dataset(args.data, cfg))
    if args.json:
        print(json.dumps({"dice": m.dice, "iou": m.iou, "n": len(m.per_sample)}, sort_keys=True))
    else:
        print(f"n: {len(m.per_sample)}\ndice: {m.dice:.6f}\niou: {m.iou:.6f}")
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    model = _model(cfg)
    load_checkpoint(args.ckpt, model)
    samples = data.load_dataset(args.data, cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if samples:
        x, _ = stack_batch(samples)
        prob = 1.0 / (1.0 + np.exp(-predict_logits(model, x).astype(np.float64)))
        for s, p in zip(samples, prob):
            data.netpbm.write(out / f"{s.id}_prob.pgm", data.to_uint8(p[0]))
    print(f"wrote {len(samples)} probability maps to {out}")
    return 0


def _budget(args):
    cfg = load_config(args.config)
    variants = sorted(VARIANTS) if args.variant == "all" else [args.variant or cfg.variant]
    reps = []
    for v in variants:
        rep = analysis.count_params(_model(cfg, v, materialize=False))
        rep.image_size = cfg.image_size
        rep.gflops = analysis.estimate_flops(cfg.model_config(v), cfg.image_size, args.flops_per_mac)
        reps.append(rep)
    return cfg, reps


def cmd_params(args) -> int:
    _, reps = _budget(args)
    for i, rep in enumerate(reps):
        print(rep.to_json() if args.json else ("\n" if i else "") + rep.to_text())
    return 0


def cmd_flops(args) -> int:
    cfg, reps = _budget(args)
    for i, rep in enumerate(reps):
        mc = cfg.model_config(rep.variant)
        mac = args.flops_per_mac
        parts = analysis.flop_breakdown(mc, cfg.image_size, mac).parts
        closed = analysis.adapter_overhead_closed_form(mc, cfg.image_size, mac) if mc.use_adapters else 0.0
        if args.json:
            rec = {"variant": rep.variant, "image_size": cfg.image_size, "gflops": rep.gflops,
                   "flops_per_mac": mac, "adapter_closed_form": closed}
            rec.update({f"part_{k}": v / 1e9 for k, v in parts.items()})
            print(json.dumps(rec, sort_keys=True))
            continue
        if i:
            print()
        print(f"variant: {rep.variant}")
        print(f"convention: {mac:g} FLOP per multiply-accumulate")
        for k, v in parts.items():
            print(f"{k}: {v / 1e9:.4f}")
        if mc.use_adapters:
            print(f"adapter_closed_form: {closed:.4f}")
        print(f"gflops@{cfg.image_size}: {rep.gflops:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else None
    backbone = cfg.backbone_config() if cfg else gradcheck.TOY
    res = gradcheck.run_suite(backbone, seed=args.seed, trials=args.trials)
    for line in res.lines():
        print(line)
    print(f"worst: {res.worst:.3e} ({'PASS' if res.passed else 'FAIL'}, tolerance {gradcheck.TOLERANCE:g})")
    return 0 if res.passed else 1


def cmd_cv(args) -> int:
    cfg = load_config(args.config)
    samples = _dataset(args.data or cfg.data_dir, cfg)
    folds = data.kfold_split(len(samples), args.folds, args.seed)
    init = read_checkpoint(args.init) if args.init else None
    dices, ious = [], []
    for k, (tr, te) in enumerate(folds):
        model = _model(cfg)
        if init is not None:
            load_state(model, init, partial=args.partial, prefixes=(BACKBONE_PREFIX,) if args.partial else None)
        train_loop(model, data.subset(samples, tr), cfg.train_config())
        m = evaluate(model, data.subset(samples, te))
        dices.append(m.dice)
        ious.append(m.iou)
        print(f"fold {k}: n_train={len(tr)} n_test={len(te)} dice={m.dice:.6f} iou={m.iou:.6f}")
    print(f"dice: {np.mean(dices):.6f} +- {np.std(dices):.6f}")
    print(f"iou: {np.mean(ious):.6f} +- {np.std(ious):.6f}")
    return 0


def cmd_make_synthetic(args) -> int:
    samples = data.make_synthetic(args.n, args.size, args.out, seed=args.seed, easy=args.easy)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avit", description="Adapted ViT lesion segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("train", help="train a model from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="training directory (default: data_dir)")
    s.add_argument("--val", help="validation directory; enables best.avck")
    s.add_argument("--out", help="output directory (default: out_dir)")
    s.add_argument("--init", help="checkpoint to initialise from")
    s.add_argument("--partial", action="store_true", help="load only backbone tensors from --init")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="Dice/IoU of a checkpoint on a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="write probability maps as PGM")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    for name, fn in (("params", cmd_params), ("flops", cmd_flops)):
        s = sub.add_parser(name, help=f"report {name} for a config")
        s.add_argument("--config", help="run config (default: ViT-B/16 AViT)")
        s.add_argument("--variant", choices=sorted(VARIANTS) + ["all"])
        s.add_argument("--json", action="store_true")
        s.add_argument("--flops-per-mac", type=float, default=1.0, help="FLOPs charged per multiply-accumulate")
        s.set_defaults(fn=fn)

    s = sub.add_parser("gradcheck", help="finite-difference suite in 64-bit")
    s.add_argument("--config", help="model config (default: toy)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=10)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("cv", help="k-fold cross-validation")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset directory (default: data_dir)")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init")
    s.add_argument("--partial", action="store_true")
    s.set_defaults(fn=cmd_cv)

    s = sub.add_parser("make-synthetic", help="generate the synthetic lesion dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--easy", action="store_true", help="lesions trivially darker than skin")
    s.set_defaults(fn=cmd_make_synthetic)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (AvitError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
