"""``idaa-lab`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .data import load_idx, synth_dataset, write_idx
from .models import ARCHITECTURES, ModelSpec, load_weights, save_weights, train


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _experiment(args) -> bench.ExperimentConfig:
    if not args.config:
        raise SystemExit("--config is required")
    cfg = bench.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, attack=replace(cfg.attack, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.precision is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, precision=args.precision))
    return cfg


def cmd_gen_data(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    ds = synth_dataset(seed, n_classes=args.classes, per_class=args.per_class, size=args.size)
    write_idx(ds, out / f"{args.prefix}-images.idx", out / f"{args.prefix}-labels.idx")
    print(f"wrote {len(ds)} images to {out}")
    return 0


def cmd_train(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.images:
        ds = load_idx(args.images, args.labels, args.classes)
    else:
        ds = synth_dataset(args.data_seed, n_classes=args.classes or 10, per_class=args.per_class)
    spec = ModelSpec(args.arch, ds.shape, ds.n_classes)
    weights = train(spec, ds, epochs=args.epochs, lr=args.lr, seed=seed)
    save_weights(weights, args.out_path)
    print(f"{args.arch}: train accuracy {weights.history.get('train_acc', float('nan')):.4f} -> {args.out_path}")
    return 0


def cmd_attack(args) -> int:
    report = bench.run_experiment(_experiment(args), threads=args.threads)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_ablate(args) -> int:
    if args.values is None:
        values = None
    elif args.values.lstrip().startswith("["):
        values = [tuple(v) if isinstance(v, list) else v for v in json.loads(args.values)]
    else:
        values = [_parse_value(v) for v in args.values.split(",")]
    for value, report in bench.run_ablation(_experiment(args), args.axis, values, threads=args.threads):
        print(f"# {args.axis}={value}")
        sys.stdout.write(report.to_csv())
    return 0


def cmd_eval(args) -> int:
    outcomes = bench.load_outcomes(args.outcomes)
    model = load_weights(args.model)
    s = bench.evaluate(outcomes, model)
    print(f"fsuc={s.fsuc:.4f} tsuc={s.tsuc:.4f} n={s.n}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="seed override (u64)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for attack tasks")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"), help="gradient engine precision")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="idaa-lab", description="Transferable targeted attacks at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as an IDX pair")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--size", type=int, default=28)
    g.add_argument("--prefix", default="synth")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one model and save ADVW weights")
    t.add_argument("arch", choices=ARCHITECTURES)
    t.add_argument("out_path", help="where to write the .advw file")
    t.add_argument("--images", help="IDX images file (default: synthetic data)")
    t.add_argument("--labels", help="IDX labels file")
    t.add_argument("--classes", type=int)
    t.add_argument("--per-class", type=int, default=100)
    t.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic training set")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.1)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", parents=[common], help="run an experiment grid and print the CSV report")
    a.set_defaults(func=cmd_attack)

    b = sub.add_parser("ablate", parents=[common], help="sweep one attack parameter")
    b.add_argument("axis", choices=bench.ABLATION_AXES)
    b.add_argument("--values", help="comma separated values or a JSON list, e.g. '[[0.0, 0.1], [0.5, 0.9]]' for betas")
    b.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", parents=[common], help="score dumped adversarial images on a model")
    e.add_argument("outcomes", help="directory holding manifest.json and .advi files")
    e.add_argument("model", help="ADVW weights of the target model")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "train" and bool(args.images) != bool(args.labels):
        raise SystemExit("--images and --labels go together")
    try:
        return args.func(args)
    except (bench.ExperimentError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
