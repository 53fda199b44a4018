"""Command-line entry point: ``deltaseg {train,eval,predict,gradcheck,params,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import build_run_config, load_run_config
from .data import make_synthetic_dataset, synthetic_class_names, write_dataset
from .gradsuite import format_reports, run_all
from .network import VARIANTS, ModelConfig, build_model, count_params

# published totals, millions of parameters
PARAM_TARGETS = {"v1": 1.96e6, "v2": 5.44e6, "full": 7.14e6}
PARAM_BAND = 0.10

log = logging.getLogger("deltaseg")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    _add_model_flags(p)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--out", help="output directory")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--classes", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--width-mult", type=float)


def _overrides(args: argparse.Namespace) -> dict:
    mapping = {
        "seed": "seed", "epochs": "epochs", "batch_size": "batch_size", "lr": "lr0",
        "variant": "variant", "classes": "num_classes", "width_mult": "width_multiplier",
        "data": "data_root", "out": "out_dir",
    }
    out = {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}
    if getattr(args, "input_size", None) is not None:
        out["input_size"] = (args.input_size, args.input_size)
    return out


def _run_config(args: argparse.Namespace):
    overrides = _overrides(args)
    if args.config:
        return load_run_config(args.config, overrides)
    return build_run_config(overrides)


def cmd_train(args) -> int:
    from .train import train

    cfg = _run_config(args)
    if not cfg.data_root:
        raise SystemExit("train: --data (or data_root in --config) is required")
    result = train(cfg)
    print(f"last checkpoint: {result.last_checkpoint}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    scores, names = evaluate(args.checkpoint, args.data, args.split, args.batch_size or 8)
    print(scores.to_csv(names) if args.csv else scores.pretty(names))
    return 0


def cmd_predict(args) -> int:
    from .train import predict

    failed = predict(args.checkpoint, args.images, args.out or "predictions")
    if failed:
        print(f"{len(failed)} image(s) could not be read: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    module_tol = min(1e-4, args.tol)
    reports = run_all(module_tol=module_tol, model_tol=args.tol, include_model=not args.skip_model)
    print(format_reports(reports))
    ok = all(r.passed for _, r in reports)
    print("gradient check:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_params(args) -> int:
    variant = args.variant or "full"
    cfg = ModelConfig(
        num_classes=args.classes or 7,
        input_size=(args.input_size or 256,) * 2,
        variant=variant,
        width_multiplier=args.width_mult or 1.0,
    )
    total, parts = count_params(build_model(cfg))
    for name, n in parts.items():
        print(f"{name:<10} {n:>12,}")
    print(f"{'total':<10} {total:>12,}")
    if cfg.width_multiplier != 1.0:
        return 0
    target = PARAM_TARGETS[variant]
    rel = total / target - 1.0
    inside = abs(rel) <= PARAM_BAND
    print(f"target {target / 1e6:.2f}M, deviation {rel:+.1%} ({'within' if inside else 'outside'} +/-{PARAM_BAND:.0%})")
    return 0 if inside else 1


def cmd_synth(args) -> int:
    classes = args.classes or 4
    size = args.input_size or 64
    out = Path(args.out or "data/synthetic")
    names = synthetic_class_names(classes)
    seed = args.seed or 0
    for k, (split, n) in enumerate((("train", args.n_train), ("val", args.n_val), ("test", args.n_test))):
        if n:
            write_dataset(out, split, make_synthetic_dataset(n, classes, size, seed + k), names)
    print(f"wrote synthetic dataset to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltaseg", description="DeltaSeg segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write index and colour masks for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    p.add_argument("--tol", type=float, default=1e-3, help="full-model tolerance; modules use min(tol, 1e-4)")
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter breakdown against published totals")
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=4)
    p.add_argument("--n-test", type=int, default=4)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
