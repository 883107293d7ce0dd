"""Command line interface.

Subcommands: train, eval, gradcheck, dump-attention, ablate.  Every error
exits nonzero after printing a single machine-parsable line to stderr:

    qbn-error code=<CODE> message="..."
"""

from __future__ import annotations

import argparse
import json
import sys

from .container import MAGIC
from .data import DatasetSpec, generate, load_features
from .errors import ConfigError, InputError, QBNError
from .train import (
    TrainConfig,
    dump_attention,
    evaluate,
    load_checkpoint,
    resolve_dataset,
    run_ablations,
    train,
)
from .verify import run_battery


def _load_train_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return TrainConfig.from_dict(raw)


def _load_dataset_arg(arg: str):
    """--data accepts a container file or a JSON dataset spec file."""
    try:
        with open(arg, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise InputError(f"cannot read dataset {arg}: {exc}") from None
    if head == MAGIC:
        return load_features(arg)
    with open(arg) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(
                f"{arg} is neither a QBNT container nor a JSON dataset spec: {exc}"
            ) from None
    return generate(DatasetSpec.from_dict(raw))


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.checkpoint_dir = args.out
    report, _ = train(cfg)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    if args.data is not None:
        dataset = _load_dataset_arg(args.data)
    else:
        dataset = resolve_dataset(cfg)
    if args.split == "val":
        _, dataset = dataset.split(val_count=cfg.val_count, val_fraction=cfg.val_fraction)
    elif args.split == "train":
        dataset, _ = dataset.split(val_count=cfg.val_count, val_fraction=cfg.val_fraction)
    result = evaluate(model, dataset, batch_size=args.batch_size)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    for name, result in run_battery(tol=args.tol):
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {name}: max rel err {result.max_rel_err:.3e} (tol {result.tol:.1e})")
        failures += 0 if result.passed else 1
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_dump_attention(args) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    if args.data is not None:
        dataset = _load_dataset_arg(args.data)
    else:
        dataset = resolve_dataset(cfg)
    payload = dump_attention(model, dataset, args.example, args.out)
    print(json.dumps({
        "out": args.out,
        "example_index": payload["example_index"],
        "predicted": payload["predicted"],
        "answer": payload["answer"],
        "agreement": payload["agreement"],
    }, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_train_config(args.config)
    table = run_ablations(cfg, out_dir=args.out or cfg.checkpoint_dir)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="checkpoint directory override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="QBNT container or dataset spec JSON")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient verification battery")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="dump gate and attention maps for one example")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--example", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("ablate", help="train every ablation arm and emit the table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QBNError as exc:
        print(f'qbn-error code={exc.code} message="{exc}"', file=sys.stderr)
        return 1
    except OSError as exc:
        print(f'qbn-error code=IO message="{exc}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
