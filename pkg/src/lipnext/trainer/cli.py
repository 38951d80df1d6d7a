"""Command line: ``lipnext {train,certify,verify,eval}``."""
from __future__ import annotations

import argparse
import contextlib
import sys

from ..certify import evaluate_cra
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, load_config
from .data import DatasetFormatError, load_dataset


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _parse_eps(text: str) -> list[float]:
    try:
        vals = [_fraction(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --eps list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("--eps needs non-negative values")
    return vals


def _fraction(tok: str) -> float:
    tok = tok.strip()
    if "/" in tok:
        num, den = tok.split("/", 1)
        return float(num) / float(den)
    return float(tok)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config value or 0)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap; 1 gives bit-reproducible runs")

    parser = argparse.ArgumentParser(prog="lipnext", description="Train and certify 1-Lipschitz LipNeXt networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", parents=[common], help="train a model from a config file")
    tr.add_argument("--config", help="key = value config file")
    tr.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry (repeatable)")
    tr.add_argument("--out", help="checkpoint path (overrides config 'checkpoint')")

    ce = sub.add_parser("certify", parents=[common], help="certified robust accuracy from a checkpoint")
    ce.add_argument("checkpoint")
    ce.add_argument("--dataset", choices=("mnist", "cifar"), default="mnist")
    ce.add_argument("--data", required=True, help="MNIST directory (optionally dir:test) or CIFAR .bin file")
    ce.add_argument("--eps", type=_parse_eps, default=[0.0, 36 / 255, 72 / 255, 108 / 255],
                    help="comma-separated l2 radii, e.g. 0.141,1.0 or 36/255")
    ce.add_argument("--limit", type=int, default=0, help="use only the first N examples")
    ce.add_argument("--table", action="store_true", help="print a text table instead of CSV")

    ev = sub.add_parser("eval", parents=[common], help="clean accuracy of a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--dataset", choices=("mnist", "cifar"), default="mnist")
    ev.add_argument("--data", required=True)
    ev.add_argument("--limit", type=int, default=0)

    sub.add_parser("verify", parents=[common], help="run the built-in oracle suite")
    return parser


def _load(kind, path, limit):
    data = load_dataset(kind, path)
    return data.subset(limit) if limit else data


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"checkpoint={args.out}")
    cfg = load_config(args.config, overrides)
    if not cfg.train_path:
        raise FileNotFoundError("no training data: set train_path in the config or with --set train_path=...")
    from .train import accuracy, fit

    train = _load(cfg.dataset, cfg.train_path, cfg.limit_train)
    result = fit(cfg, train, log=print)
    save_model(cfg.checkpoint, result.model, cfg.epochs, result.optimizer.to_tensors())
    print(f"saved {cfg.checkpoint}")
    if cfg.test_path:
        test = _load(cfg.dataset, cfg.test_path, cfg.limit_test)
        print(f"test clean accuracy {accuracy(result.model, test):.4f}")
    return 0


def cmd_certify(args) -> int:
    model, _ = load_model(args.checkpoint)
    data = _load(args.dataset, args.data, args.limit)
    report = evaluate_cra(model, data.images, data.labels, args.eps)
    sys.stdout.write(report.to_table() + "\n" if args.table else report.to_csv())
    return 0


def cmd_eval(args) -> int:
    from .train import accuracy

    model, _ = load_model(args.checkpoint)
    data = _load(args.dataset, args.data, args.limit)
    print(f"clean_acc,n_examples\n{accuracy(model, data):.6f},{len(data)}")
    return 0


def cmd_verify(args) -> int:
    from ..oracles import run_verify_suite

    return 0 if run_verify_suite(seed=args.seed or 0) else 1


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    with _threads(args.threads):
        try:
            return COMMANDS[args.command](args)
        except (FileNotFoundError, ConfigError, DatasetFormatError, CheckpointError) as exc:
            print(f"lipnext {args.command}: error: {exc}", file=sys.stderr)
            return 2


if __name__ == "__main__":
    sys.exit(main())
