"""Command-line entry point: ``suparc {synth,train,eval,ablate,embed,gradcheck}``.

Precedence for training settings: command-line flags override keys in the
``--config`` file, which override built-in defaults.

Exit codes: 0 success, 1 data or configuration error, 2 numeric failure
(non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import SyntheticConfig, generate_synthetic, load_dataset, load_splits, save_dataset
from .evaluation import evaluate, export_embeddings
from .exceptions import ConfigError, DataError, NonFiniteLossError, SupArcError
from .gradcheck import run_gradchecks
from .model import VARIANTS, EncoderConfig, init_params, load_checkpoint
from .training import TrainConfig, ablate, fit, format_ablation_table, load_config_file

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

log = logging.getLogger("suparc")

# flag dest -> config key
_OVERRIDES = {
    "lr": "lr",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "weight_decay": "weight_decay",
    "grad_clip_norm": "grad_clip_norm",
    "tau": "tau",
    "margin_m": "margin_m",
    "threshold_TH": "threshold_TH",
    "m_tri": "m_tri",
    "alpha": "alpha",
    "beta": "beta",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON file of TrainConfig/LossConfig keys")
    g = p.add_argument_group("overrides (take precedence over --config)")
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--grad-clip-norm", dest="grad_clip_norm", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--margin-m", dest="margin_m", type=float)
    g.add_argument("--threshold", dest="threshold_TH", type=float)
    g.add_argument("--m-tri", dest="m_tri", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="suparc",
        description=__doc__.split("\n\n")[0],
        epilog="Settings precedence: flags > --config file > defaults. "
               "Set LOG_LEVEL=error|info|debug to control verbosity.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic train/valid/test dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n", type=int, help="total samples (splits 70/15/15); default 2000/430/430")
    p.add_argument("--conflict", type=float, default=0.2, help="cross-modal conflict probability")

    p = sub.add_parser("train", help="train one model", epilog="flags > --config file > defaults")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="print test metrics of a checkpoint as JSON")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])

    p = sub.add_parser("ablate", help="train full / no-suparc / no-tri / neither",
                       epilog="flags > --config file > defaults")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)

    p = sub.add_parser("embed", help="export PCA-projected fusion vectors")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--variants", default="full", help=f"comma list or 'all' from {','.join(VARIANTS)}")
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("--svg", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include-model", action="store_true", help="also check model blocks")
    return parser


def resolve_train_config(args) -> TrainConfig:
    raw = load_config_file(args.config) if args.config is not None else {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            raw[key] = value
    return TrainConfig.from_flat_dict(raw)


def _cmd_synth(args) -> int:
    if args.n is not None:
        config = SyntheticConfig(n_samples=args.n, seed=args.seed, conflict_prob=args.conflict, split_sizes=None)
    else:
        config = SyntheticConfig(seed=args.seed, conflict_prob=args.conflict)
    for split, dataset in generate_synthetic(config).items():
        save_dataset(args.out, dataset)
        print(f"{split}: {len(dataset)} utterances -> {args.out / (split + '.jsonl')}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = resolve_train_config(args)
    datasets = load_splits(args.data, ("train", "valid"))
    encoder = EncoderConfig.from_header(datasets["train"].header)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(config.to_flat_dict(), indent=2, sort_keys=True) + "\n")
    result = fit(init_params(encoder, config.seed), datasets, config, run_dir=args.out)
    print(f"best epoch {result.best_epoch}: valid MAE {result.best_valid_mae:.4f} -> {args.out / 'checkpoint.json'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, args.split)
    print(json.dumps(evaluate(model, dataset).to_dict(), indent=2))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = resolve_train_config(args)
    datasets = load_splits(args.data)
    rows = ablate(config, datasets, out_dir=args.out)
    sys.stdout.write(format_ablation_table(rows))
    return EXIT_OK


def _cmd_embed(args) -> int:
    variants = list(VARIANTS) if args.variants == "all" else [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, args.split)
    dump = export_embeddings(model, dataset, variants, csv_path=args.out, svg_path=args.svg)
    print(f"{len(dump.rows)} rows -> {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    groups = {"op", "loss", "model"} if args.include_model else {"op", "loss"}
    results = run_gradchecks(args.trials, seed=args.seed, groups=groups)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "embed": _cmd_embed,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None) -> int:
    level = os.environ.get("LOG_LEVEL", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SupArcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
