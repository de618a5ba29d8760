"""Command-line interface: ``conattsd <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numeric failure (non-finite loss, failed gradient check).

Every command accepts ``--seed``, ``--precision`` and ``--config FILE``.  The
config file is a JSON object whose keys are option names (``hidden``,
``learning_rate``, ...); explicit flags override it.  Relative output paths
are resolved against ``$CONATTSD_OUTPUT_DIR`` when that variable is set, and
a relative ``--checkpoint`` missing from the working directory is read from
there too.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import autodiff as ad
from .data import SyntheticConfig, generate_synthetic, load_dataset, save_dataset, split_speaker_independent
from .errors import CheckpointError, ConAttSDError, ConfigError, ContractError, DataError, NumericError
from .model import ModelConfig, configure_variant, decide, forward_batch, collate, probabilities
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_DIR_ENV = "CONATTSD_OUTPUT_DIR"

log = logging.getLogger("conattsd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: {message}")


def _output_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _input_path(path: str) -> Path:
    """A relative input that is missing locally is looked up in the output directory."""
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute() and not p.exists():
        return Path(base) / p
    return p


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(t.strip()) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad comma-separated list: {text!r}") from None
    return parse


# ------------------------------------------------------------------ parser
def _common(p: argparse.ArgumentParser, precision_default: int = 32) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", type=int, choices=(32, 64), default=precision_default)
    p.add_argument("--config", metavar="FILE", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", default="conattsd",
                   help='ablation spec, e.g. "T+A+V", "T->A + T->V", "g-only:T+A+V"')
    g.add_argument("--hidden", type=int, default=150)
    g.add_argument("--blocks", type=int, default=3)
    g.add_argument("--heads", type=int, default=6)
    g.add_argument("--dropout", type=float, default=0.5)
    g.add_argument("--no-positional", dest="positional", action="store_false")


def _train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=1e-4)
    g.add_argument("--batch-conversations", dest="batch_conversations", type=int, default=64)
    g.add_argument("--epochs", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conattsd", description="Multimodal sarcasm detection with contrastive attention.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic incongruity dataset")
    _common(p)
    p.add_argument("--n", type=int, default=64, help="number of conversations")
    p.add_argument("--min-length", dest="min_length", type=int, default=2)
    p.add_argument("--max-length", dest="max_length", type=int, default=5)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--dims", type=_csv(int), default=[16, 16, 16], help="T,A,V feature sizes")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--sources", type=int, default=1, help="number of distinct source shows")
    p.add_argument("--context", choices=("neutral", "congruent"), default="neutral")
    p.add_argument("--sidecar", action="store_true", help="store features in a binary sidecar file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--validation-data", dest="validation_data")
    p.add_argument("--train-sources", dest="train_sources", type=_csv(str),
                   help="train only on these sources; with --test-sources the rest is the validation set")
    p.add_argument("--test-sources", dest="test_sources", type=_csv(str))
    _model_options(p)
    _train_options(p)
    p.add_argument("--keep", choices=("last", "best"), default="last",
                   help="save final parameters or the best-validation ones")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--history", help="write the per-epoch history as JSON")

    p = sub.add_parser("evaluate", help="weighted precision/recall/F1 on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default="model.ckpt")
    p.add_argument("--sources", type=_csv(str), help="restrict to these sources")
    p.add_argument("--out", help="write metrics as JSON")

    p = sub.add_parser("predict", help="per-target labels and probabilities as JSON lines")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default="model.ckpt")
    p.add_argument("--out", help="output file, default stdout")

    p = sub.add_parser("ablate", help="train/evaluate a grid of variants over seeds")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--train-sources", dest="train_sources", type=_csv(str))
    p.add_argument("--test-sources", dest="test_sources", type=_csv(str))
    p.add_argument("--grid", default="table2", help="table1, table2, table3, or comma-separated specs")
    p.add_argument("--seeds", type=_csv(int), default=[0])
    p.add_argument("--jobs", type=int, default=1)
    _model_options(p)
    _train_options(p)
    p.add_argument("--out", default="ablation.jsonl")

    p = sub.add_parser("gradcheck", help="finite-difference check of every component")
    _common(p, precision_default=64)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _parse(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args, extra = parser.parse_known_args(argv)
    if extra:
        _subparser(parser, args.command).error(f"unrecognized arguments: {' '.join(extra)}")
    return args


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    return parser._subparsers._group_actions[0].choices[command]


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = _parse(parser, argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON: {exc.msg}") from None
    if not isinstance(overrides, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    subparser = _subparser(parser, args.command)
    known = {a.dest for a in subparser._actions} - {"help", "config", "command"}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"{args.config}: unknown options {unknown}")
    subparser.set_defaults(**overrides)
    return _parse(parser, argv)


# --------------------------------------------------------------- commands
def _model_config(args, dims) -> ModelConfig:
    base = ModelConfig(input_dims=dict(dims), hidden=args.hidden, blocks=args.blocks, heads=args.heads,
                       dropout=args.dropout, positional_encoding=args.positional, seed=args.seed)
    return configure_variant(base, args.variant)


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.learning_rate, batch_conversations=args.batch_conversations,
                       epochs=args.epochs, seed=args.seed, precision=args.precision)


def cmd_synth(args) -> int:
    dims = tuple(args.dims)
    if len(dims) != 3:
        raise UsageError("--dims needs three values (T,A,V)")
    cfg = SyntheticConfig(n_conversations=args.n, min_length=args.min_length, max_length=args.max_length,
                          n_speakers=args.speakers, dims=dims, noise=args.noise, strength=args.strength,
                          n_sources=args.sources, context=args.context, seed=args.seed)
    ds = generate_synthetic(cfg)
    out = _output_path(args.out)
    save_dataset(ds, out, sidecar=args.sidecar)
    counts = ds.class_counts
    print(f"wrote {len(ds.conversations)} conversations to {out} (labels 0:{counts.get(0, 0)} 1:{counts.get(1, 0)})")
    return EXIT_OK


def _train_validation(args):
    ds = load_dataset(args.data)
    validation = load_dataset(args.validation_data) if args.validation_data else None
    if args.train_sources and args.test_sources:
        ds, held_out = split_speaker_independent(ds, args.train_sources, args.test_sources)
        validation = validation or held_out
    elif args.train_sources or args.test_sources:
        raise UsageError("--train-sources and --test-sources must be given together")
    return ds, validation


def cmd_train(args) -> int:
    ds, validation = _train_validation(args)
    model_cfg = _model_config(args, ds.dims)
    if args.keep == "best" and validation is None:
        raise UsageError("--keep best needs a validation set")

    def report(record):
        parts = [f"epoch {record.epoch:4d}", f"loss {record.loss:.5f}"]
        if record.train:
            parts.append(f"train F1 {record.train.f1:6.2f}")
        if record.validation:
            parts.append(f"val F1 {record.validation.f1:6.2f}")
        print("  ".join(parts), flush=True)

    result = train(model_cfg, ds, validation, _train_config(args), on_epoch=report)
    params = result.best_params if args.keep == "best" and result.best_params is not None else result.params
    out = _output_path(args.out)
    save_checkpoint(params, model_cfg, out)
    if args.history:
        _output_path(args.history).write_text(json.dumps(result.history.to_dict(), indent=1) + "\n")
    print(f"saved {model_cfg.label} checkpoint to {out} after {result.steps} steps")
    return EXIT_OK


def _load_for_inference(args):
    dtype = ad.dtype_for_bits(args.precision)
    params, cfg = load_checkpoint(_input_path(args.checkpoint))
    params = {k: ad.Tensor(v.data.astype(dtype)) for k, v in params.items()}
    return params, cfg


def cmd_evaluate(args) -> int:
    params, cfg = _load_for_inference(args)
    ds = load_dataset(args.data)
    convs = ds.conversations
    if args.sources:
        unknown = set(args.sources) - set(ds.sources)
        if unknown:
            raise DataError(f"unknown sources {sorted(unknown)}")
        convs = [c for c in convs if c.source in set(args.sources)]
    with ad.precision(args.precision):
        report = evaluate(params, cfg, convs)
    print(f"precision {report.precision:.2f}  recall {report.recall:.2f}  F1 {report.f1:.2f}  (n={report.n})")
    if args.out:
        _output_path(args.out).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    params, cfg = _load_for_inference(args)
    ds = load_dataset(args.data)
    lines = []
    with ad.precision(args.precision):
        for start in range(0, len(ds.conversations), 64):
            chunk = ds.conversations[start:start + 64]
            batch = collate(chunk, cfg.input_dims, cfg.modalities)
            logits = forward_batch(params, cfg, batch, "eval").data
            probs = probabilities(logits)
            labels, _ = decide(logits)
            for b, conv in enumerate(chunk):
                for i in conv.targets:
                    lines.append(json.dumps({"id": conv.id, "utterance": i, "label": int(labels[b, i]),
                                             "p_sarcastic": round(float(probs[b, i, 1]), 6)}))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        _output_path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import resolve_grid, run_ablation_grid

    ds = load_dataset(args.data)
    if args.test_data:
        train_set, test_set = ds, load_dataset(args.test_data)
    elif args.train_sources and args.test_sources:
        train_set, test_set = split_speaker_independent(ds, args.train_sources, args.test_sources)
    else:
        raise UsageError("ablate needs --test-data or both --train-sources and --test-sources")
    base = dataclasses.replace(_model_config(args, train_set.dims))
    grid = resolve_grid(args.grid)
    for row in grid:  # reject malformed specs before spending any training time
        try:
            configure_variant(base, row.spec)
        except ConfigError as exc:
            raise UsageError(f"grid row {row.label!r}: {exc}") from None
    result = run_ablation_grid(train_set, test_set, grid, base, _train_config(args), args.seeds, args.jobs)
    out = _output_path(args.out)
    out.write_text(result.to_jsonl())
    sys.stdout.write(result.to_text())
    failed = [c for c in result.cells if not c.ok]
    for c in failed:
        print(f"cell {c.row.label} seed {c.seed} failed: {c.error}", file=sys.stderr)
    print(f"wrote {len(result.cells)} cells to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if args.precision != 64:
        raise UsageError("gradcheck runs in 64-bit only")
    results = run_suite(seed=args.seed, eps=args.eps)
    width = max(len(r.component) for r in results)
    worst = 0.0
    for r in results:
        status = "PASS" if r.error < args.tolerance else "FAIL"
        print(f"{status}  {r.component:<{width}}  max rel err {r.error:.3e}  ({r.seconds:.2f}s)")
        worst = max(worst, r.error)
    print(f"worst relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        try:
            args = _apply_config_file(parser, argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with ad.precision(args.precision):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConAttSDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
