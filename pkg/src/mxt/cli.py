"""Command-line entry point: ``mxt {gen-data,train,predict,eval,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import load_records
from .evaluation import load_predictions
from .image import ImageFormatError, ImageIOError
from .pipeline import (ablation_markdown, evaluate, predict_file, run_ablation, save_model, train_on_dir,
                       write_predictions)
from .synth import CatalogSpec, SpecError, generate, load_spec
from .text import DataError
from .training import CheckpointFormatError, TrainConfig, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DATA_ERRORS = (DataError, SpecError, CheckpointFormatError, ImageFormatError, ImageIOError, TrainingError,
               OSError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mxt", description="Multimodal attribute-value generation on numpy.")
    p.add_argument("-v", "--verbose", action="store_true")
    sp = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sp.add_parser("gen-data", help="generate a synthetic catalog")
    g.add_argument("--spec", help="catalog spec JSON (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = sp.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--out", required=True, help="checkpoint path")
    _train_flags(t)

    pr = sp.add_parser("predict", help="greedy-generate values for a JSONL split")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)

    e = sp.add_parser("eval", help="score predictions against gold records")
    e.add_argument("--preds", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--target-precision", type=float, default=0.9)
    e.add_argument("--report", required=True)

    a = sp.add_parser("ablate", help="train and compare the four ablation variants")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="base training config JSON")
    _train_flags(a)
    return p


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--use-mag", type=_bool)
    p.add_argument("--use-xception", type=_bool)
    p.add_argument("--pt-filter", help="comma-separated product types")


def _load_json(path: str, flag: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{flag} {path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{flag} {path}: invalid JSON ({exc.msg})") from exc


def train_config_from(args) -> TrainConfig:
    raw = _load_json(args.config, "--config") if args.config else {}
    for key in ("seed", "epochs", "batch_size", "use_mag", "use_xception"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.pt_filter is not None:
        raw["pt_filter"] = [s for s in args.pt_filter.split(",") if s]
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"--config: {exc}") from exc


def cmd_gen_data(args) -> None:
    spec = load_spec(args.spec) if args.spec else CatalogSpec()
    if args.seed is not None:
        spec.seed = args.seed
    cat = generate(spec, args.out)
    print(" ".join(f"{k}={len(v)}" for k, v in cat.splits.items()))


def cmd_train(args) -> None:
    cfg = train_config_from(args)
    res, vocab = train_on_dir(args.data, cfg)
    save_model(res.checkpoint, vocab, args.out)
    print(f"best epoch {res.best_epoch + 1}, val loss {res.checkpoint.val_loss:.4f} -> {args.out}")


def cmd_predict(args) -> None:
    preds = predict_file(args.ckpt, args.data)
    write_predictions(preds, args.out)
    print(f"{len(preds)} predictions -> {args.out}")


def cmd_eval(args) -> None:
    if not 0.0 < args.target_precision <= 1.0:
        raise UsageError("--target-precision must be in (0, 1]")
    try:
        preds = load_predictions(args.preds)
    except OSError as exc:
        raise DataError(f"--preds {args.preds}: cannot read ({exc.strerror})") from exc
    report = evaluate(preds, load_records(args.data), args.target_precision)
    report.save(args.report)
    o = report.overall
    print(f"F1 {o.f1:.4f}  recall@{args.target_precision:g}P {o.recall_at_target_precision:.4f} -> {args.report}")


def cmd_ablate(args) -> None:
    rows = run_ablation(args.data, args.out, train_config_from(args))
    print(ablation_markdown(rows), end="")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
