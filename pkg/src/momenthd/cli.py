"""Command line entry point: datagen, train, evaluate, ablate."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .datagen import CorpusFormatError, CorpusSpec, SpecError, generate_corpus, read_corpus, write_corpus
from .harness import (
    TrainConfig, ablate, configure_threads, evaluate, load_config, save_config, split_corpus, train,
    write_table,
)
from .metrics import evaluate_predictions, read_predictions, write_predictions, write_report
from .model import SWITCHES

log = logging.getLogger("momenthd")


def _pair(text):
    lo, _, hi = text.partition(",")
    try:
        return (int(lo), int(hi or lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'LO,HI', got {text!r}") from None


def _add_datagen(sub):
    p = sub.add_parser("datagen", help="generate a synthetic video/query corpus")
    for f in dataclasses.fields(CorpusSpec):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, tuple):
            p.add_argument(flag, type=_pair, default=f.default, metavar="LO,HI")
        else:
            p.add_argument(flag, type=type(f.default), default=f.default)
    p.add_argument("--out", required=True, help="output JSONL path")


def _load_cfg(path, overrides):
    cfg = load_config(path) if path else TrainConfig()
    if overrides:
        flat = {}
        for item in overrides:
            key, _, value = item.partition("=")
            try:
                flat[key] = json.loads(value)
            except json.JSONDecodeError:
                flat[key] = value
        cfg = cfg.replace(**flat)
    return cfg


def cmd_datagen(args):
    fields = {f.name: getattr(args, f.name) for f in dataclasses.fields(CorpusSpec)}
    corpus = generate_corpus(CorpusSpec(**fields))
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} pairs to {args.out}")


def cmd_train(args):
    from .plotting import plot_training_curves

    cfg = _load_cfg(args.config, args.set)
    corpus = read_corpus(args.corpus)
    out = Path(args.out)
    final, rows = train(cfg, corpus, out_dir=out)
    _, val = split_corpus(corpus, cfg.val_fraction)
    plot_training_curves(rows, out / "train_loss.png")
    if val.pairs:
        report, records = evaluate(out / "best.pt", val)
        write_report(report, out / "val_metrics.json")
        write_predictions(records, out / "val_predictions.jsonl")
        print(json.dumps(report.as_dict()))
    print(f"checkpoints and log in {out}")


def cmd_evaluate(args):
    from .plotting import plot_saliency_examples

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    if args.ckpt:
        if not args.corpus:
            raise SystemExit("evaluate --ckpt needs --corpus")
        corpus = read_corpus(args.corpus)
        report, records = evaluate(args.ckpt, corpus, args.good_thr)
        write_predictions(records, report_path.with_suffix(".predictions.jsonl"))
    else:
        if not (args.preds and args.gt):
            raise SystemExit("evaluate needs --ckpt/--corpus or --preds/--gt")
        corpus = read_corpus(args.gt)
        preds = read_predictions(args.preds)
        report = evaluate_predictions(preds, corpus, args.good_thr if args.good_thr is not None else 0.8)
        records = [preds[p.video_id] for p in corpus.pairs]
    write_report(report, report_path)
    plot_saliency_examples(records, corpus, report_path.with_suffix(".saliency.png"))
    print(json.dumps(report.as_dict()))


def cmd_ablate(args):
    from .plotting import plot_ablation

    cfg = _load_cfg(args.config, args.set)
    corpus = read_corpus(args.corpus)
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows = ablate(cfg, corpus, args.switches, seeds=seeds, grid=not args.one_at_a_time)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, out / "ablation.csv")
    plot_ablation(rows, out / "ablation.png")
    save_config(cfg, out / "config.json")
    for r in rows:
        print(json.dumps(r))


def build_parser():
    parser = argparse.ArgumentParser(prog="momenthd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_datagen(sub)

    p = sub.add_parser("train", help="train on a corpus (minus its validation split)")
    p.add_argument("--config", help="flat JSON key/value config; defaults if omitted")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score a checkpoint or a prediction dump")
    p.add_argument("--ckpt")
    p.add_argument("--corpus")
    p.add_argument("--preds", help="prediction JSONL (with --gt)")
    p.add_argument("--gt", help="ground-truth corpus JSONL (with --preds)")
    p.add_argument("--report", required=True)
    p.add_argument("--good-thr", type=float, default=None)

    p = sub.add_parser("ablate", help="train module-switch variants side by side")
    p.add_argument("--switches", nargs="*", default=[], choices=SWITCHES)
    p.add_argument("--seeds", nargs="*", type=int)
    p.add_argument("--one-at-a-time", action="store_true",
                   help="baseline plus one row per switch instead of the full grid")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    configure_threads()
    try:
        COMMANDS[args.command](args)
    except (SpecError, CorpusFormatError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
