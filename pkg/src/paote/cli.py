"""Command-line entry point: ``paote <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import torch

from . import config as config_mod
from .corpus import BENCHMARK, CANONICAL, FORMATS, GoldPair, compute_stats, dumps_corpus, load_corpus
from .evaluate import correlation_table, evaluate_model, score_pairs
from .trainer import Checkpoint, train

logger = logging.getLogger("paote")

SWEEP_DEFAULTS = {
    "eta1": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "eta2": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "layers": [1, 2, 3, 4],
}


class Outputs:
    """Tracks files written by a command; removes them if the command fails."""

    def __init__(self):
        self.created: list[Path] = []

    @contextlib.contextmanager
    def open(self, path: str | Path, mode: str = "w"):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        os.close(fd)
        try:
            with open(tmp, mode, **({"encoding": "utf-8"} if "b" not in mode else {})) as fh:
                yield fh
            os.replace(tmp, path)
            self.created.append(path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def write_text(self, path, text: str) -> None:
        with self.open(path) as fh:
            fh.write(text)

    def register(self, path) -> Path:
        self.created.append(Path(path))
        return Path(path)

    def rollback(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _configs(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    flat = config_mod.resolve(args.config, overrides)
    return flat, *config_mod.build_configs(flat)


def _load_checkpoint_model(args):
    if not args.checkpoint:
        raise ValueError("--checkpoint is required")
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model().to(args.device)
    overrides = dict(config_mod.parse_overrides(args.set or []))
    for key, attr in (("model.eta1", "eta1"), ("model.eta2", "eta2"), ("model.delta", "delta")):
        if key in overrides:
            model.set_pair_weights(**{attr: float(overrides[key])})
    return ckpt, model


def prediction_record(pred) -> dict:
    pairs = sorted(pred.pairs, key=lambda d: (d.aspect, d.opinion))
    return {
        "id": pred.id,
        "pairs": [{"aspect": list(d.aspect), "opinion": list(d.opinion), "score": d.score.y} for d in pairs],
    }


def read_predictions(path) -> dict[str, list[GoldPair]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = [GoldPair.of(p["aspect"], p["opinion"]) for p in rec["pairs"]]
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{n}: malformed prediction record ({exc!r})") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args, out: Outputs) -> None:
    corpus = load_corpus(args.inp[0], args.format or BENCHMARK)
    out.write_text(args.out, dumps_corpus(corpus))
    print(f"wrote {len(corpus)} sentences to {args.out}")


def cmd_stats(args, out: Outputs) -> None:
    results = {}
    for path in args.inp:
        stats = compute_stats(load_corpus(path, args.format or CANONICAL))
        results[str(path)] = stats.as_dict()
        print(f"{path}: {stats}")
    if args.out:
        out.write_text(args.out, json.dumps(results, indent=2, sort_keys=True) + "\n")


def cmd_train(args, out: Outputs) -> None:
    flat, model_cfg, train_cfg = _configs(args)
    corpus = load_corpus(args.inp[0])
    dev = load_corpus(args.dev) if args.dev else None
    ckpt = train(model_cfg, corpus, dev, train_cfg)
    with out.open(args.out, "wb") as fh:
        torch.save(asdict(ckpt), fh)
    log_path = Path(str(args.out) + ".metrics.jsonl")
    out.write_text(log_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in ckpt.history))
    print(f"best dev pair F1 {ckpt.best_dev_metric:.4f} at epoch {ckpt.epoch}; checkpoint {args.out}")


def cmd_predict(args, out: Outputs) -> None:
    _, model = _load_checkpoint_model(args)
    corpus = load_corpus(args.inp[0])
    lines = [json.dumps(prediction_record(model.predict(s))) + "\n" for s in corpus]
    out.write_text(args.out, "".join(lines))
    print(f"wrote predictions for {len(corpus)} sentences to {args.out}")


def cmd_eval(args, out: Outputs) -> None:
    corpus = load_corpus(args.inp[0])
    gold = {s.id: s.gold_pairs for s in corpus}
    if args.pred:
        report = score_pairs(gold, read_predictions(args.pred))
    else:
        _, model = _load_checkpoint_model(args)
        report = evaluate_model(model, corpus)
    out.write_text(args.out, report.to_json() + "\n")
    print(f"pair P={report.pair_p:.4f} R={report.pair_r:.4f} F1={report.pair_f1:.4f}")


def cmd_sweep(args, out: Outputs) -> None:
    values = [float(v) for v in args.values.split(",")] if args.values else SWEEP_DEFAULTS[args.param]
    corpus = load_corpus(args.inp[0])
    out_dir = Path(args.out)
    if not out_dir.exists():
        out.register(out_dir)
        out_dir.mkdir(parents=True)
    rows = []
    if args.param == "layers":
        if not args.train:
            raise ValueError("--train is required for a layer sweep")
        train_corpus = load_corpus(args.train)
        flat, model_cfg, train_cfg = _configs(args)
        for v in values:
            model_cfg.encoder.n_layers = int(v)
            ckpt = train(model_cfg, train_corpus, corpus, train_cfg)
            rows.append(_row("layers", int(v), evaluate_model(ckpt.build_model(), corpus)))
    else:
        _, model = _load_checkpoint_model(args)
        for v in values:
            model.set_pair_weights(**{args.param: v})
            rows.append(_row(args.param, v, evaluate_model(model, corpus)))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.write_text(out_dir / f"sweep_{args.param}.csv", buf.getvalue())
    png = out_dir / f"sweep_{args.param}.png"
    with out.open(png, "wb") as fh:
        _plot(rows, args.param, fh)
    print(buf.getvalue(), end="")


def _row(param, value, report) -> dict:
    return {
        "param": param,
        "value": value,
        "pair_p": round(report.pair_p, 6),
        "pair_r": round(report.pair_r, 6),
        "pair_f1": round(report.pair_f1, 6),
        "aspect_f1": round(report.aspect_f1, 6),
        "opinion_f1": round(report.opinion_f1, 6),
    }


def _plot(rows, param, fh) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r["value"] for r in rows], [100 * r["pair_f1"] for r in rows], marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel("pair F1 (%)")
    fig.tight_layout()
    fig.savefig(fh, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)


def cmd_inspect(args, out: Outputs) -> None:
    _, model = _load_checkpoint_model(args)
    corpus = load_corpus(args.inp[0])
    table = correlation_table(model, corpus, weighting=args.weighting)
    out_dir = Path(args.out)
    if not out_dir.exists():
        out.register(out_dir)
        out_dir.mkdir(parents=True)
    out.write_text(out_dir / "correlation.csv", table.to_csv())
    with out.open(out_dir / "correlation.png", "wb") as fh:
        table.save_heatmap(fh)
    print(f"wrote correlation table ({len(table.labels)} labels x {len(table.pos_tags)} POS tags) to {out_dir}")


COMMANDS = {
    "convert": cmd_convert,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--in", dest="inp", nargs="+", metavar="PATH", help="input corpus file(s)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--device", default="cpu")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="paote", description="Pair-wise aspect and opinion term extraction.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("convert", parents=[common], help="benchmark source -> canonical JSONL")
    p.add_argument("--format", choices=FORMATS)
    p = sub.add_parser("stats", parents=[common], help="dataset statistics")
    p.add_argument("--format", choices=FORMATS)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dev", help="dev corpus for early stopping")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a prediction file")
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="prediction JSONL to score instead of running a model")
    p = sub.add_parser("predict", parents=[common], help="write predicted pairs as JSONL")
    p.add_argument("--checkpoint")
    p = sub.add_parser("sweep", parents=[common], help="grid over eta1, eta2 or the layer count")
    p.add_argument("--param", choices=sorted(SWEEP_DEFAULTS), required=True)
    p.add_argument("--values", help="comma-separated grid values")
    p.add_argument("--checkpoint")
    p.add_argument("--train", help="training corpus (layer sweeps retrain)")
    p = sub.add_parser("inspect", parents=[common], help="dependency-label / POS correlation table")
    p.add_argument("--checkpoint")
    p.add_argument("--weighting", choices=("relative", "raw"), default="relative")
    return parser


_REQUIRED = {
    "convert": ("inp", "out"),
    "stats": ("inp",),
    "train": ("inp", "out"),
    "eval": ("inp", "out"),
    "predict": ("inp", "out"),
    "sweep": ("inp", "out"),
    "inspect": ("inp", "out"),
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    missing = [f"--{'in' if k == 'inp' else k}" for k in _REQUIRED[args.command] if not getattr(args, k)]
    if missing:
        parser.error(f"{args.command} requires {', '.join(missing)}")
    out = Outputs()
    try:
        COMMANDS[args.command](args, out)
    except Exception as exc:  # one-line cause, no traceback
        out.rollback()
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"paote {args.command}: error: {msg}", file=sys.stderr)
        if args.verbose:
            logger.exception("details")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
