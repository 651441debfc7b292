"""Command-line surface.

Subcommands: gen-data, train, calibrate, eval, zero-shot, gradcheck, report.
Exit codes: 0 success, 1 usage, 2 data/format/config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (FeatureDataset, SyntheticSpec, generate_synthetic_lt,
                   load_features, load_matrix_text, load_text_table,
                   save_features)
from .decoder import DecoderConfig
from .exceptions import (ConfigError, DataError, DivergenceError, DomainError,
                         FormatError, ShapeError, StateError)
from .gradsuite import MODULES, run_gradcheck
from .losses import VARIANTS, build_class_stats
from .numerics import make_rng
from .training import (TrainConfig, evaluate, metrics_from_predictions,
                       parse_run_config, render_report, report_json,
                       TextClassEmbeddings, train_stage1, train_stage2,
                       zero_shot_classify)

_USAGE_EXIT = 1
_DATA_EXIT = 2
_DIVERGENCE_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(_USAGE_EXIT)


def _build_parser() -> _Parser:
    parser = _Parser(prog="lthead",
                     description="Long-tailed classifier heads over frozen "
                                 "embeddings: training, calibration, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tailed dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--head-count", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--tokens", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--out", required=True,
                   help="writes OUT.train and OUT.test feature files")

    p = sub.add_parser("train", help="stage-one training")
    p.add_argument("--features", required=True)
    p.add_argument("--config", required=True, help="key=value run config file")
    p.add_argument("--loss", choices=VARIANTS, help="override the config loss")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss table path (default OUT.losses.csv)")

    p = sub.add_parser("calibrate", help="stage-two calibrator training")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True, help="training feature file")
    p.add_argument("--method", choices=("crt", "lws", "disalign", "marc"),
                   required=True)
    p.add_argument("--config", help="optional run config for optimizer fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output checkpoint path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report", required=True,
                   help="text report path; JSON lands at REPORT.json")

    p = sub.add_parser("zero-shot", help="cosine zero-shot classification")
    p.add_argument("--image-embs", required=True,
                   help="IMBF feature file or labeled text table")
    p.add_argument("--class-embs", required=True,
                   help="text matrix, one row of D values per class")
    p.add_argument("--test-labels",
                   help="one integer per line; overrides labels in the image file")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--report", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", choices=MODULES, default="all")
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("report", help="summarize checkpoints")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--format", choices=("table", "machine"), default="table")
    return parser


def _load_feature_file(path) -> FeatureDataset:
    if str(path).endswith((".txt", ".csv")):
        return load_text_table(path)
    return load_features(path)


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(num_classes=args.classes, head_count=args.head_count,
                         imbalance_ratio=args.ratio, dim=args.dim,
                         tokens=args.tokens, separation=args.separation,
                         noise=args.noise, test_per_class=args.test_per_class,
                         seed=args.seed)
    train, test = generate_synthetic_lt(spec)
    save_features(train, f"{args.out}.train")
    save_features(test, f"{args.out}.test")
    counts = np.bincount(train.labels, minlength=train.num_classes)
    print(f"wrote {args.out}.train ({train.num_samples} samples, "
          f"head {counts.max()}, tail {counts.min()}) and "
          f"{args.out}.test ({test.num_samples} samples)")
    return 0


def _cmd_train(args) -> int:
    with open(args.config) as fh:
        cfg = parse_run_config(fh.read())
    if args.loss:
        cfg = replace(cfg, loss=args.loss)
    ds = _load_feature_file(args.features)
    decoder_config = DecoderConfig(dim=ds.dim, num_classes=ds.num_classes,
                                   depth=cfg.depth, heads=cfg.heads,
                                   mlp_ratio=cfg.mlp_ratio, dropout=cfg.dropout)
    head, log = train_stage1(ds, cfg, decoder_config, make_rng(cfg.seed))
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    save_checkpoint(args.out, head, counts)
    log_path = args.log or f"{args.out}.losses.csv"
    with open(log_path, "w") as fh:
        fh.write("iteration,loss\n")
        for it, value in enumerate(log):
            fh.write(f"{it},{float(value)!r}\n")
    print(f"trained {cfg.total_iters} iterations with loss={cfg.loss}; "
          f"checkpoint {args.out}, losses {log_path}")
    return 0


def _cmd_calibrate(args) -> int:
    if args.config:
        with open(args.config) as fh:
            cfg = parse_run_config(fh.read())
    else:
        cfg = TrainConfig()
    head, _, _ = load_checkpoint(args.ckpt)
    ds = _load_feature_file(args.features)
    cal, _ = train_stage2(head, ds, cfg, args.method, make_rng(args.seed))
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    save_checkpoint(args.out, head, counts, calibrator=cal)
    print(f"calibrated with {args.method} for {cfg.stage2_iters} iterations; "
          f"checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    head, stats, cal = load_checkpoint(args.ckpt)
    test = _load_feature_file(args.test)
    report = evaluate(head, cal, test, stats)
    text = render_report(report)
    with open(args.report, "w") as fh:
        fh.write(text)
    with open(f"{args.report}.json", "w") as fh:
        fh.write(report_json(report))
    sys.stdout.write(text)
    return 0


def _cmd_zero_shot(args) -> int:
    class_matrix = load_matrix_text(args.class_embs)
    embeddings = TextClassEmbeddings.from_matrix(class_matrix)
    images = _load_feature_file(args.image_embs)
    if images.tokens_per_sample != 1:
        raise DataError("zero-shot expects one embedding per image (T=1)")
    image_embs = images.features[:, 0, :]
    labels = images.labels
    if args.test_labels:
        labels = np.loadtxt(args.test_labels, dtype=np.int64, ndmin=1)
        if labels.shape[0] != image_embs.shape[0]:
            raise DataError("test label count does not match image count")
    k = class_matrix.shape[0]
    if labels.max() >= k or labels.min() < 0:
        raise DataError(f"labels must lie in [0, {k})")
    predictions, _ = zero_shot_classify(image_embs, embeddings, args.temperature)
    # pad so every class exists; only group tags depend on these counts
    stats = build_class_stats(np.concatenate([np.arange(k), labels]), k)
    report = metrics_from_predictions(predictions, labels, stats,
                                      fingerprint="zero-shot")
    text = render_report(report)
    with open(args.report, "w") as fh:
        fh.write(text)
    with open(f"{args.report}.json", "w") as fh:
        fh.write(report_json(report))
    sys.stdout.write(text)
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.module, args.tol)
    failed = 0
    for res in results:
        status = "PASS" if res.report.passed else "FAIL"
        print(f"{status} {res.name}: max_rel_err={res.report.max_rel_err:.3e}")
        failed += not res.report.passed
    print(f"{len(results) - failed}/{len(results)} checks passed at tol {args.tol}")
    return 0 if failed == 0 else _DATA_EXIT


def _cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        head, stats, cal = load_checkpoint(path)
        cfg = head.config
        rows.append({
            "checkpoint": str(path),
            "depth": cfg.depth, "heads": cfg.heads, "dim": cfg.dim,
            "classes": cfg.num_classes, "dropout": cfg.dropout,
            "params": head.num_params(),
            "calibrator": "-" if cal is None else cal.variant,
            "train_samples": int(stats.counts.sum()),
        })
    if args.format == "machine":
        print(json.dumps(rows, indent=2, sort_keys=True))
        return 0
    cols = ["checkpoint", "depth", "heads", "dim", "classes", "dropout",
            "params", "calibrator", "train_samples"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "eval": _cmd_eval,
    "zero-shot": _cmd_zero_shot,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, DataError, ConfigError, ShapeError, DomainError,
            StateError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DIVERGENCE_EXIT


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
