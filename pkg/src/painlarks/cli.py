"""``painlarks`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence. Every error prints one ``ERROR <code>: <message>`` line.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config, resolve_seed
from .data import (DataError, Dataset, LandmarkClip, as_feature_dataset, generate_synthetic,
                   load_dataset, render_landmark_images, split_dataset, write_feature_clips,
                   write_landmark_csv)
from .graph import GraphError, load_graph
from .models import ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .selftest import run_selftest
from .tensor import ShapeError
from .training import (TrainingDiverged, evaluate_metrics, format_report, predict, predict_proba,
                       resolve_config, run_kfold_experiment, train_model)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

logger = logging.getLogger("painlarks")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def prepare_dataset(dataset: Dataset, cfg: ModelConfig) -> Dataset:
    """Convert loaded clips to the input form ``cfg`` expects."""
    landmarks = bool(dataset.clips) and isinstance(dataset.clips[0], LandmarkClip)
    if cfg.kind != "hybrid":
        if not landmarks:
            raise DataError(f"model kind {cfg.kind} needs landmark clips (CSV input)")
        return dataset
    if cfg.backbone == "toy_convnext":
        return render_landmark_images(dataset, size=cfg.convnext.image_size) if landmarks else dataset
    return as_feature_dataset(dataset) if landmarks else dataset


def _load(path, cfg: ModelConfig) -> Dataset:
    try:
        ds = load_dataset(path)
    except DataError as exc:
        err = DataError(f"{path}: {exc}")
        err.line = exc.line
        raise err from None
    for clip_id in ds.rejected:
        print(f"WARNING: rejected clip {clip_id}", file=sys.stderr)
    if len(ds) == 0:
        raise DataError(f"{path}: no usable clips")
    return prepare_dataset(ds, cfg)


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.data:
        raise ConfigError("no training data: set 'data' in the config or pass --data")
    seed = resolve_seed(args.seed, cfg.seed)
    graph = load_graph(cfg.edges) if cfg.model.kind != "hybrid" else None
    data = _load(cfg.data, cfg.model)
    val = _load(cfg.val_data, cfg.model) if cfg.val_data else None
    test = _load(cfg.test_data, cfg.model) if cfg.test_data else None
    if val is None and test is None:
        if len(data) >= 10:
            data, val, test = split_dataset(data, seed=seed)
        else:
            print(f"WARNING: only {len(data)} clips; training on all of them without a split",
                  file=sys.stderr)
    model_cfg = resolve_config(cfg.model, data)
    out = Path(cfg.out_dir)
    try:
        model, history = train_model(model_cfg, data, cfg.optimizer, seed, val_set=val, graph=graph)
    except TrainingDiverged as exc:
        if exc.history is not None:
            out.mkdir(parents=True, exist_ok=True)
            exc.history.to_csv(out / "history.csv")
        raise
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint")
    history.to_csv(out / "history.csv")
    target, title = (test, "test") if test is not None else (data, "train (no held-out data)")
    report = evaluate_metrics(predict(model, target.X), target.y)
    _write(out / "report.txt", format_report(report, title))
    _write(out / "config.txt", RunConfig(model_cfg, cfg.optimizer, cfg.data, cfg.val_data, cfg.test_data,
                                         cfg.edges, seed, cfg.out_dir, cfg.workers,
                                         cfg.val_fraction).to_text())
    print(f"trained {model_cfg.kind} for {len(history)} epochs (best epoch {history.best_epoch}); "
          f"{title} accuracy {100 * report.accuracy:.2f}%; outputs in {out}")
    return EXIT_OK


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_evaluate(args) -> int:
    model = _checkpoint(args.checkpoint)
    data = _load(args.data, model.cfg)
    report = format_report(evaluate_metrics(predict(model, data.X), data.y), f"evaluate {args.data}")
    if args.report:
        _write(Path(args.report), report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _checkpoint(args.checkpoint)
    data = _load(args.data, model.cfg)
    proba = predict_proba(model, data.X)
    if not np.allclose(proba.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise RuntimeError("class probabilities do not sum to 1")
    lines = ["clip_id,label,p_pain"]
    lines += [f"{cid},{int(np.argmax(p))},{float(p[1])!r}" for cid, p in zip(data.clip_ids, proba)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_kfold(args) -> int:
    cfg = _run_config(args)
    if not cfg.data:
        raise ConfigError("no data: set 'data' in the config or pass --data")
    seed = resolve_seed(args.seed, cfg.seed)
    workers = args.workers if args.workers is not None else cfg.workers
    graph = load_graph(cfg.edges) if cfg.model.kind != "hybrid" else None
    data = _load(cfg.data, cfg.model)
    try:
        report = run_kfold_experiment(cfg.model, data, cfg.optimizer, k=args.k, seed=seed,
                                      workers=workers, graph=graph, val_fraction=cfg.val_fraction)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise DataError(str(exc)) from None
    text = format_report(report, f"{cfg.model.kind} {args.k}-fold")
    _write(Path(cfg.out_dir) / "kfold_report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ds = generate_synthetic(args.n, seed=resolve_seed(args.seed, None), noise=args.noise,
                            normalize=not args.raw)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "featclip":
        write_feature_clips(as_feature_dataset(ds), out)
    else:
        write_landmark_csv(ds, out)
    print(f"wrote {len(ds)} clips to {out}")
    return EXIT_OK


def cmd_inspect_graph(args) -> int:
    sys.stdout.write(load_graph(args.edges).describe())
    return EXIT_OK


def cmd_selftest(args) -> int:
    failed = run_selftest()
    if failed:
        raise UsageError(f"selftest failed: {', '.join(failed)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="painlarks", description="Pain classification from facial landmark clips.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train one model and write checkpoint, history and report")
    s.add_argument("--config", required=True, help="key = value run configuration file")
    s.add_argument("--data", help="override the config's data path")
    s.add_argument("--out", help="override the config's output directory")
    s.add_argument("--seed", type=int, help="random seed (beats config and $PAINLARKS_SEED)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="report metrics of a checkpoint on labelled data")
    s.add_argument("--config", help="run configuration (optional; the checkpoint holds the model)")
    s.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    s.add_argument("--data", required=True, help="landmark CSV or feature-clip file")
    s.add_argument("--report", help="also write the report to this file")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="write clip_id,label,p_pain rows for each clip")
    s.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    s.add_argument("--data", required=True, help="landmark CSV or feature-clip file")
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("kfold", help="stratified k-fold experiment with per-fold and mean metrics")
    s.add_argument("--config", required=True, help="key = value run configuration file")
    s.add_argument("--k", type=int, default=5, help="number of folds (default 5)")
    s.add_argument("--data", help="override the config's data path")
    s.add_argument("--out", help="override the config's output directory")
    s.add_argument("--seed", type=int, help="random seed (beats config and $PAINLARKS_SEED)")
    s.add_argument("--workers", type=int, help="parallel fold processes (default: config value)")
    s.set_defaults(func=cmd_kfold)

    s = sub.add_parser("synth-data", help="write a synthetic landmark dataset")
    s.add_argument("--n", type=int, default=8, help="clips per class (default 8)")
    s.add_argument("--out", required=True, help="output file")
    s.add_argument("--seed", type=int, help="generator seed (default: $PAINLARKS_SEED or 0)")
    s.add_argument("--noise", type=float, default=0.004, help="coordinate jitter (default 0.004)")
    s.add_argument("--raw", action="store_true", help="keep pixel coordinates instead of normalizing")
    s.add_argument("--format", choices=("csv", "featclip"), default="csv",
                   help="landmark CSV or flattened feature clips (default csv)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("inspect-graph", help="print degrees, edge count and components")
    s.add_argument("--edges", help="edge-list file (default: canonical facial graph)")
    s.set_defaults(func=cmd_inspect_graph)

    s = sub.add_parser("selftest", help="gradient checks and invariants; nonzero exit on failure")
    s.set_defaults(func=cmd_selftest)
    return p


def _error(code: int, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"ERROR {code}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error(EXIT_USAGE, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _error(EXIT_USAGE, exc)
    except TrainingDiverged as exc:
        return _error(EXIT_DIVERGED, exc)
    except (DataError, GraphError, ShapeError) as exc:
        return _error(EXIT_DATA, exc)
    except OSError as exc:
        return _error(EXIT_DATA, f"{exc.filename or ''}: {exc.strerror or exc}")


if __name__ == "__main__":
    sys.exit(main())
