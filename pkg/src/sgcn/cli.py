"""Command-line entry point: ``sgcn <command> [options]``.

Commands: gendata, search, train, eval, fuse, export-arch.  Options may also
come from a JSON file given with ``--config``; explicit flags win.  Every
file a command writes goes under ``--output``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import datasets as D
from .errors import ConfigurationError, DataError, FormatError, NumericalError
from .network import (
    ArchitectureParams,
    architecture_document,
    document_subsets,
    document_weights,
    read_architecture,
    softmax_rows,
    validate_architecture,
    write_architecture,
)
from .optim import validate_schedule
from .training import (
    SearchConfig,
    TrainConfig,
    evaluate,
    new_train_state,
    run_search,
    save_checkpoint,
    score_metrics,
    state_from_checkpoint,
    train_finalized,
)

log = logging.getLogger("sgcn")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Threads, output and metrics helpers
# ---------------------------------------------------------------------------


def thread_count() -> Optional[int]:
    raw = os.environ.get("SGCN_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"SGCN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"SGCN_THREADS must be a positive integer, got {raw!r}")
    return n


@contextmanager
def thread_limit(n: Optional[int]):
    """Cap BLAS and numba worker threads at ``n`` (no-op when ``None``)."""
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    try:
        import numba

        with warnings.catch_warnings():
            # first use initialises the threading layer, which may warn about TBB
            warnings.simplefilter("ignore", numba.NumbaWarning)
            prev = numba.get_num_threads()
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        numba, prev = None, None
    try:
        with threadpool_limits(limits=n):
            yield
    finally:
        if numba is not None:
            numba.set_num_threads(prev)


class JsonlWriter:
    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "w")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(_plain(record), sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _outdir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_scores(path, scores: np.ndarray, ids=None):
    ids = range(len(scores)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"score_{c}" for c in range(scores.shape[1])])
        for sid, row in zip(ids, scores):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "sample_id":
        raise FormatError(f"{path}: missing 'sample_id' header")
    width = len(rows[0]) - 1
    ids, vals = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != width + 1:
            raise FormatError(f"{path}:{ln}: expected {width + 1} fields, found {len(row)}")
        ids.append(row[0])
        try:
            vals.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: {exc}") from None
    return ids, np.array(vals, dtype=np.float64).reshape(len(ids), width)


def fuse_scores(ids_a, a, ids_b, b) -> np.ndarray:
    """Elementwise mean of two aligned score tables."""
    if a.shape[1] != b.shape[1]:
        raise DataError(f"class counts differ: {a.shape[1]} vs {b.shape[1]}")
    if len(ids_a) != len(ids_b):
        raise DataError(f"sample counts differ: {len(ids_a)} vs {len(ids_b)}")
    for row, (x, y) in enumerate(zip(ids_a, ids_b)):
        if x != y:
            raise DataError(f"sample ids misaligned at row {row}: {x!r} vs {y!r}")
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Option handling
# ---------------------------------------------------------------------------

# dest -> default for options that a --config file may also set
_SHARED = {
    "seed": 0, "epochs": 70, "batch_size": 16, "lr": 0.1, "milestones": [30, 45], "momentum": 0.9,
    "frames": 300, "width": 1.0, "cheb_basis": "chebyshev", "double_softmax": False, "stream": "joint",
}
_DEFAULTS = {
    "gendata": {"classes": 3, "per_class": 100, "joints": 25, "frames": 64, "noise_std": 0.5, "seed": 0,
                "name": "data.skel"},
    "search": dict(_SHARED, weight_decay=0.0001, population=50, warmup_epochs=20, eval_fraction=1 / 3,
                   epsilon_start=1e-2, epsilon_end=1e-5, cache_fitness=False, train_mode="sampled", threshold=0.1),
    "train": dict(_SHARED, weight_decay=0.0006, threshold=None, resume=None, save_every=0),
    "eval": {"frames": None, "stream": None, "batch_size": 32},
    "fuse": {},
    "export-arch": {"threshold": None, "source": "best"},
}


def _resolve(args) -> argparse.Namespace:
    """Fill unset options from --config, then from built-in defaults."""
    defaults = _DEFAULTS[args.command]
    config = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(config, dict):
            raise ConfigurationError(f"{args.config}: config must be a JSON object")
        unknown = set(k.replace("-", "_") for k in config) - set(defaults) - {"data", "arch", "output", "test"}
        if unknown:
            raise ConfigurationError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    for key, value in config.items():
        key = key.replace("-", "_")
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    # options given by flag or config, as opposed to built-in defaults
    args.explicit = {k for k in defaults if getattr(args, k, None) is not None}
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _add_shared(p, search: bool):
    p.add_argument("--data", help="SKEL1 training file")
    p.add_argument("--config", help="JSON file of option values; flags override it")
    p.add_argument("--output", default="runs", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--milestones", type=int, nargs="*")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--frames", type=int, help="leading frames used from each 300-frame clip")
    p.add_argument("--width", type=float, help="channel multiplier for the block plan")
    p.add_argument("--cheb-basis", choices=["chebyshev", "power"])
    p.add_argument("--double-softmax", action="store_const", const=True)
    p.add_argument("--stream", choices=["joint", "bone"])
    if search:
        p.add_argument("--population", type=int)
        p.add_argument("--warmup-epochs", type=int)
        p.add_argument("--eval-fraction", type=float)
        p.add_argument("--epsilon-start", type=float)
        p.add_argument("--epsilon-end", type=float)
        p.add_argument("--cache-fitness", action="store_const", const=True)
        p.add_argument("--train-mode", choices=["sampled", "mixed"])
        p.add_argument("--threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgcn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gendata", help="write a synthetic SKEL1 dataset")
    p.add_argument("--config")
    p.add_argument("--output", default="runs")
    p.add_argument("--name", help="file name inside the output directory")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--joints", type=int)
    p.add_argument("--frames", type=int, help="frames per raw clip before repetition to 300")
    p.add_argument("--noise-std", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("search", help="CEIM architecture search")
    _add_shared(p, search=True)

    p = sub.add_parser("train", help="train a finalized network")
    _add_shared(p, search=False)
    p.add_argument("--arch", help="architecture JSON")
    p.add_argument("--threshold", type=float, help="re-finalize the architecture at this threshold")
    p.add_argument("--resume", help="SGCN1 checkpoint to continue from")
    p.add_argument("--save-every", type=int, help="also keep a checkpoint every N epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--output", default="runs")
    p.add_argument("--config")
    p.add_argument("--frames", type=int)
    p.add_argument("--stream", choices=["joint", "bone"])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--name", default="eval", help="prefix of the written files")

    p = sub.add_parser("fuse", help="average two score CSVs and recompute metrics")
    p.add_argument("scores_a")
    p.add_argument("scores_b")
    p.add_argument("--data", help="SKEL1 file supplying labels")
    p.add_argument("--output", default="runs")
    p.add_argument("--config")

    p = sub.add_parser("export-arch", help="write an architecture JSON from a search result or checkpoint")
    p.add_argument("source_file", help="architecture JSON or SGCN1 checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--source", choices=["best", "mu"], help="which alpha of a search result to finalize")
    p.add_argument("--output", default="runs")
    p.add_argument("--name", default="architecture.json")
    p.add_argument("--config")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load_stream(path, stream: str) -> D.DatasetFile:
    ds = D.load(path)
    return D.bones_dataset(ds) if stream == "bone" else ds


def _train_config(args, cls=TrainConfig, **extra):
    return cls(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, milestones=tuple(args.milestones),
               momentum=args.momentum, weight_decay=args.weight_decay, frames=args.frames, width=args.width,
               seed=args.seed, cheb_basis=args.cheb_basis, double_softmax=bool(args.double_softmax), **extra)


def cmd_gendata(args) -> int:
    if args.joints < 2:
        raise UsageError(f"--joints must be at least 2, got {args.joints}")
    if args.classes < 2 or args.per_class < 1:
        raise UsageError("--classes must be >= 2 and --per-class >= 1")
    spec = D.SyntheticMotionSpec(args.classes, args.per_class, args.joints, args.frames, args.noise_std)
    ds = D.synthesize(spec, np.random.default_rng(args.seed))
    path = _outdir(args) / args.name
    D.save(ds, path)
    log.info("wrote %d samples to %s", len(ds), path)
    print(path)
    return 0


def cmd_search(args) -> int:
    if not args.data:
        raise UsageError("search needs --data")
    ds = _load_stream(args.data, args.stream)
    cfg = _train_config(args, SearchConfig, population=args.population, warmup_epochs=args.warmup_epochs,
                        eval_fraction=args.eval_fraction, epsilon_start=args.epsilon_start,
                        epsilon_end=args.epsilon_end, cache_fitness=bool(args.cache_fitness),
                        train_mode=args.train_mode, threshold=args.threshold)
    out = _outdir(args)
    metrics, trace = JsonlWriter(out / "metrics.jsonl"), JsonlWriter(out / "search_trace.jsonl")
    try:
        outcome = run_search(ds, cfg, metrics, trace)
    finally:
        metrics.close()
        trace.close()
    write_architecture(out / "architecture.json", outcome.document)
    for layer in outcome.document["layers"]:
        log.info("layer %d: %s", layer["index"], ",".join(layer["selected"]))
    print(out / "architecture.json")
    return 0


def cmd_train(args) -> int:
    if not args.data:
        raise UsageError("train needs --data")
    ds = _load_stream(args.data, args.stream)
    out = _outdir(args)
    if args.resume:
        state, cfg, header = state_from_checkpoint(args.resume)
        if "epochs" in args.explicit:
            cfg.epochs = args.epochs
            validate_schedule(cfg.milestones, cfg.epochs)
        doc = header.get("architecture")
    else:
        if not args.arch:
            raise UsageError("train needs --arch (or --resume)")
        doc = read_architecture(args.arch)
        if args.threshold is not None:
            doc = architecture_document(document_weights(doc), args.threshold)
        cfg = _train_config(args)
        state = new_train_state(ds.topology, ds.num_classes, document_subsets(doc), cfg)
    if ds.num_joints != state.net.topology.num_joints:
        raise ConfigurationError(
            f"dataset has {ds.num_joints} joints, model expects {state.net.topology.num_joints}")
    if ds.num_classes != state.net.num_classes:
        raise ConfigurationError(f"dataset has {ds.num_classes} classes, model has {state.net.num_classes}")
    extra = {"architecture": doc, "stream": args.stream}

    def on_epoch(st):
        if args.save_every and st.epoch % args.save_every == 0:
            save_checkpoint(out / f"model_epoch{st.epoch:03d}.sgcn", st, cfg, extra)

    mode = "a" if args.resume else "w"
    with open(out / "metrics.jsonl", mode) as fh:
        def metrics(rec):
            fh.write(json.dumps(_plain(rec), sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %d loss %.4f top1 %.3f", rec["epoch"], rec["loss"], rec["top1"])
        train_finalized(state, ds, cfg, metrics=metrics, on_epoch=on_epoch)
    save_checkpoint(out / "model.sgcn", state, cfg, extra)
    print(out / "model.sgcn")
    return 0


def cmd_eval(args) -> int:
    state, cfg, header = state_from_checkpoint(args.model)
    stream = args.stream or header.get("stream") or "joint"
    ds = _load_stream(args.data, stream)
    frames = args.frames or cfg.frames
    res = evaluate(state.net, ds, frames, args.batch_size)
    out = _outdir(args)
    write_scores(out / f"{args.name}_scores.csv", res.pop("scores"))
    with open(out / f"{args.name}.json", "w") as fh:
        json.dump(_plain(res), fh, indent=2, sort_keys=True)
        fh.write("\n")
    line = f"top1 {res['top1']:.4f}"
    if "top5" in res:
        line += f" top5 {res['top5']:.4f}"
    print(line)
    return 0


def cmd_fuse(args) -> int:
    ids_a, a = read_scores(args.scores_a)
    ids_b, b = read_scores(args.scores_b)
    fused = fuse_scores(ids_a, a, ids_b, b)
    out = _outdir(args)
    write_scores(out / "fused_scores.csv", fused, ids_a)
    if args.data:
        labels = D.load(args.data).labels
        if len(labels) != len(fused):
            raise DataError(f"{len(fused)} scores but {len(labels)} labelled samples")
        res = score_metrics(fused, labels)
        res.pop("scores")
        with open(out / "fused.json", "w") as fh:
            json.dump(_plain(res), fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"top1 {res['top1']:.4f}")
    return 0


def cmd_export_arch(args) -> int:
    src = Path(args.source_file)
    with open(src, "rb") as fh:
        head = fh.read(5)
    if head == b"SGCN1":
        _, _, header = state_from_checkpoint(src)
        doc = header.get("architecture")
        if doc is None:
            raise FormatError(f"{src}: checkpoint carries no architecture")
    else:
        try:
            doc = json.loads(src.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{src}: invalid JSON ({exc})") from None
    validate_architecture(doc)
    extra = {k: v for k, v in doc.items() if k not in ("layers", "threshold", "source")}
    if args.source == "mu" and "mu" in doc:
        weights = ArchitectureParams(np.array(doc["mu"])).weights()
    elif "alpha" in doc:
        weights = softmax_rows(np.array(doc["alpha"]))
    else:
        weights = document_weights(doc)
    threshold = doc["threshold"] if args.threshold is None else args.threshold
    new = architecture_document(weights, threshold, source=args.source if "alpha" in doc else doc.get("source", "best"),
                                **extra)
    path = _outdir(args) / args.name
    write_architecture(path, new)
    print(path)
    return 0


COMMANDS = {
    "gendata": cmd_gendata, "search": cmd_search, "train": cmd_train,
    "eval": cmd_eval, "fuse": cmd_fuse, "export-arch": cmd_export_arch,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        args = _resolve(args)
        with thread_limit(thread_count()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sgcn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"sgcn: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"sgcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"sgcn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
