"""Training loops, fitness evaluation, the network-level search and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ceim
from .datasets import DatasetFile, split_halves
from .errors import ConfigurationError, FormatError, NumericalError
from .graph import MODULE_ORDER, NUM_MODULES, ModuleKind, SkeletonTopology
from .network import (
    NUM_LAYERS,
    ArchitectureParams,
    Mode,
    Network,
    architecture_document,
    sample_active_module,
    softmax_rows,
)
from .optim import SGD, step_lr, validate_schedule
from .tensor import Tape, cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 70
    batch_size: int = 16
    lr: float = 0.1
    milestones: Tuple[int, ...] = (30, 45)
    momentum: float = 0.9
    weight_decay: float = 0.0006
    frames: int = 300
    width: float = 1.0
    seed: int = 0
    cheb_basis: str = "chebyshev"
    double_softmax: bool = False

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        validate_schedule(self.milestones, self.epochs)
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not 1 <= self.frames <= 300:
            raise ConfigurationError("frames must lie in [1, 300]")


@dataclass
class SearchConfig(TrainConfig):
    weight_decay: float = 0.0001
    population: int = 50
    warmup_epochs: int = 20
    eval_fraction: float = 1.0 / 3.0
    epsilon_start: float = 1e-2
    epsilon_end: float = 1e-5
    cache_fitness: bool = False
    train_mode: str = "sampled"
    threshold: float = 0.1

    def ceim_config(self) -> ceim.CEIMConfig:
        return ceim.CEIMConfig(
            population=self.population, epochs=self.epochs, warmup_epochs=self.warmup_epochs,
            epsilon_start=self.epsilon_start, epsilon_end=self.epsilon_end,
            eval_fraction=self.eval_fraction, seed=self.seed, cache_fitness=self.cache_fitness,
        )


def _rng(seed, *path):
    return np.random.default_rng([int(seed)] + [int(p) for p in path])


def batches(n: int, batch_size: int, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    if len(labels) == 0:
        return float("nan")
    k = min(k, logits.shape[1])
    # stable ordering: ties resolve to the lower class id
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def predict(net: Network, data: np.ndarray, batch_size: int = 32, batch_stats: bool = False, **forward_kw) -> np.ndarray:
    """Logits for every sample, evaluated in fixed-order batches without a tape."""
    out = []
    for idx in batches(len(data), batch_size):
        out.append(net(data[idx], batch_stats=batch_stats, **forward_kw).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, net.num_classes))


def train_epoch(net: Network, opt: SGD, data: np.ndarray, labels: np.ndarray, batch_size: int, rng,
                forward_kw: Callable[[], dict]) -> Tuple[float, float]:
    """One pass of SGD over shuffled batches; returns (mean loss, top-1)."""
    total, correct, seen = 0.0, 0, 0
    for idx in batches(len(labels), batch_size, rng):
        if len(idx) < 2:
            continue  # batch statistics need two samples
        opt.zero_grad()
        with Tape() as tape:
            logits = net(data[idx], training=True, **forward_kw())
            loss = cross_entropy(logits, labels[idx])
        if not math.isfinite(loss.item()):
            raise NumericalError("training loss is not finite")
        tape.backward(loss)
        opt.step()
        total += loss.item() * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        seen += len(idx)
    return total / max(seen, 1), correct / max(seen, 1)


def _frames(ds: DatasetFile, frames: int) -> np.ndarray:
    return np.ascontiguousarray(ds.data[:, :, :frames])


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


@dataclass
class SearchOutcome:
    document: dict
    result: ceim.SearchResult
    network: Network


def run_search(ds: DatasetFile, cfg: SearchConfig, metrics: Optional[Callable[[dict], None]] = None,
               trace: Optional[Callable[[dict], None]] = None) -> SearchOutcome:
    """Alternate supernet training and CEIM updates over the architecture.

    The training set is split in halves by a seeded shuffle: the first half
    trains the shared weights, the second scores architectures (a fresh
    random ``eval_fraction`` of it each epoch, top-1 accuracy).
    """
    metrics = metrics or (lambda rec: None)
    trace = trace or (lambda rec: None)
    net = Network(ds.topology, ds.num_classes, Mode.MixedSum, seed=cfg.seed, width=cfg.width,
                  cheb_basis=cfg.cheb_basis, double_softmax=cfg.double_softmax)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    tr_idx, va_idx = split_halves(len(ds), cfg.seed)
    Xtr, ytr = _frames(ds, cfg.frames)[tr_idx], ds.labels[tr_idx]
    Xva, yva = _frames(ds, cfg.frames)[va_idx], ds.labels[va_idx]
    n_eval = max(1, int(round(len(va_idx) * cfg.eval_fraction)))
    state = {"epoch": 0, "subset": None}

    def trainer(epoch, mu, warmup):
        t0 = time.perf_counter()
        opt.lr = step_lr(epoch, cfg.lr, cfg.milestones)
        rng = _rng(cfg.seed, 1, epoch)
        probs_from = np.zeros_like(mu) if warmup else mu
        alpha = probs_from.reshape(NUM_LAYERS, NUM_MODULES)
        if warmup or cfg.train_mode == "sampled":
            def kw():
                return {"assignment": [sample_active_module(row, rng) for row in alpha]}
        elif cfg.train_mode == "mixed":
            def kw():
                return {"alpha": alpha}
        else:
            raise ConfigurationError(f"unknown train_mode {cfg.train_mode!r}")
        loss, acc = train_epoch(net, opt, Xtr, ytr, cfg.batch_size, rng, kw)
        state["epoch"] = epoch
        state["subset"] = np.sort(_rng(cfg.seed, 2, epoch).choice(len(va_idx), n_eval, replace=False))
        metrics({"epoch": epoch, "split": "search-train", "loss": loss, "top1": acc, "lr": opt.lr,
                 "warmup": bool(warmup), "wall_time": time.perf_counter() - t0})

    def fitness(alpha_flat):
        sub = state["subset"]
        logits = predict(net, Xva[sub], cfg.batch_size, batch_stats=True,
                         alpha=alpha_flat.reshape(NUM_LAYERS, NUM_MODULES))
        if not np.all(np.isfinite(logits)):
            return float("nan")
        return topk_accuracy(logits, yva[sub], 1)

    def on_iteration(rec):
        trace(rec)
        metrics({"epoch": rec["epoch"], "split": "search", "best_fitness": rec["best_fitness"],
                 "mean_fitness": rec["mean_fitness"], "reuse_fraction": rec["reuse_fraction"]})

    result = ceim.search(fitness, NUM_LAYERS * NUM_MODULES, cfg.ceim_config(), trainer, on_iteration)
    best_alpha = result.best.alpha.reshape(NUM_LAYERS, NUM_MODULES)
    doc = architecture_document(
        softmax_rows(best_alpha), cfg.threshold,
        source="best", fitness=float(result.best.fitness),
        alpha=best_alpha, mu=result.distribution.mu.reshape(NUM_LAYERS, NUM_MODULES),
    )
    return SearchOutcome(doc, result, net)


# ---------------------------------------------------------------------------
# Training of a finalized network
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    net: Network
    opt: SGD
    epoch: int = 0


def new_train_state(topology: SkeletonTopology, num_classes: int, subsets, cfg: TrainConfig) -> TrainState:
    net = Network(topology, num_classes, Mode.Finalized, subsets, seed=cfg.seed, width=cfg.width,
                  cheb_basis=cfg.cheb_basis, double_softmax=cfg.double_softmax)
    return TrainState(net, SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay))


def train_finalized(state: TrainState, ds: DatasetFile, cfg: TrainConfig, until: Optional[int] = None,
                    metrics: Optional[Callable[[dict], None]] = None,
                    on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Continue training from ``state.epoch`` up to ``until`` (default ``cfg.epochs``).

    Shuffling for epoch ``e`` depends only on ``(seed, e)``, so resuming
    from a checkpoint reproduces an uninterrupted run.
    """
    metrics = metrics or (lambda rec: None)
    X, y = _frames(ds, cfg.frames), ds.labels
    stop = cfg.epochs if until is None else min(until, cfg.epochs)
    while state.epoch < stop:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        state.opt.lr = step_lr(epoch, cfg.lr, cfg.milestones)
        loss, acc = train_epoch(state.net, state.opt, X, y, cfg.batch_size, _rng(cfg.seed, 3, epoch), dict)
        state.epoch = epoch
        metrics({"epoch": epoch, "split": "train", "loss": loss, "top1": acc, "lr": state.opt.lr,
                 "wall_time": time.perf_counter() - t0})
        if on_epoch is not None:
            on_epoch(state)
    return state


def evaluate(net: Network, ds: DatasetFile, frames: int = 300, batch_size: int = 32) -> dict:
    if ds.num_classes != net.num_classes:
        raise ConfigurationError(f"model has {net.num_classes} classes, dataset has {ds.num_classes}")
    if ds.num_joints != net.topology.num_joints:
        raise ConfigurationError(f"model expects {net.topology.num_joints} joints, dataset has {ds.num_joints}")
    logits = predict(net, _frames(ds, frames), batch_size)
    return score_metrics(softmax_rows(logits), ds.labels, logits)


def score_metrics(scores: np.ndarray, labels: np.ndarray, logits: Optional[np.ndarray] = None) -> dict:
    C = scores.shape[1]
    pred = np.argmax(scores, axis=1)
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    out = {"num_samples": int(len(labels)), "top1": topk_accuracy(scores, labels, 1), "confusion": confusion.tolist()}
    if C >= 5:
        out["top5"] = topk_accuracy(scores, labels, 5)
    if logits is not None:
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        out["loss"] = float(np.mean(lse - z[np.arange(len(labels)), labels])) if len(labels) else float("nan")
    out["scores"] = scores
    return out


# ---------------------------------------------------------------------------
# Checkpoints: b"SGCN1" | u16 version | u32 header length | JSON header |
#              u32 tensor count | tensors (u16 name length, name, u8 ndim,
#              u32 dims..., little-endian f64 data)
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SGCN1"
CKPT_VERSION = 1


def _write_tensor(buf, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    arr = np.asarray(arr, dtype="<f8")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def checkpoint_bytes(state: TrainState, cfg: TrainConfig, extra: Optional[dict] = None) -> bytes:
    net = state.net
    header = {
        "epoch": state.epoch,
        "num_classes": net.num_classes,
        "num_joints": net.topology.num_joints,
        "edges": [list(e) for e in net.topology.edges],
        "selected": [[k.value for k in kinds] for kinds in net.active_modules],
        "config": _jsonable(asdict(cfg)),
    }
    if extra:
        header.update(extra)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = list(net.state_dict().items())
    names = [n for n, _ in net.named_parameters()]
    tensors += [(f"optimizer.velocity.{n}", v) for n, v in zip(names, state.opt.state.velocity)]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra: Optional[dict] = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state, cfg, extra))


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:5]!r} at offset 0")
    try:
        version, hlen = struct.unpack_from("<HI", buf, 5)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} at offset 5")
        off = 11
        header = json.loads(buf[off : off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise FormatError(f"truncated tensor {name!r} at offset {off}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    if off != len(buf):
        raise FormatError(f"trailing bytes after offset {off}")
    return header, tensors


def state_from_checkpoint(path, cfg: Optional[TrainConfig] = None) -> Tuple[TrainState, TrainConfig, dict]:
    header, tensors = read_checkpoint(path)
    if cfg is None:
        c = dict(header["config"])
        c["milestones"] = tuple(c["milestones"])
        cfg = TrainConfig(**c)
    topo = SkeletonTopology(header["num_joints"], [tuple(e) for e in header["edges"]])
    subsets = [[ModuleKind.from_name(n) for n in layer] for layer in header["selected"]]
    state = new_train_state(topo, header["num_classes"], subsets, cfg)
    state.net.load_state_dict(tensors)
    names = [n for n, _ in state.net.named_parameters()]
    vel = []
    for n in names:
        key = f"optimizer.velocity.{n}"
        if key not in tensors:
            raise FormatError(f"checkpoint lacks optimizer buffer {key!r}")
        vel.append(tensors[key].copy())
    state.opt.state.velocity = vel
    state.epoch = int(header["epoch"])
    return state, cfg, header


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
