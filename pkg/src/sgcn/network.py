"""The ten-block searchable spatial-temporal GCN.

A block mixes the outputs of its graph function modules, then applies
Conv_S (1x1 + BN + ReLU) and Conv_T (9x1 + BN) and adds a residual before
the final ReLU.  Module outputs are combined in one of three ways:

* ``MixedSum``: weights ``softmax(alpha_row)`` over all eight modules;
* ``SampledSingle``: one module per block, drawn from ``softmax(alpha_row)``;
* ``Finalized``: plain sum over a fixed subset of modules.

Parameters are drawn from per-(block, component) random streams, so a
finalized network shares the exact initial weights of the matching
components in a search network built from the same seed.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .graph import (
    DYNAMIC_MODES,
    MODULE_ORDER,
    NUM_MODULES,
    ChebyshevStack,
    DynamicGraphGenerator,
    ModuleKind,
    SkeletonTopology,
    apply_module,
    chebyshev_components,
    embed_channels,
    normalized_graph,
)
from .layers import BatchNorm2d, Conv2d, Layer, Linear
from .tensor import Tensor

NUM_LAYERS = 10
CHANNEL_PLAN = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
STRIDE_PLAN = (1, 1, 1, 1, 2, 1, 1, 2, 1, 1)
TEMPORAL_KERNEL = 9


class Mode(enum.Enum):
    MixedSum = "mixed"
    SampledSingle = "sampled"
    Finalized = "finalized"


def softmax_rows(alpha: np.ndarray) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass
class ArchitectureParams:
    """Raw per-layer, per-module architecture parameters (K x M)."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (NUM_LAYERS, NUM_MODULES):
            raise ConfigurationError(
                f"architecture must be {NUM_LAYERS}x{NUM_MODULES}, got {self.alpha.shape}"
            )
        if not np.all(np.isfinite(self.alpha)):
            raise ConfigurationError("architecture parameters must be finite")

    @classmethod
    def uniform(cls):
        return cls(np.zeros((NUM_LAYERS, NUM_MODULES)))

    @classmethod
    def from_flat(cls, vec):
        return cls(np.asarray(vec, dtype=np.float64).reshape(NUM_LAYERS, NUM_MODULES))

    def weights(self) -> np.ndarray:
        """Mixing weights: a softmax over each row."""
        return softmax_rows(self.alpha)


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    temporal_stride: int
    active_modules: Sequence[ModuleKind]


def block_plan(in_channels=3, width=1.0, active=None) -> List[BlockConfig]:
    """Channel/stride plan of the ten blocks; ``width`` scales every channel count."""
    if width <= 0:
        raise ConfigurationError("width must be positive")
    chans = [max(1, int(round(c * width))) for c in CHANNEL_PLAN]
    plan = []
    prev = in_channels
    for i, (c, s) in enumerate(zip(chans, STRIDE_PLAN)):
        mods = MODULE_ORDER if active is None else tuple(active[i])
        plan.append(BlockConfig(prev, c, s, mods))
        prev = c
    return plan


def _rng(seed, *path):
    return np.random.default_rng([int(seed)] + [int(p) for p in path])


class GCNBlock(Layer):
    def __init__(self, cfg: BlockConfig, graphs: ChebyshevStack, index: int, seed: int = 0,
                 double_softmax: bool = False):
        if not cfg.active_modules:
            raise ConfigurationError(f"block {index + 1} has no active modules")
        self.config = cfg
        self.graphs = graphs
        cin, cout = cfg.in_channels, cfg.out_channels
        embed = embed_channels(cout)
        self.theta: Dict[str, Conv2d] = {}
        self.gens: Dict[str, DynamicGraphGenerator] = {}
        for kind in cfg.active_modules:
            k = kind.index
            self.theta[kind.value] = Conv2d(cin, cout, 1, rng=_rng(seed, index, k, 0))
            if kind.is_dynamic:
                self.gens[kind.value] = DynamicGraphGenerator(
                    DYNAMIC_MODES[kind], cin, embed, rng=_rng(seed, index, k, 1),
                    kernel_t=TEMPORAL_KERNEL, double_softmax=double_softmax,
                )
        self.conv_s = Conv2d(cout, cout, 1, rng=_rng(seed, index, 100))
        self.bn_s = BatchNorm2d(cout)
        pad = (TEMPORAL_KERNEL - 1) // 2
        self.conv_t = Conv2d(cout, cout, TEMPORAL_KERNEL, stride=cfg.temporal_stride, padding=pad,
                             rng=_rng(seed, index, 101))
        self.bn_t = BatchNorm2d(cout)
        if cin == cout and cfg.temporal_stride == 1:
            self.residual = None
        else:
            self.residual = Conv2d(cin, cout, 1, stride=cfg.temporal_stride, rng=_rng(seed, index, 102))

    @property
    def kinds(self) -> List[ModuleKind]:
        return list(self.config.active_modules)

    def module_output(self, kind: ModuleKind, h: Tensor) -> Tensor:
        gens = {ModuleKind(k): g for k, g in self.gens.items()}
        return apply_module(kind, h, self.graphs, gens, self.theta[kind.value])

    def aggregate(self, h: Tensor, weights: Mapping[ModuleKind, float]) -> Tensor:
        out = None
        for kind, w in weights.items():
            if kind.value not in self.theta:
                raise ConfigurationError(f"module {kind.value} is not part of this block")
            if w == 0.0:
                continue
            y = self.module_output(kind, h)
            if w != 1.0:
                y = y * float(w)
            out = y if out is None else out + y
        if out is None:
            raise ConfigurationError("all module weights are zero")
        return out

    def __call__(self, h, weights: Mapping[ModuleKind, float], training=False, batch_stats=None):
        h = T.as_tensor(h)
        z = self.aggregate(h, weights)
        z = T.relu(self.bn_s(self.conv_s(z), training, batch_stats))
        z = self.bn_t(self.conv_t(z), training, batch_stats)
        res = h if self.residual is None else self.residual(h)
        return T.relu(z + res)


def mixed_weights(alpha_row) -> Dict[ModuleKind, float]:
    w = softmax_rows(np.asarray(alpha_row, dtype=np.float64))
    return {kind: float(w[kind.index]) for kind in MODULE_ORDER}


def mixed_block_forward(block: GCNBlock, h, alpha_row, training=False, batch_stats=None) -> Tensor:
    """Block output with modules mixed by ``softmax(alpha_row)``."""
    return block(h, mixed_weights(alpha_row), training, batch_stats)


def sample_active_module(alpha_row, rng) -> ModuleKind:
    """Draw one module with probabilities ``softmax(alpha_row)``."""
    p = softmax_rows(np.asarray(alpha_row, dtype=np.float64))
    return MODULE_ORDER[int(rng.choice(NUM_MODULES, p=p))]


def finalize_architecture(weights, threshold: float = 0.1) -> List[List[ModuleKind]]:
    """Per-layer module subsets ``{i : w[l, i] > threshold}``.

    ``weights`` are per-row probability vectors (e.g. ``softmax(alpha)``).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != NUM_MODULES:
        raise ConfigurationError(f"expected an (L, {NUM_MODULES}) weight table, got {w.shape}")
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-2):
        raise ConfigurationError("weight rows must be probability vectors")
    subsets = []
    for l, row in enumerate(w):
        chosen = [kind for kind in MODULE_ORDER if row[kind.index] > threshold]
        if not chosen:
            raise ConfigurationError(
                f"layer {l + 1}: no module weight exceeds {threshold}; lower the threshold"
            )
        subsets.append(chosen)
    return subsets


class Network(Layer):
    """Ten GCN blocks, global average pooling and a linear classifier."""

    def __init__(self, topology: SkeletonTopology, num_classes: int, mode: Mode,
                 active: Optional[Sequence[Sequence[ModuleKind]]] = None, *, seed: int = 0,
                 width: float = 1.0, in_channels: int = 3, cheb_basis: str = "chebyshev",
                 double_softmax: bool = False):
        if num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        self.mode = Mode(mode)
        self.topology = topology
        self.num_classes = num_classes
        self.width = width
        self.cheb_basis = cheb_basis
        self.double_softmax = double_softmax
        self.seed = seed
        self.graphs = chebyshev_components(normalized_graph(topology), 4, cheb_basis)
        if self.mode is Mode.Finalized:
            if active is None or len(active) != NUM_LAYERS:
                raise ConfigurationError(f"finalized network needs {NUM_LAYERS} module subsets")
            for i, subset in enumerate(active):
                if not subset:
                    raise ConfigurationError(f"layer {i + 1}: empty module subset")
        plan = block_plan(in_channels, width, active if self.mode is Mode.Finalized else None)
        self.blocks = {str(i): GCNBlock(cfg, self.graphs, i, seed, double_softmax) for i, cfg in enumerate(plan)}
        self.fc = Linear(plan[-1].out_channels, num_classes, rng=_rng(seed, 1000))

    @property
    def block_list(self) -> List[GCNBlock]:
        return [self.blocks[str(i)] for i in range(NUM_LAYERS)]

    @property
    def active_modules(self) -> List[List[ModuleKind]]:
        return [b.kinds for b in self.block_list]

    def layer_weights(self, alpha=None, assignment=None) -> List[Dict[ModuleKind, float]]:
        if assignment is not None:
            if len(assignment) != NUM_LAYERS:
                raise ConfigurationError(f"assignment must name {NUM_LAYERS} modules")
            return [{ModuleKind(k) if not isinstance(k, ModuleKind) else k: 1.0} for k in assignment]
        if alpha is not None:
            a = alpha.alpha if isinstance(alpha, ArchitectureParams) else ArchitectureParams(alpha).alpha
            return [mixed_weights(row) for row in a]
        if self.mode is Mode.Finalized:
            return [{k: 1.0 for k in kinds} for kinds in self.active_modules]
        raise ConfigurationError(f"{self.mode.name} forward needs alpha or a module assignment")

    def __call__(self, batch, alpha=None, assignment=None, training=False, batch_stats=None) -> Tensor:
        return self.forward(batch, alpha, assignment, training, batch_stats)

    def forward(self, batch, alpha=None, assignment=None, training=False, batch_stats=None) -> Tensor:
        """Logits (B, num_classes) for a (B, C, T, V, M) batch."""
        x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        if x.ndim != 5:
            raise DimensionError(f"expected (B, C, T, V, M) input, got {x.shape}")
        B, C, Tn, V, M = x.shape
        if V != self.topology.num_joints:
            raise DimensionError(f"input has {V} joints, network topology has {self.topology.num_joints}")
        weights = self.layer_weights(alpha, assignment)
        # fold bodies into the batch axis
        h = Tensor(np.ascontiguousarray(x.transpose(0, 4, 1, 2, 3).reshape(B * M, C, Tn, V)))
        for block, w in zip(self.block_list, weights):
            h = block(h, w, training, batch_stats)
        pooled = T.global_avg_pool(h)
        pooled = T.mean(T.reshape(pooled, (B, M, pooled.shape[1])), axis=1)
        return self.fc(pooled)


def build_network(arch, topology: SkeletonTopology, num_classes: int, mode, *, threshold: float = 0.1,
                  active=None, **kwargs) -> Network:
    """Construct a network; ``Finalized`` mode derives module subsets from
    ``arch`` (softmax weights thresholded) unless ``active`` is given."""
    if not isinstance(arch, ArchitectureParams):
        arch = ArchitectureParams(arch)
    mode = Mode(mode)
    if mode is Mode.Finalized and active is None:
        active = finalize_architecture(arch.weights(), threshold)
    return Network(topology, num_classes, mode, active, **kwargs)


# ---------------------------------------------------------------------------
# Architecture documents
# ---------------------------------------------------------------------------


def architecture_document(weights, threshold: float = 0.1, **extra) -> dict:
    """JSON-ready architecture description with per-layer weights and selections."""
    w = np.asarray(weights, dtype=np.float64)
    subsets = finalize_architecture(w, threshold)
    doc = {
        "layers": [
            {
                "index": l + 1,
                "weights": {kind.value: float(w[l, kind.index]) for kind in MODULE_ORDER},
                "selected": [k.value for k in subsets[l]],
            }
            for l in range(w.shape[0])
        ],
        "threshold": float(threshold),
    }
    for key, value in extra.items():
        doc[key] = value.tolist() if isinstance(value, np.ndarray) else value
    return doc


def write_architecture(path, doc: dict):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def validate_architecture(doc) -> None:
    if not isinstance(doc, dict) or "layers" not in doc or "threshold" not in doc:
        raise ConfigurationError("architecture document needs 'layers' and 'threshold'")
    layers = doc["layers"]
    if len(layers) != NUM_LAYERS:
        raise ConfigurationError(f"architecture document must list {NUM_LAYERS} layers")
    names = {k.value for k in MODULE_ORDER}
    for i, layer in enumerate(layers):
        if layer.get("index") != i + 1:
            raise ConfigurationError(f"layer {i + 1}: bad index {layer.get('index')!r}")
        if set(layer.get("weights", {})) != names:
            raise ConfigurationError(f"layer {i + 1}: weights must name all {NUM_MODULES} modules")
        sel = layer.get("selected", [])
        if not sel or not set(sel) <= names:
            raise ConfigurationError(f"layer {i + 1}: invalid selection {sel!r}")


def read_architecture(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    validate_architecture(doc)
    return doc


def document_subsets(doc) -> List[List[ModuleKind]]:
    return [[ModuleKind.from_name(n) for n in layer["selected"]] for layer in doc["layers"]]


def document_weights(doc) -> np.ndarray:
    return np.array([[layer["weights"][k.value] for k in MODULE_ORDER] for layer in doc["layers"]])
