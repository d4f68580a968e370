"""Skeleton graphs and the eight graph function modules.

Fixed operators come from the skeleton topology: the propagation matrix
``L = I + D^-1/2 A D^-1/2`` and Chebyshev components ``T_k(L_hat)`` of
``L_hat = D^-1/2 A D^-1/2`` (spectrum in [-1, 1]).  Dynamic operators are
computed per sample from feature correlations by a
:class:`DynamicGraphGenerator`.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, Layer
from .tensor import Tensor


class ModuleKind(enum.Enum):
    """The eight graph function modules, in architecture-table column order."""

    FixedL = "L"
    Cheb4Norm = "L4n"
    Cheb4 = "L4"
    Cheb3 = "L3"
    Cheb2 = "L2"
    DynSpatial = "S"
    DynTemporal = "T"
    DynSpatioTemporal = "ST"

    @property
    def index(self) -> int:
        return MODULE_ORDER.index(self)

    @property
    def is_dynamic(self) -> bool:
        return self in (ModuleKind.DynSpatial, ModuleKind.DynTemporal, ModuleKind.DynSpatioTemporal)

    @classmethod
    def from_name(cls, name: str) -> "ModuleKind":
        for kind in cls:
            if name in (kind.value, kind.name):
                return kind
        raise ConfigurationError(f"unknown module name {name!r}")


MODULE_ORDER: Tuple[ModuleKind, ...] = tuple(ModuleKind)
NUM_MODULES = len(MODULE_ORDER)


@dataclass
class SkeletonTopology:
    num_joints: int
    edges: List[Tuple[int, int]]
    parent: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.num_joints <= 0:
            raise ConfigurationError("a skeleton needs at least one joint")
        seen = set()
        clean = []
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < self.num_joints and 0 <= j < self.num_joints):
                raise ConfigurationError(f"edge ({i}, {j}) outside [0, {self.num_joints})")
            if i == j:
                raise ConfigurationError(f"self-loop on joint {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigurationError(f"duplicate edge ({i}, {j})")
            seen.add(key)
            clean.append((i, j))
        self.edges = clean
        if self.parent is not None:
            self.parent = np.asarray(self.parent, dtype=np.int64)
            _check_forest(self.parent)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    def with_parents(self) -> "SkeletonTopology":
        """Copy with a parent array derived by BFS from the lowest joint of
        each connected component (roots map to -1)."""
        if self.parent is not None:
            return self
        nbrs = [[] for _ in range(self.num_joints)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        parent = np.full(self.num_joints, -2, dtype=np.int64)
        for root in range(self.num_joints):
            if parent[root] != -2:
                continue
            parent[root] = -1
            queue = deque([root])
            while queue:
                u = queue.popleft()
                for w in sorted(nbrs[u]):
                    if parent[w] == -2:
                        parent[w] = u
                        queue.append(w)
        return SkeletonTopology(self.num_joints, list(self.edges), parent)


def _check_forest(parent: np.ndarray):
    n = len(parent)
    for start in range(n):
        node, steps = start, 0
        while node >= 0:
            if node >= n:
                raise ConfigurationError(f"parent index {node} out of range")
            node = parent[node]
            steps += 1
            if steps > n:
                raise ConfigurationError("parent array contains a cycle")


# 1-based (joint, neighbour) pairs of the 25-joint Kinect v2 skeleton.
_NTU_PAIRS = [
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7), (9, 21),
    (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15), (17, 1),
    (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
]


def ntu_topology() -> SkeletonTopology:
    return SkeletonTopology(25, [(i - 1, j - 1) for i, j in _NTU_PAIRS])


def tree_topology(num_joints: int) -> SkeletonTopology:
    """Binary-tree skeleton: joint ``j`` hangs off ``(j - 1) // 2``."""
    edges = [(j, (j - 1) // 2) for j in range(1, num_joints)]
    parent = np.array([-1] + [(j - 1) // 2 for j in range(1, num_joints)], dtype=np.int64)
    return SkeletonTopology(num_joints, edges, parent)


def default_topology(num_joints: int) -> SkeletonTopology:
    return ntu_topology() if num_joints == 25 else tree_topology(num_joints)


# ---------------------------------------------------------------------------
# Fixed operators
# ---------------------------------------------------------------------------


def _sym_normalized_adjacency(A: np.ndarray) -> np.ndarray:
    deg = A.sum(axis=1)
    d = np.zeros_like(deg)
    nz = deg > 0
    d[nz] = 1.0 / np.sqrt(deg[nz])
    return d[:, None] * A * d[None, :]


def normalized_graph(topology: SkeletonTopology) -> np.ndarray:
    """``I + D^-1/2 A D^-1/2``; isolated joints keep only their identity entry."""
    if topology.num_joints <= 0:
        raise ConfigurationError("empty topology")
    L = np.eye(topology.num_joints) + _sym_normalized_adjacency(topology.adjacency())
    return 0.5 * (L + L.T)


@dataclass
class ChebyshevStack:
    """Polynomial graph operators of order 0..K plus the row-normalised order-K one.

    ``basis="chebyshev"`` holds ``T_k(L_hat)``; ``basis="power"`` holds plain
    powers ``L^k`` of the propagation matrix.
    """

    L: np.ndarray
    components: List[np.ndarray]
    normalized_top: np.ndarray
    basis: str = "chebyshev"

    @property
    def order(self) -> int:
        return len(self.components) - 1

    def operator(self, kind: ModuleKind) -> np.ndarray:
        if kind is ModuleKind.FixedL:
            return self.L
        if kind is ModuleKind.Cheb2:
            return self.components[2]
        if kind is ModuleKind.Cheb3:
            return self.components[3]
        if kind is ModuleKind.Cheb4:
            return self.components[4]
        if kind is ModuleKind.Cheb4Norm:
            return self.normalized_top
        raise ConfigurationError(f"{kind.name} has no fixed operator")


def row_normalize_abs(M: np.ndarray) -> np.ndarray:
    """``|M|`` scaled so every row sums to one; all-zero rows become identity rows."""
    A = np.abs(M)
    s = A.sum(axis=1)
    out = np.where(s[:, None] > 0, A / np.where(s > 0, s, 1.0)[:, None], 0.0)
    empty = s <= 0
    out[empty, np.flatnonzero(empty)] = 1.0
    return out


def chebyshev_components(L: np.ndarray, order: int = 4, basis: str = "chebyshev") -> ChebyshevStack:
    """Recursive components up to ``order`` (``T_k = 2 L_hat T_{k-1} - T_{k-2}``)."""
    L = np.asarray(L, dtype=np.float64)
    n = L.shape[0]
    eye = np.eye(n)
    if basis == "chebyshev":
        Lh = L - eye
        comps = [eye, Lh]
        for _ in range(2, order + 1):
            comps.append(2.0 * Lh @ comps[-1] - comps[-2])
    elif basis == "power":
        comps = [eye, L]
        for _ in range(2, order + 1):
            comps.append(L @ comps[-1])
    else:
        raise ConfigurationError(f"unknown basis {basis!r}; use 'chebyshev' or 'power'")
    return ChebyshevStack(L, comps[: order + 1], row_normalize_abs(comps[order]), basis)


# ---------------------------------------------------------------------------
# Dynamic operators
# ---------------------------------------------------------------------------


class GraphMode(enum.Enum):
    Spatial = "spatial"
    Temporal = "temporal"
    SpatioTemporal = "spatiotemporal"


DYNAMIC_MODES = {
    ModuleKind.DynSpatial: GraphMode.Spatial,
    ModuleKind.DynTemporal: GraphMode.Temporal,
    ModuleKind.DynSpatioTemporal: GraphMode.SpatioTemporal,
}


def embed_channels(out_channels: int) -> int:
    return max(out_channels // 4, 4)


def correlation_graph(phi: Tensor, psi: Tensor, double_softmax: bool = False) -> Tensor:
    """Row-stochastic (B, V, V) graph from embedded features (B, E, T, V).

    Logits are inner products of joint embeddings over channels and time,
    divided by ``E*T``; rows are normalised by a softmax over the target
    joint.  ``double_softmax`` applies the softmax twice.
    """
    if phi.shape != psi.shape or phi.ndim != 4:
        raise DimensionError(f"phi/psi shape mismatch: {phi.shape} vs {psi.shape}")
    B, E, Tn, V = phi.shape
    a = T.reshape(T.transpose(phi, (0, 3, 1, 2)), (B, V, E * Tn))
    b = T.reshape(psi, (B, E * Tn, V))
    logits = T.matmul(a, b) * (1.0 / (E * Tn))
    graph = T.softmax(logits, axis=-1)
    if double_softmax:
        graph = T.softmax(graph, axis=-1)
    return graph


class DynamicGraphGenerator(Layer):
    """Embedding pair (phi, psi) producing a per-sample joint correlation graph.

    Spatial uses 1x1 channel convolutions, Temporal uses 9x1 temporal
    convolutions and SpatioTemporal applies a 1x1 followed by a 9x1.
    """

    def __init__(self, mode: GraphMode, in_channels: int, embed_dim: int, rng=None,
                 kernel_t: int = 9, double_softmax: bool = False):
        if embed_dim <= 0:
            raise ConfigurationError("embed_dim must be positive")
        rng = np.random.default_rng() if rng is None else rng
        self.mode = GraphMode(mode)
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.double_softmax = double_softmax
        pad = (kernel_t - 1) // 2
        if self.mode is GraphMode.Spatial:
            self.phi = Conv2d(in_channels, embed_dim, 1, rng=rng)
            self.psi = Conv2d(in_channels, embed_dim, 1, rng=rng)
        elif self.mode is GraphMode.Temporal:
            self.phi = Conv2d(in_channels, embed_dim, kernel_t, padding=pad, rng=rng)
            self.psi = Conv2d(in_channels, embed_dim, kernel_t, padding=pad, rng=rng)
        else:
            self.phi = Conv2d(in_channels, embed_dim, 1, rng=rng)
            self.psi = Conv2d(in_channels, embed_dim, 1, rng=rng)
            self.phi_t = Conv2d(embed_dim, embed_dim, kernel_t, padding=pad, rng=rng)
            self.psi_t = Conv2d(embed_dim, embed_dim, kernel_t, padding=pad, rng=rng)

    def embed(self, x: Tensor):
        a, b = self.phi(x), self.psi(x)
        if self.mode is GraphMode.SpatioTemporal:
            a, b = self.phi_t(a), self.psi_t(b)
        return a, b

    def __call__(self, x: Tensor) -> Tensor:
        return dynamic_graph(x, self)


def dynamic_graph(features, gen: DynamicGraphGenerator) -> Tensor:
    features = T.as_tensor(features)
    if features.ndim != 4 or features.shape[1] != gen.in_channels:
        raise DimensionError(
            f"generator expects (B, {gen.in_channels}, T, V) features, got {features.shape}"
        )
    phi, psi = gen.embed(features)
    return correlation_graph(phi, psi, gen.double_softmax)


def propagate(features: Tensor, graph) -> Tensor:
    """Aggregate over joints: ``y[..., i] = sum_j G[i, j] x[..., j]``.

    ``graph`` is a fixed (V, V) array or a per-sample (B, V, V) tensor.
    """
    if isinstance(graph, np.ndarray):
        return T.matmul(features, Tensor(np.ascontiguousarray(graph.T)))
    gt = T.transpose(graph, (0, 2, 1))
    B, V, _ = gt.shape
    return T.matmul(features, T.reshape(gt, (B, 1, V, V)))


def apply_module(
    kind: ModuleKind,
    features,
    graphs: Optional[ChebyshevStack],
    gens: Mapping[ModuleKind, DynamicGraphGenerator],
    theta: Optional[Conv2d] = None,
) -> Tensor:
    """Propagate ``features`` (B, C, T, V) through module ``kind``'s graph, then project with ``theta``."""
    features = T.as_tensor(features)
    if kind.is_dynamic:
        gen = gens.get(kind) if gens else None
        if gen is None:
            raise ConfigurationError(f"module {kind.value} needs a dynamic graph generator")
        G = gen(features)
    else:
        if graphs is None:
            raise ConfigurationError(f"module {kind.value} needs the fixed graph stack")
        G = graphs.operator(kind)
        if G.shape[0] != features.shape[-1]:
            raise DimensionError(f"graph has {G.shape[0]} joints, features have {features.shape[-1]}")
    y = propagate(features, G)
    return theta(y) if theta is not None else y
