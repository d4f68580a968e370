"""Skeleton clip storage, preprocessing, bone streams and synthetic motion.

On-disk layout (little endian)::

    b"SKEL1" | u16 V | u16 num_classes | u32 num_samples | u16 edge_count
    | edge_count x (u16, u16)
    | num_samples x ( u32 label | 3*300*V*2 f32, C-order (C, T, V, M) )

Samples are held in memory as float64 arrays of shape (N, 3, 300, V, 2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, FormatError
from .graph import SkeletonTopology, default_topology

MAGIC = b"SKEL1"
CHANNELS = 3
FRAMES = 300
BODIES = 2

_HEADER = struct.Struct("<5sHHIH")
_EDGE = struct.Struct("<HH")
_LABEL = struct.Struct("<I")


@dataclass
class SkeletonSample:
    data: np.ndarray  # (3, 300, V, 2)
    label: int


@dataclass
class DatasetFile:
    data: np.ndarray  # (N, 3, 300, V, 2) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    topology: SkeletonTopology

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        expect = (n, CHANNELS, FRAMES, self.topology.num_joints, BODIES)
        if self.data.shape != expect:
            raise DataError(f"data shape {self.data.shape} does not match {expect}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_joints(self) -> int:
        return self.topology.num_joints

    def subset(self, idx) -> "DatasetFile":
        idx = np.asarray(idx)
        return DatasetFile(self.data[idx], self.labels[idx], self.num_classes, self.topology)

    def __getitem__(self, i) -> SkeletonSample:
        return SkeletonSample(self.data[i], int(self.labels[i]))


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def to_bytes(ds: DatasetFile) -> bytes:
    V = ds.num_joints
    parts = [_HEADER.pack(MAGIC, V, ds.num_classes, len(ds), len(ds.topology.edges))]
    parts += [_EDGE.pack(i, j) for i, j in ds.topology.edges]
    payload = ds.data.astype("<f4")
    for k in range(len(ds)):
        parts.append(_LABEL.pack(int(ds.labels[k])))
        parts.append(payload[k].tobytes(order="C"))
    return b"".join(parts)


def from_bytes(buf: bytes) -> DatasetFile:
    if len(buf) < 5 or buf[:5] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:5])!r} at offset 0 (expected {MAGIC!r})")
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: need {_HEADER.size} bytes at offset 0, have {len(buf)}")
    _, V, num_classes, n, n_edges = _HEADER.unpack_from(buf, 0)
    off = _HEADER.size
    edges_end = off + n_edges * _EDGE.size
    if len(buf) < edges_end:
        raise FormatError(f"truncated edge list at offset {off}: need {edges_end} bytes, have {len(buf)}")
    edges = [_EDGE.unpack_from(buf, off + k * _EDGE.size) for k in range(n_edges)]
    off = edges_end
    per_sample = _LABEL.size + 4 * CHANNELS * FRAMES * V * BODIES
    expected = off + n * per_sample
    if len(buf) != expected:
        raise FormatError(
            f"payload length mismatch at offset {off}: expected {expected} bytes in total "
            f"({n} samples x {per_sample}), found {len(buf)}"
        )
    try:
        topology = SkeletonTopology(V, edges)
    except ConfigurationError as exc:
        raise FormatError(f"invalid edge list at offset {_HEADER.size}: {exc}") from None
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (CHANNELS, FRAMES, V, BODIES))])
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=off)
    labels = arr["label"].astype(np.int64)
    if n and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"label {labels[bad]} >= num_classes {num_classes} at offset {off + bad * per_sample}")
    return DatasetFile(arr["x"].astype(np.float64), labels, num_classes, topology)


def save(ds: DatasetFile, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ds))


def load(path) -> DatasetFile:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def preprocess(clip, frames: int = FRAMES, bodies: int = BODIES) -> np.ndarray:
    """Tile a (3, T0, V, B0) clip along time to ``frames`` and zero-pad bodies."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4 or clip.shape[0] != CHANNELS:
        raise DataError(f"expected a (3, T, V, M) clip, got {clip.shape}")
    _, t0, V, b0 = clip.shape
    if t0 == 0:
        raise DataError("clip has no frames")
    if not 1 <= b0 <= bodies:
        raise DataError(f"clip has {b0} bodies, expected 1..{bodies}")
    reps = -(-frames // t0)
    tiled = np.concatenate([clip] * reps, axis=1)[:, :frames] if reps > 1 else clip[:, :frames]
    out = np.zeros((CHANNELS, frames, V, bodies))
    out[..., :b0] = tiled
    return out


def joints_to_bones(data, topology: SkeletonTopology) -> np.ndarray:
    """Bone vector of each joint: its position minus its parent's (roots are zero).

    Works on any array whose joint axis is second to last, e.g. (3, T, V, M)
    or (N, 3, T, V, M).
    """
    if topology.parent is None:
        raise ConfigurationError("bone derivation needs a parent array on the topology")
    data = np.asarray(data, dtype=np.float64)
    parent = np.asarray(topology.parent)
    if data.shape[-2] != parent.size:
        raise DataError(f"data has {data.shape[-2]} joints, topology has {parent.size}")
    bones = np.zeros_like(data)
    child = np.flatnonzero(parent >= 0)
    bones[..., child, :] = data[..., child, :] - data[..., parent[child], :]
    return bones


def bones_dataset(ds: DatasetFile) -> DatasetFile:
    topo = ds.topology.with_parents()
    return DatasetFile(joints_to_bones(ds.data, topo), ds.labels, ds.num_classes, ds.topology)


def split_halves(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split into a first and second half."""
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[: n // 2]), np.sort(perm[n // 2 :])


# ---------------------------------------------------------------------------
# Synthetic motion
# ---------------------------------------------------------------------------


@dataclass
class ClassSignature:
    pairs: List[Tuple[int, int]]
    frequency: float  # cycles per clip
    lag: float  # phase offset of the follower joint, radians
    direction: np.ndarray  # (3,) unit vector


@dataclass
class SyntheticMotionSpec:
    num_classes: int = 3
    samples_per_class: int = 100
    joints: int = 25
    frames: int = 64
    noise_std: float = 0.5
    amplitude: float = 1.0
    signature_seed: int = 0
    signatures: Optional[List[ClassSignature]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be positive")
        if self.joints < 2:
            raise ConfigurationError("need at least two joints")
        if not 1 <= self.frames <= FRAMES:
            raise ConfigurationError(f"frames must lie in [1, {FRAMES}]")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be nonnegative")
        if self.signatures is None:
            self.signatures = class_signatures(self.num_classes, self.joints, self.signature_seed)


def class_signatures(num_classes: int, joints: int, seed: int = 0) -> List[ClassSignature]:
    """Distinct coupled-joint signatures, independent of the sample seed so
    that separately generated train/test files share them."""
    rng = np.random.default_rng([seed, num_classes, joints])
    all_pairs = [(i, j) for i in range(joints) for j in range(joints) if i != j]
    order = rng.permutation(len(all_pairs))
    sigs, used = [], set()
    cursor = 0
    for c in range(num_classes):
        pairs = []
        while len(pairs) < 2 and cursor < len(order):
            i, j = all_pairs[order[cursor]]
            cursor += 1
            key = (min(i, j), max(i, j))
            if key in used:
                continue
            used.add(key)
            pairs.append((i, j))
        if not pairs:
            raise ConfigurationError("not enough joints for distinct class signatures")
        d = rng.standard_normal(3)
        sigs.append(ClassSignature(pairs, 2.0 + c, np.pi * (c + 1) / (num_classes + 1), d / np.linalg.norm(d)))
    return sigs


def rest_pose(joints: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng([seed, 7, joints]).normal(0.0, 1.0, size=(CHANNELS, joints))


def synthesize(spec: SyntheticMotionSpec, rng=None) -> DatasetFile:
    """Balanced labelled clips whose class lives in which joints move together.

    For class ``c`` each signature pair (leader, follower) oscillates along
    a class direction at frequency ``2 + c`` cycles per clip, the follower
    lagging by a class-specific phase.  ``noise_std`` scales a random
    global phase shift, amplitude jitter, distractor oscillations on other
    joints and white noise; with ``noise_std == 0`` every clip equals its
    class template.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    V, Tn, s = spec.joints, spec.frames, spec.noise_std
    base = rest_pose(V, spec.signature_seed)
    t = np.arange(Tn) / Tn
    data = np.zeros((spec.num_classes * spec.samples_per_class, CHANNELS, FRAMES, V, BODIES))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    for n, c in enumerate(labels):
        sig = spec.signatures[c]
        clip = np.repeat(base[:, None, :], Tn, axis=1)
        phase = s * rng.uniform(-np.pi, np.pi)
        amp = spec.amplitude * (1.0 + 0.2 * s * rng.standard_normal())
        for i, j in sig.pairs:
            lead = amp * np.sin(2 * np.pi * sig.frequency * t + phase)
            follow = amp * np.sin(2 * np.pi * sig.frequency * t + phase - sig.lag)
            clip[:, :, i] += sig.direction[:, None] * lead[None, :]
            clip[:, :, j] += sig.direction[:, None] * follow[None, :]
        if s > 0:
            k = int(rng.integers(V))
            f = rng.uniform(1.0, 6.0)
            d = rng.standard_normal(3)
            clip[:, :, k] += s * spec.amplitude * d[:, None] * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))[None, :]
            clip += s * 0.5 * rng.standard_normal(clip.shape)
        data[n] = preprocess(clip[..., None])
    return DatasetFile(data, labels, spec.num_classes, default_topology(V))


def nearest_centroid_accuracy(train: DatasetFile, test: Optional[DatasetFile] = None, frames: int = FRAMES) -> float:
    """Brute-force oracle: classify raw flattened trajectories by nearest class mean."""
    test = train if test is None else test
    Xtr = train.data[:, :, :frames].reshape(len(train), -1)
    Xte = test.data[:, :, :frames].reshape(len(test), -1)
    cents = np.stack([Xtr[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((Xte[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))
