"""Synthetic skeleton-action data, the ``.skl`` sequence format, and preprocessing."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import List, Optional

import numpy as np

from .topology import SkeletonGraph, resolve_graph

SKL_MAGIC = b"SKL1"
_SEQ_HEADER = struct.Struct("<IBBHHH")


class SklError(ValueError):
    pass


class BadMagicError(SklError):
    pass


class TruncatedError(SklError):
    def __init__(self, offset: int, need: int, have: int):
        self.offset = offset
        super().__init__(f"truncated .skl file at byte offset {offset}: need {need} bytes, {have} available")


class NodeCountError(SklError):
    pass


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # [T_raw, 3, N, M], meters
    label: int
    subject_id: int = 0
    view_id: int = 0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[1] != 3:
            raise ValueError(f"frames must be [T_raw, 3, N, M], got {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("sequence needs at least one frame")
        if f.shape[3] not in (1, 2):
            raise ValueError(f"person slots must be 1 or 2, got {f.shape[3]}")
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite coordinates")
        self.frames = f


# --------------------------------------------------------------------------- #
# preprocessing


def resample_and_center(seq: SkeletonSequence, T: int, root: int) -> np.ndarray:
    """Fixed-length ``[T, 3, N, M]`` sample.

    Every frame is shifted by the root position of person 1 in frame 1.  Long
    sequences are sampled at ``floor(i * T_raw / T)``; short ones are padded
    with trailing zero frames after centering.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    f = seq.frames.astype(np.float32)
    origin = f[0, :, root, 0].copy()
    f = f - origin[None, :, None, None]
    T_raw = f.shape[0]
    if T_raw > T:
        f = f[(np.arange(T) * T_raw) // T]
    elif T_raw < T:
        pad = np.zeros((T - T_raw, *f.shape[1:]), f.dtype)
        f = np.concatenate([f, pad])
    return f


@dataclass
class SkeletonDataset:
    sequences: list[SkeletonSequence]
    n_nodes: int

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    @property
    def subjects(self) -> np.ndarray:
        return np.array([s.subject_id for s in self.sequences], dtype=np.int64)

    def split(self, by: str = "subject"):
        """Train/test by subject parity (even -> train), by view (view 1 -> test), or no split."""
        if by == "none":
            return self, SkeletonDataset([], self.n_nodes)
        if by == "subject":
            test = [s.subject_id % 2 == 1 for s in self.sequences]
        elif by == "view":
            test = [s.view_id == 1 for s in self.sequences]
        else:
            raise ValueError(f"unknown split {by!r}")
        tr = [s for s, t in zip(self.sequences, test) if not t]
        te = [s for s, t in zip(self.sequences, test) if t]
        return SkeletonDataset(tr, self.n_nodes), SkeletonDataset(te, self.n_nodes)

    def to_arrays(self, T: int, root: int, M: int | None = None):
        """Stack preprocessed samples as ``X [S, T, 3, N, M]`` and labels ``[S]``."""
        xs = []
        for s in self.sequences:
            x = resample_and_center(s, T, root)
            if M is not None and x.shape[3] != M:
                if x.shape[3] > M:
                    raise ValueError(f"sequence has {x.shape[3]} persons, model expects {M}")
                x = np.concatenate([x, np.zeros((*x.shape[:3], M - x.shape[3]), x.dtype)], axis=3)
            xs.append(x)
        if not xs:
            n = self.n_nodes
            return np.zeros((0, T, 3, n, M or 1), np.float32), np.zeros(0, np.int64)
        return np.stack(xs), self.labels


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches over ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


# --------------------------------------------------------------------------- #
# synthetic generator


@dataclass
class Archetype:
    joint: int  # the limb is the subtree rooted here
    axis: List[float]
    frequency_hz: float = 1.0
    amplitude_m: float = 0.1
    phase_jitter: float = 1.0  # fraction of a full cycle


@dataclass
class SynthSpec:
    graph: str = "chain(9)"
    n_classes: int = 5
    samples_per_class: int = 60
    n_subjects: int = 10
    test_fraction: float = 1 / 3
    t_raw_min: int = 32
    t_raw_max: int = 48
    fps: float = 30.0
    bone_length_m: float = 0.12
    subject_scale_jitter: float = 0.1
    frequency_jitter: float = 0.05
    noise_sigma: float = 0.01
    margin: float = 0.25
    persons: int = 1
    archetypes: Optional[List[Archetype]] = None
    seed: int = 0

    def __post_init__(self):
        if self.archetypes is not None:
            self.archetypes = [a if isinstance(a, Archetype) else Archetype(**a) for a in self.archetypes]


def default_archetypes(g: SkeletonGraph, n_classes: int) -> list[Archetype]:
    """Spread classes over limbs, motion axes and frequencies."""
    nodes = [v for v in range(g.n_nodes) if v != g.root]
    axes = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]
    out = []
    for c in range(n_classes):
        joint = nodes[(c * len(nodes)) // n_classes] if nodes else g.root
        out.append(Archetype(joint=joint, axis=axes[c % 3], frequency_hz=0.6 + 0.5 * (c % 4), amplitude_m=0.1))
    return out


def _separated(a: Archetype, b: Archetype, margin: float) -> bool:
    if a.joint != b.joint or not np.allclose(a.axis, b.axis):
        return True
    return abs(a.frequency_hz - b.frequency_hz) >= margin or abs(a.amplitude_m - b.amplitude_m) >= margin * 0.1


def validate_spec(spec: SynthSpec, g: SkeletonGraph) -> list[Archetype]:
    arch = spec.archetypes or default_archetypes(g, spec.n_classes)
    if len(arch) != spec.n_classes:
        raise ValueError(f"{len(arch)} archetypes for {spec.n_classes} classes")
    if all(a.amplitude_m == 0 for a in arch):
        raise ValueError("degenerate spec: zero amplitude for every class")
    for a in arch:
        if not 0 <= a.joint < g.n_nodes:
            raise ValueError(f"archetype joint {a.joint} outside graph")
    for (i, a), (j, b) in combinations(enumerate(arch), 2):
        if not _separated(a, b, spec.margin):
            raise ValueError(f"classes {i} and {j} are not separated by margin {spec.margin}")
    if not 1 <= spec.t_raw_min <= spec.t_raw_max:
        raise ValueError("need 1 <= t_raw_min <= t_raw_max")
    if spec.persons not in (1, 2):
        raise ValueError("persons must be 1 or 2")
    if spec.n_subjects < 2:
        raise ValueError("need at least two subjects for a cross-subject split")
    return arch


def rest_pose(g: SkeletonGraph, bone_length: float, rng: np.random.Generator) -> np.ndarray:
    """``[3, N]`` rest coordinates: chains grow upward, branches fan out."""
    pos = np.zeros((3, g.n_nodes))
    children: dict[int, list[int]] = {}
    for s, t in g.edges:
        children.setdefault(s, []).append(t)
    order = [g.root]
    for u in order:
        kids = children.get(u, [])
        for i, v in enumerate(kids):
            if len(kids) == 1:
                d = np.array([0.0, 1.0, 0.0])
            else:
                ang = 2 * np.pi * i / len(kids)
                d = np.array([np.cos(ang), 0.5, np.sin(ang)])
            d = d + 0.1 * rng.normal(size=3)
            pos[:, v] = pos[:, u] + bone_length * d / np.linalg.norm(d)
            order.append(v)
    return pos


def _subtree(g: SkeletonGraph, joint: int) -> np.ndarray:
    depth = np.zeros(g.n_nodes)
    par = g.parents
    for v in range(g.n_nodes):
        u, d = v, 0
        while True:
            if u == joint:
                depth[v] = d + 1
                break
            if u == g.root:
                break
            u, d = par[u], d + 1
    return depth  # 0 outside the limb, 1 at the joint, growing distally


def synth_generate(spec: SynthSpec) -> SkeletonDataset:
    """Deterministic synthetic dataset for ``spec``.

    Samples of class ``c`` oscillate the limb below ``archetypes[c].joint``
    along its axis; displacement grows with distance from the joint.  Each
    subject has its own body scale.  Subjects with odd ids hold a
    ``test_fraction`` share of every class.
    """
    g = resolve_graph(spec.graph)
    arch = validate_spec(spec, g)
    rng = np.random.default_rng(spec.seed)
    pose = rest_pose(g, spec.bone_length_m, rng)
    scales = 1 + spec.subject_scale_jitter * rng.uniform(-1, 1, spec.n_subjects)
    even = list(range(0, spec.n_subjects, 2))
    odd = list(range(1, spec.n_subjects, 2))
    n_test = int(round(spec.samples_per_class * spec.test_fraction))
    seqs = []
    for c, a in enumerate(arch):
        limb = _subtree(g, a.joint)
        axis = np.asarray(a.axis, dtype=np.float64)
        axis = axis / (np.linalg.norm(axis) or 1.0)
        for i in range(spec.samples_per_class):
            is_test = i < n_test
            pool = odd if is_test else even
            subj = pool[i % len(pool)]
            T_raw = int(rng.integers(spec.t_raw_min, spec.t_raw_max + 1))
            f = a.frequency_hz * (1 + spec.frequency_jitter * rng.uniform(-1, 1))
            phase = 2 * np.pi * a.phase_jitter * rng.uniform()
            t = np.arange(T_raw) / spec.fps
            wave = a.amplitude_m * np.sin(2 * np.pi * f * t + phase)  # [T]
            frames = np.empty((T_raw, 3, g.n_nodes, spec.persons))
            for p in range(spec.persons):
                base = pose * scales[subj] + np.array([0.6 * p, 0.0, 0.0])[:, None]
                frames[..., p] = base[None] + wave[:, None, None] * axis[None, :, None] * limb[None, None, :]
            if spec.noise_sigma > 0:
                frames += rng.normal(scale=spec.noise_sigma, size=frames.shape)
            seqs.append(SkeletonSequence(frames.astype(np.float32), c, subj, view_id=i % 3))
    return SkeletonDataset(seqs, g.n_nodes)


# --------------------------------------------------------------------------- #
# .skl binary format


def skl_size(shapes) -> int:
    """Byte size of a file holding sequences with ``(T_raw, N, M)`` shapes."""
    return 8 + sum(_SEQ_HEADER.size + 4 * T * 3 * N * M for T, N, M in shapes)


def encode_skl(ds: SkeletonDataset) -> bytes:
    parts = [SKL_MAGIC, struct.pack("<I", len(ds.sequences))]
    for s in ds.sequences:
        T, _, N, M = s.frames.shape
        parts.append(_SEQ_HEADER.pack(T, N, M, s.label, s.subject_id, s.view_id))
        parts.append(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
    return b"".join(parts)


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_skl(path: str | Path, ds: SkeletonDataset) -> None:
    atomic_write(path, encode_skl(ds))


def decode_skl(buf: bytes, expected_nodes: int | None = None) -> SkeletonDataset:
    def take(off: int, n: int) -> bytes:
        if off + n > len(buf):
            raise TruncatedError(off, n, len(buf) - off)
        return buf[off : off + n]

    if take(0, 4) != SKL_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {SKL_MAGIC!r}")
    (count,) = struct.unpack("<I", take(4, 4))
    off = 8
    seqs = []
    n_nodes = expected_nodes
    for _ in range(count):
        T, N, M, label, subj, view = _SEQ_HEADER.unpack(take(off, _SEQ_HEADER.size))
        if expected_nodes is not None and N != expected_nodes:
            raise NodeCountError(f"sequence at byte {off} has N={N}, expected {expected_nodes}")
        if n_nodes is None:
            n_nodes = N
        elif N != n_nodes:
            raise NodeCountError(f"sequence at byte {off} has N={N}, previous sequences have {n_nodes}")
        off += _SEQ_HEADER.size
        nbytes = 4 * T * 3 * N * M
        frames = np.frombuffer(take(off, nbytes), dtype="<f4").reshape(T, 3, N, M).astype(np.float32)
        off += nbytes
        seqs.append(SkeletonSequence(frames, label, subj, view))
    return SkeletonDataset(seqs, n_nodes or 0)


def read_skl(path: str | Path, expected_nodes: int | None = None) -> SkeletonDataset:
    return decode_skl(Path(path).read_bytes(), expected_nodes)
