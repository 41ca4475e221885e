"""Skeleton-sequence files, preprocessing, and a seeded synthetic generator.

``.sksq`` layout (little-endian)::

    b"SKSQ" | u32 version | u32 C, T, V, M, num_classes, sample_count
    per sample: u32 label | float32 coords[C, T, V, M] row-major

A JSON sidecar ``<stem>.manifest.json`` carries ids, byte offsets, labels,
the topology name, the split tag and a SHA-256 of the binary file.
"""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import SkeletonTopology, build_topology

__all__ = [
    "DataFormatError", "SkeletonSequence", "SkeletonDataset", "MotionProgram", "SyntheticSpec",
    "save_dataset", "load_dataset", "manifest_path", "preprocess", "generate_synthetic",
    "default_programs", "curriculum_datasets",
]

MAGIC = b"SKSQ"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s7I")


class DataFormatError(ValueError):
    pass


@dataclass
class SkeletonSequence:
    coords: np.ndarray  # (C, T, V, M)
    label: int
    id: str = ""


@dataclass
class SkeletonDataset:
    """Stacked sequences sharing one (C, T, V, M) shape."""

    X: np.ndarray  # (N, C, T, V, M) float32
    y: np.ndarray  # (N,) int64
    num_classes: int
    ids: list[str] = field(default_factory=list)
    topology: str = "ntu25"
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 5:
            raise DataFormatError(f"dataset array must be (N, C, T, V, M), got {self.X.shape}")
        if len(self.y) != len(self.X):
            raise DataFormatError(f"{len(self.X)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataFormatError(f"label {int(self.y.max())} outside [0, {self.num_classes})")
        if not self.ids:
            self.ids = [f"{self.split}-{i:06d}" for i in range(len(self.y))]
        if len(set(self.ids)) != len(self.ids):
            raise DataFormatError("sample ids must be unique")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> SkeletonSequence:
        return SkeletonSequence(self.X[i], int(self.y[i]), self.ids[i])

    @classmethod
    def from_sequences(cls, seqs, num_classes, **kw):
        seqs = list(seqs)
        if seqs:
            shapes = {s.coords.shape for s in seqs}
            if len(shapes) > 1:
                raise DataFormatError(f"inconsistent (C, T, V, M) shapes: {sorted(shapes)}")
            X = np.stack([s.coords for s in seqs])
        else:
            X = np.zeros((0, 3, 1, 1, 1), dtype=np.float32)
        return cls(X, [s.label for s in seqs], num_classes, ids=[s.id for s in seqs] if
                   all(s.id for s in seqs) else [], **kw)


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".manifest.json")


def save_dataset(dataset: SkeletonDataset, path, shape=None) -> dict:
    """Write ``.sksq`` plus its manifest; returns the manifest."""
    X = np.ascontiguousarray(dataset.X, dtype="<f4")
    n = len(dataset)
    c, t, v, m = X.shape[1:] if n else (shape or X.shape[1:])
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, c, t, v, m, dataset.num_classes, n)
    per = 4 + 4 * c * t * v * m
    parts = [header]
    records = []
    for i in range(n):
        records.append({"id": dataset.ids[i], "offset": _HEADER.size + i * per,
                        "label": int(dataset.y[i])})
        parts.append(struct.pack("<I", int(dataset.y[i])))
        parts.append(X[i].tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    manifest = {
        "format": "sksq", "version": FORMAT_VERSION, "topology": dataset.topology,
        "num_classes": dataset.num_classes, "split": dataset.split,
        "sha256": hashlib.sha256(blob).hexdigest(), "samples": records,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(path) -> SkeletonDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataFormatError(f"truncated file: {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, c, t, v, m, num_classes, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported dataset format version {version}")
    per = 4 + 4 * c * t * v * m
    expected = _HEADER.size + n * per
    if len(data) < expected:
        bad = (len(data) - _HEADER.size) // per
        raise DataFormatError(f"truncated file at byte offset {len(data)}: sample {bad} "
                              f"incomplete, expected {expected} bytes")
    if len(data) > expected:
        raise DataFormatError(f"{len(data) - expected} trailing bytes after byte offset {expected}")
    X = np.empty((n, c, t, v, m), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        off = _HEADER.size + i * per
        (label,) = struct.unpack_from("<I", data, off)
        if label >= num_classes:
            raise DataFormatError(f"sample {i} at byte offset {off}: label {label} >= "
                                  f"{num_classes} classes")
        y[i] = label
        X[i] = np.frombuffer(data, dtype="<f4", count=c * t * v * m, offset=off + 4).reshape(c, t, v, m)
    mpath = manifest_path(path)
    kw = {}
    if mpath.exists():
        man = json.loads(mpath.read_text())
        if man.get("sha256") not in (None, hashlib.sha256(data).hexdigest()):
            raise DataFormatError(f"{path}: contents do not match the manifest checksum")
        recs = man.get("samples", [])
        if len(recs) != n:
            raise DataFormatError(f"manifest lists {len(recs)} samples, file holds {n}")
        offsets = [r["offset"] for r in recs]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise DataFormatError("manifest offsets must be strictly increasing")
        kw = dict(ids=[r["id"] for r in recs], topology=man.get("topology", "ntu25"),
                  split=man.get("split", "train"))
    ds = SkeletonDataset(X, y, num_classes, **kw)
    if n == 0:
        ds.X = np.zeros((0, c, t, v, m), dtype=np.float32)
    return ds


def preprocess(coords, target_frames=300, bodies=2) -> np.ndarray:
    """Loop-repeat or truncate to ``target_frames`` and zero-fill body slots.

    ``coords`` is (C, T, V, M_raw); returns (C, target_frames, V, bodies).
    """
    x = np.asarray(coords, dtype=np.float32)
    if x.ndim == 3:
        x = x[..., None]
    c, t, v, m = x.shape
    if v == 0:
        raise DataFormatError("sequence has zero joints")
    if t < 1:
        raise DataFormatError("sequence has zero frames")
    reps = -(-target_frames // t)
    x = np.concatenate([x] * reps, axis=1)[:, :target_frames] if reps > 1 else x[:, :target_frames]
    out = np.zeros((c, target_frames, v, bodies), dtype=np.float32)
    k = min(m, bodies)
    out[..., :k] = x[..., :k]
    return out


@dataclass(frozen=True)
class MotionProgram:
    joints: tuple[int, ...]
    frequency: float
    amplitude: float = 0.5
    phase: float = 0.0
    axis: int = 0


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 4
    samples_per_class: int = 50
    frames: int = 64
    bodies: int = 1
    noise_sigma: float = 0.02
    seed: int = 0
    programs: tuple[MotionProgram, ...] | None = None
    phase_jitter: float = 0.0  # per-sample uniform phase offset in [0, phase_jitter)
    split: str = "train"


def default_programs(class_count, topology: SkeletonTopology, amplitude=0.5):
    """Class ``c`` oscillates the joints ``j % class_count == c`` at ``c + 1``
    cycles per sequence, along axis ``c % 3``."""
    progs = []
    for c in range(class_count):
        joints = tuple(j for j in range(topology.joint_count)
                       if j % class_count == c and j != topology.center_joint)
        if not joints:
            joints = (c % topology.joint_count,)
        progs.append(MotionProgram(joints, float(c + 1), amplitude, 0.0, c % 3))
    return tuple(progs)


def generate_synthetic(spec: SyntheticSpec, topology: SkeletonTopology) -> SkeletonDataset:
    """Rest pose plus per-class sinusoidal joint offsets and Gaussian noise."""
    programs = spec.programs or default_programs(spec.class_count, topology)
    if len(programs) != spec.class_count:
        raise ValueError(f"{len(programs)} motion programs for {spec.class_count} classes")
    keys = [(tuple(sorted(p.joints)), p.frequency, p.axis) for p in programs]
    if len(set(keys)) != len(keys):
        warnings.warn("two classes share an identical motion program; they cannot be separated",
                      stacklevel=2)
    rng = np.random.default_rng(spec.seed)
    v = topology.joint_count
    rest = np.random.default_rng(12345).standard_normal((3, v)).astype(np.float64) * 0.5
    t = np.arange(spec.frames)
    X, y = [], []
    for c, prog in enumerate(programs):
        for _ in range(spec.samples_per_class):
            phase = prog.phase + rng.uniform(0, spec.phase_jitter) if spec.phase_jitter else prog.phase
            x = np.repeat(rest[:, None, :], spec.frames, axis=1)
            wave = prog.amplitude * np.sin(2 * np.pi * prog.frequency * t / spec.frames + phase)
            x[prog.axis][:, list(prog.joints)] += wave[:, None]
            x = x + rng.normal(0.0, spec.noise_sigma, x.shape) if spec.noise_sigma else x
            sample = np.zeros((3, spec.frames, v, spec.bodies))
            sample[..., 0] = x
            X.append(sample)
            y.append(c)
    X = np.asarray(X, dtype=np.float32).reshape(-1, 3, spec.frames, v, spec.bodies)
    ids = [f"{spec.split}-{spec.seed}-{i:06d}" for i in range(len(y))]
    return SkeletonDataset(X, y, spec.class_count, ids=ids, topology=topology.name, split=spec.split)


def curriculum_datasets(seed=0, topology=None, train_per_class=200, test_per_class=50,
                        frames=64, class_count=4, noise_sigma=0.02, phase_jitter=2 * np.pi):
    """Train/test pair for the 4-class synthetic curriculum."""
    topology = topology or build_topology("ntu25")
    base = dict(class_count=class_count, frames=frames, bodies=1, noise_sigma=noise_sigma,
                phase_jitter=phase_jitter)
    train = generate_synthetic(SyntheticSpec(samples_per_class=train_per_class, seed=seed,
                                             split="train", **base), topology)
    test = generate_synthetic(SyntheticSpec(samples_per_class=test_per_class, seed=seed + 1000,
                                            split="test", **base), topology)
    return train, test
