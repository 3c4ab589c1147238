"""I/Q frame data model, normalization, decimation, splitting and dataset I/O.

A dataset on disk is a JSON manifest plus a raw payload of little-endian
float32 values.  Frames are stored frame-major, I row before Q row, and
grouped into (class, domain) cells in ascending order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_MAGIC = "SRF-DATASET"
MANIFEST_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")
DEFAULT_FRAME_LENGTH = 256


class DatasetFormatError(ValueError):
    """Raised when a manifest or payload is malformed or inconsistent."""


@dataclass(frozen=True)
class IQFrame:
    """One capture: a 2 x T real matrix (row 0 = I, row 1 = Q) plus labels."""

    samples: np.ndarray
    device_label: int = 0
    domain_label: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[0] != 2:
            raise ValueError(f"IQ frame must have shape (2, T), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("IQ frame contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> "IQFrame":
        return IQFrame(samples, self.device_label, self.domain_label)


@dataclass
class Dataset:
    """A labelled collection of equal-length frames.

    ``frames`` has shape (N, 2, T) and is kept as float32, the payload
    encoding, so that save/load round-trips exactly.
    """

    frames: np.ndarray
    device_labels: np.ndarray
    domain_labels: np.ndarray
    class_count: int
    domains: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=PAYLOAD_DTYPE)
        self.device_labels = np.asarray(self.device_labels, dtype=np.int64).reshape(-1)
        self.domain_labels = np.asarray(self.domain_labels, dtype=np.int64).reshape(-1)
        if self.frames.ndim != 3 or self.frames.shape[1] != 2:
            if self.frames.size == 0:
                self.frames = self.frames.reshape(0, 2, self.frames.shape[-1] if self.frames.ndim == 3 else DEFAULT_FRAME_LENGTH)
            else:
                raise ValueError(f"frames must have shape (N, 2, T), got {self.frames.shape}")
        n = len(self.frames)
        if len(self.device_labels) != n or len(self.domain_labels) != n:
            raise ValueError("label arrays must match the number of frames")
        if n and (self.device_labels.min() < 0 or self.device_labels.max() >= self.class_count):
            raise ValueError("device label outside [0, class_count)")
        if not self.domains:
            n_dom = int(self.domain_labels.max()) + 1 if n else 0
            self.domains = [f"domain{i}" for i in range(n_dom)]
        if n and (self.domain_labels.min() < 0 or self.domain_labels.max() >= len(self.domains)):
            raise ValueError("domain label outside the domain list")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_length(self) -> int:
        return self.frames.shape[2]

    def frame(self, i: int) -> IQFrame:
        return IQFrame(self.frames[i].astype(np.float64),
                       int(self.device_labels[i]), int(self.domain_labels[i]))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.frames[index], self.device_labels[index],
                       self.domain_labels[index], self.class_count, list(self.domains))

    def select_domains(self, domains: Sequence[int]) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.domain_labels, list(domains))))

    def cell_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for c, d in zip(self.device_labels.tolist(), self.domain_labels.tolist()):
            counts[(c, d)] = counts.get((c, d), 0) + 1
        return dict(sorted(counts.items()))

    def canonical(self) -> "Dataset":
        """Return the frames reordered cell-major (class, then domain), stable within a cell."""
        order = np.lexsort((np.arange(len(self)), self.domain_labels, self.device_labels))
        return self.subset(order)

    def equals(self, other: "Dataset") -> bool:
        return (self.class_count == other.class_count
                and self.domains == other.domains
                and self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes()
                and np.array_equal(self.device_labels, other.device_labels)
                and np.array_equal(self.domain_labels, other.domain_labels))


@dataclass
class DatasetManifest:
    frame_length: int
    class_count: int
    domains: list[str]
    cells: list[tuple[int, int, int]]  # (class, domain, count)
    payload: str
    encoding: dict = field(default_factory=lambda: {
        "element": "float32", "byte_order": "little", "layout": "frame-major, I row then Q row"})

    @property
    def total_frames(self) -> int:
        return sum(c[2] for c in self.cells)

    def to_dict(self) -> dict:
        return {
            "magic": MANIFEST_MAGIC,
            "version": MANIFEST_VERSION,
            "frame_length": self.frame_length,
            "class_count": self.class_count,
            "domains": list(self.domains),
            "encoding": dict(self.encoding),
            "payload": self.payload,
            "total_frames": self.total_frames,
            "cells": [{"class": c, "domain": d, "count": n} for c, d, n in self.cells],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        if doc.get("magic") != MANIFEST_MAGIC:
            raise DatasetFormatError("not a dataset manifest (bad magic)")
        if doc.get("version") != MANIFEST_VERSION:
            raise DatasetFormatError(f"unsupported manifest version {doc.get('version')}")
        enc = doc["encoding"]
        if enc.get("element") != "float32" or enc.get("byte_order") != "little":
            raise DatasetFormatError(f"unsupported sample encoding {enc}")
        cells = [(int(c["class"]), int(c["domain"]), int(c["count"])) for c in doc["cells"]]
        m = cls(int(doc["frame_length"]), int(doc["class_count"]), list(doc["domains"]),
                cells, doc["payload"], dict(enc))
        for c, d, n in cells:
            if not 0 <= c < m.class_count or not 0 <= d < len(m.domains) or n < 0:
                raise DatasetFormatError(f"invalid cell ({c}, {d}, {n})")
        if "total_frames" in doc and doc["total_frames"] != m.total_frames:
            raise DatasetFormatError("cell counts do not sum to total_frames")
        return m


def manifest_for(dataset: Dataset, payload: str) -> DatasetManifest:
    cells = [(c, d, n) for (c, d), n in dataset.cell_counts().items()]
    return DatasetManifest(dataset.frame_length, dataset.class_count,
                           list(dataset.domains), cells, payload)


def save_dataset(dataset: Dataset, manifest_path, payload_path=None) -> DatasetManifest:
    """Write ``dataset`` as a manifest plus a contiguous float32 payload.

    Frames are written in canonical cell order.  The payload path is stored
    relative to the manifest when both live in the same directory.
    """
    manifest_path = Path(manifest_path)
    payload_path = Path(payload_path) if payload_path is not None else manifest_path.with_suffix(".f32")
    data = dataset.canonical()
    if data.frames.ndim != 3:
        raise ValueError("inconsistent frame lengths")
    try:
        ref = payload_path.resolve().relative_to(manifest_path.resolve().parent)
    except ValueError:
        ref = payload_path.resolve()
    manifest = manifest_for(data, str(ref))
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.write_bytes(data.frames.astype(PAYLOAD_DTYPE).tobytes())
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return manifest


def load_manifest(manifest_path) -> DatasetManifest:
    try:
        doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    try:
        return DatasetManifest.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"malformed manifest {manifest_path}: {exc}") from exc


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    payload_path = Path(manifest.payload)
    if not payload_path.is_absolute():
        payload_path = manifest_path.parent / payload_path
    try:
        raw = payload_path.read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read payload {payload_path}: {exc}") from exc
    T = manifest.frame_length
    expected = manifest.total_frames * 2 * T * PAYLOAD_DTYPE.itemsize
    if len(raw) != expected:
        raise DatasetFormatError(
            f"payload holds {len(raw)} bytes, manifest implies {expected} "
            f"({manifest.total_frames} frames of 2x{T})")
    frames = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(manifest.total_frames, 2, T).copy()
    if not np.all(np.isfinite(frames)):
        raise DatasetFormatError("payload contains non-finite samples")
    dev = np.concatenate([np.full(n, c) for c, _, n in manifest.cells]) if manifest.cells else np.zeros(0)
    dom = np.concatenate([np.full(n, d) for _, d, n in manifest.cells]) if manifest.cells else np.zeros(0)
    return Dataset(frames, dev, dom, manifest.class_count, list(manifest.domains))


def normalize_frame(frame: IQFrame, mode: str = "unit-power") -> IQFrame:
    """Scale a frame so that the RMS over all 2*T entries is one."""
    if mode == "none":
        return frame
    if mode != "unit-power":
        raise ValueError(f"unknown normalization mode {mode!r}")
    s = np.asarray(frame.samples, dtype=np.float64)
    rms = np.sqrt(np.mean(s * s))
    if rms == 0.0:
        raise ValueError("cannot unit-power normalize a zero-energy frame")
    return frame.with_samples(s / rms)


def downsample(frame: IQFrame, target_T: int = DEFAULT_FRAME_LENGTH) -> IQFrame:
    """Block-mean decimation to ``target_T`` samples; a ragged tail is dropped."""
    T = frame.length
    if T < target_T:
        raise ValueError(f"frame length {T} is shorter than target {target_T}")
    block = T // target_T
    if block == 1 and T == target_T:
        return frame
    s = np.asarray(frame.samples, dtype=np.float64)[:, : block * target_T]
    return frame.with_samples(s.reshape(2, target_T, block).mean(axis=2))


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    rest = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    # every requested partition gets at least one frame
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified split per (class, domain) cell into train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    requested = sum(r > 0 for r in ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in ratios]
    for c, d in dataset.cell_counts():
        idx = np.flatnonzero((dataset.device_labels == c) & (dataset.domain_labels == d))
        if len(idx) < requested:
            raise ValueError(f"cell (class {c}, domain {d}) has {len(idx)} frames, "
                             f"fewer than the {requested} partitions requested")
        idx = rng.permutation(idx)
        start = 0
        for p, k in enumerate(_allocate(len(idx), ratios)):
            parts[p].append(np.sort(idx[start:start + k]))
            start += k
    out = []
    for p in parts:
        index = np.concatenate(p) if p else np.zeros(0, dtype=np.int64)
        out.append(dataset.subset(np.sort(index)))
    return tuple(out)
