"""Few-shot episodes, synthetic class banks and the LTEN tensor file format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from .autodiff import default_dtype


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way: int
    task_id: int = 0
    rng_seed: int = 0

    @property
    def n_support(self) -> int:
        return len(self.support_y)

    @property
    def n_query(self) -> int:
        return len(self.query_y)

    def shots(self) -> np.ndarray:
        return np.bincount(self.support_y, minlength=self.way)


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str = "gaussian_clusters"  # or "patterned_images"
    input_shape: tuple[int, ...] = (16,)
    separation: float = 3.0
    noise: float = 0.3

    def __post_init__(self):
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.generator not in ("gaussian_clusters", "patterned_images"):
            raise ValueError(f"unknown synthetic generator {self.generator!r}")
        if self.generator == "patterned_images" and len(self.input_shape) != 3:
            raise ValueError("patterned_images needs a (channels, height, width) input shape")


@dataclass
class ClassBank:
    """Examples grouped by class: ``x[c]`` has shape (per_class, *input_shape)."""

    x: np.ndarray
    labels: np.ndarray  # flat labels aligned with x.reshape(-1, ...)

    @property
    def num_classes(self) -> int:
        return self.x.shape[0]

    @property
    def per_class(self) -> int:
        return self.x.shape[1]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x.shape[2:]

    @classmethod
    def from_flat(cls, x: np.ndarray, labels: np.ndarray) -> "ClassBank":
        """Group a labelled array; every class is truncated to the smallest class size."""
        labels = np.asarray(labels)
        classes = np.unique(labels)
        per = min(int(np.sum(labels == c)) for c in classes)
        grouped = np.stack([x[labels == c][:per] for c in classes])
        return cls(grouped, np.repeat(np.arange(len(classes)), per))


def generate_synthetic_class_bank(spec: SyntheticSpec, num_classes: int, per_class: int, rng) -> ClassBank:
    """Draw a labelled bank whose class separability is set by ``spec``.

    gaussian_clusters: class means on a sphere of radius ``separation`` plus
    isotropic Gaussian noise.  patterned_images: sinusoidal gratings with a
    class-specific orientation and frequency, amplitude ``separation``, random
    phase, plus pixel noise.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    dtype = default_dtype()
    shape = tuple(spec.input_shape)
    if spec.generator == "gaussian_clusters":
        dim = int(np.prod(shape))
        means = rng.normal(size=(num_classes, dim))
        means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
        noise = rng.normal(size=(num_classes, per_class, dim)) * spec.noise
        x = (means[:, None, :] + noise).reshape((num_classes, per_class) + shape)
    else:
        ch, h, w = shape
        yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        theta = rng.uniform(0, np.pi, num_classes)
        freq = rng.uniform(1.0, 3.0, num_classes)
        chan_gain = rng.uniform(0.5, 1.0, (num_classes, ch))
        phase = rng.uniform(0, 2 * np.pi, (num_classes, per_class))
        proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy  # (C, h, w)
        arg = 2 * np.pi * freq[:, None, None, None] * proj[:, None] + phase[:, :, None, None]
        wave = spec.separation * np.sin(arg)  # (C, P, h, w)
        x = wave[:, :, None] * chan_gain[:, None, :, None, None]
        x = x + rng.normal(size=x.shape) * spec.noise
    return ClassBank(x.astype(dtype), np.repeat(np.arange(num_classes), per_class))


@dataclass(frozen=True)
class EpisodeSamplerConfig:
    way: tuple[int, int] = (5, 5)
    shot: tuple[int, int] = (5, 5)
    query: tuple[int, int] = (5, 5)
    seed: int = 0

    def __post_init__(self):
        for name in ("way", "shot", "query"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        if self.way[0] < 2:
            raise ValueError("way must be at least 2")
        if self.shot[0] < 1 or self.query[0] < 1:
            raise ValueError("shot and query must be at least 1")


class InsufficientExamplesError(ValueError):
    pass


def sample_episode(cfg: EpisodeSamplerConfig, bank: ClassBank, rng, task_id: int = 0, rng_seed: int = 0) -> Episode:
    """Draw classes, then disjoint support/query examples per class.

    Labels are remapped to 0..way-1 in the order the classes were drawn.
    """
    way = int(rng.integers(cfg.way[0], cfg.way[1] + 1))
    if way > bank.num_classes:
        raise InsufficientExamplesError(f"way {way} exceeds {bank.num_classes} available classes")
    classes = rng.choice(bank.num_classes, size=way, replace=False)
    sx, sy, qx, qy = [], [], [], []
    for new, c in enumerate(classes):
        k = int(rng.integers(cfg.shot[0], cfg.shot[1] + 1))
        q = int(rng.integers(cfg.query[0], cfg.query[1] + 1))
        if k + q > bank.per_class:
            raise InsufficientExamplesError(
                f"class {c} has {bank.per_class} examples, episode needs {k} + {q}"
            )
        order = rng.permutation(bank.per_class)
        sx.append(bank.x[c, order[:k]])
        qx.append(bank.x[c, order[k : k + q]])
        sy.append(np.full(k, new))
        qy.append(np.full(q, new))
    return Episode(
        np.concatenate(sx),
        np.concatenate(sy),
        np.concatenate(qx),
        np.concatenate(qy),
        way,
        task_id,
        rng_seed,
    )


class EpisodeSampler:
    """Seeded episode stream over a fixed class bank."""

    def __init__(self, cfg: EpisodeSamplerConfig, bank: ClassBank):
        self.cfg = cfg
        self.bank = bank

    def task_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.cfg.seed, index]).generate_state(1, np.uint64)[0] >> 1)

    def episode(self, index: int) -> Episode:
        seed = self.task_seed(index)
        return self.from_seed(seed, task_id=index)

    def from_seed(self, seed: int, task_id: int = 0) -> Episode:
        return sample_episode(self.cfg, self.bank, np.random.default_rng(seed), task_id, seed)


def split_query_batches(episode: Episode, batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """ceil(M / batch_size) consecutive query batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("query batch size must be >= 1")
    m = episode.n_query
    return [
        (episode.query_x[i : i + batch_size], episode.query_y[i : i + batch_size])
        for i in range(0, m, batch_size)
    ]


def num_query_batches(m: int, batch_size: int) -> int:
    return math.ceil(m / batch_size)


# ---------------------------------------------------------------------------
# LTEN: little-endian tensor container
#
#   "LTEN" | u32 version=1 | u32 rank | rank x u64 extents | u8 dtype (0=f32, 1=f64)
#   | payload | u64 label count | count x u32 labels

MAGIC = b"LTEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_BYTES = 1 << 40


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DimensionOverflowError(TensorFormatError):
    pass


class LabelMismatchError(TensorFormatError):
    pass


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor_record(f: BinaryIO, x: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    x = np.asarray(x)
    if x.dtype not in _TAGS:
        raise TensorFormatError(f"unsupported dtype {x.dtype}; use float32 or float64")
    labels = np.zeros(0, dtype=np.uint32) if labels is None else np.asarray(labels)
    if labels.size and (x.ndim == 0 or labels.shape != (x.shape[0],)):
        raise LabelMismatchError(f"{labels.size} labels for leading extent {x.shape[:1]}")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise LabelMismatchError("labels must fit in u32")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, x.ndim))
    f.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    f.write(struct.pack("<B", _TAGS[x.dtype]))
    f.write(np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes())
    f.write(struct.pack("<Q", labels.size))
    f.write(labels.astype("<u4").tobytes())


def read_tensor_record(f: BinaryIO, magic: Optional[bytes] = None) -> tuple[np.ndarray, np.ndarray]:
    magic = _read_exact(f, 4, "magic") if magic is None else magic
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported LTEN version {version}")
    if rank > 32:
        raise DimensionOverflowError(f"rank {rank} is implausible")
    extents = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents"))
    (tag,) = struct.unpack("<B", _read_exact(f, 1, "dtype tag"))
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    count = 1
    for e in extents:
        count *= e
        if count * dtype.itemsize > _MAX_BYTES:
            raise DimensionOverflowError(f"extents {extents} overflow the payload limit")
    payload = _read_exact(f, count * dtype.itemsize, "payload")
    x = np.frombuffer(payload, dtype=dtype).reshape(extents).astype(dtype.newbyteorder("="))
    (n_labels,) = struct.unpack("<Q", _read_exact(f, 8, "label count"))
    if n_labels and (rank == 0 or n_labels != extents[0]):
        raise LabelMismatchError(f"{n_labels} labels for leading extent {extents[:1]}")
    labels = np.frombuffer(_read_exact(f, 4 * n_labels, "labels"), dtype="<u4").astype(np.int64)
    return x, labels


def write_tensor_file(path, x: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    with open(path, "wb") as f:
        write_tensor_record(f, x, labels)


def read_tensor_file(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        out = read_tensor_record(f)
        if f.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after tensor record")
    return out


# Checkpoints: one LTEN record per tensor, then a UTF-8 name index:
#   "LNIX" | u32 count | count x (u32 byte length | utf-8 name)

INDEX_MAGIC = b"LNIX"


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        for x in tensors.values():
            write_tensor_record(f, x)
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in tensors:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    arrays = []
    with open(path, "rb") as f:
        while True:
            magic = _read_exact(f, 4, "record magic")
            if magic == INDEX_MAGIC:
                break
            arrays.append(read_tensor_record(f, magic)[0])
        (count,) = struct.unpack("<I", _read_exact(f, 4, "index count"))
        if count != len(arrays):
            raise TensorFormatError(f"name index lists {count} tensors, file holds {len(arrays)}")
        names = []
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            names.append(_read_exact(f, n, "name").decode("utf-8"))
    return dict(zip(names, arrays))


def load_bank(path) -> ClassBank:
    x, labels = read_tensor_file(Path(path))
    if labels.size != x.shape[0]:
        raise LabelMismatchError(f"{path}: dataset files need one label per example")
    return ClassBank.from_flat(x.astype(default_dtype()), labels)
