"""Long-tailed feature datasets: synthetic generation, binary persistence,
text-table ingestion, and the two batch samplers.

Binary feature file layout (all little-endian):
    magic   4 bytes  "IMBF"
    version u32      1
    N       u64      sample count
    T       u32      tokens per sample
    D       u32      token dimension
    K       u32      number of classes
    role    u8       0 = train, 1 = test
    labels  N x u32
    features N*T*D x f64, C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DataError, DomainError, FormatError
from .losses import ClassStats

Array = np.ndarray

MAGIC = b"IMBF"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIIB")

ROLE_TRAIN = "train"
ROLE_TEST = "test"
_ROLE_CODES = {ROLE_TRAIN: 0, ROLE_TEST: 1}
_ROLE_NAMES = {v: k for k, v in _ROLE_CODES.items()}

INSTANCE_BALANCED = "instance_balanced"
CLASS_BALANCED = "class_balanced"
SAMPLER_STRATEGIES = (INSTANCE_BALANCED, CLASS_BALANCED)


@dataclass
class FeatureDataset:
    features: Array  # (N, T, D) float64
    labels: Array    # (N,) int64
    num_classes: int
    role: str = ROLE_TRAIN

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3:
            raise DataError(f"features must be (N, T, D), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels length must match the sample count")
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")
        if self.role not in _ROLE_CODES:
            raise DataError(f"role must be one of {sorted(_ROLE_CODES)}")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def tokens_per_sample(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def is_class_balanced(self) -> bool:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return bool(np.all(counts == counts[0]))


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic long-tailed generator."""
    num_classes: int
    head_count: int            # samples in the most frequent class
    imbalance_ratio: float     # head count / rarest count
    dim: int
    tokens: int = 1
    separation: float = 1.0    # scale of the per-class mean vectors
    noise: float = 1.0         # feature noise around the class mean
    test_per_class: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.imbalance_ratio < 1:
            raise ConfigError("imbalance ratio must be >= 1")
        if self.head_count < self.imbalance_ratio:
            raise ConfigError("head_count must be >= imbalance_ratio "
                              "so the rarest class keeps a sample")
        if self.dim < 1 or self.tokens < 1:
            raise ConfigError("dim and tokens must be >= 1")
        if self.test_per_class < 0:
            raise ConfigError("test_per_class must be >= 0")


def exponential_profile(head_count: int, ratio: float, num_classes: int) -> Array:
    """Class counts n_j = round(head_count * ratio^(-(j-1)/(K-1))).

    Rounding is half-up. Endpoints are exact: n_1 = head_count and
    n_K = round(head_count / ratio).
    """
    if num_classes == 1:
        counts = np.array([head_count], dtype=np.int64)
    else:
        j = np.arange(num_classes)
        raw = head_count * ratio ** (-j / (num_classes - 1))
        counts = np.floor(raw + 0.5).astype(np.int64)
    if np.any(counts < 1):
        raise ConfigError("count profile produced an empty class; "
                          "raise head_count or lower the imbalance ratio")
    return counts


def synthetic_class_means(spec: SyntheticSpec) -> Array:
    """The (K, D) class-mean matrix a given spec generates around."""
    seed = np.random.SeedSequence(spec.seed).spawn(3)[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    return spec.separation * rng.standard_normal((spec.num_classes, spec.dim))


def generate_synthetic_lt(spec: SyntheticSpec) -> tuple[FeatureDataset, FeatureDataset]:
    """Gaussian class clusters with exponentially decaying train counts.

    The test split is exactly class-balanced and drawn from an independent
    substream, so train and test never share a sample.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    train_rng, test_rng = (np.random.Generator(np.random.PCG64(s))
                           for s in seeds[1:])
    k, d, t = spec.num_classes, spec.dim, spec.tokens
    counts = exponential_profile(spec.head_count, spec.imbalance_ratio, k)
    means = synthetic_class_means(spec)

    def build(rng, per_class, role):
        labels = np.repeat(np.arange(k), per_class)
        n = labels.shape[0]
        feats = means[labels][:, None, :] + spec.noise * rng.standard_normal((n, t, d))
        return FeatureDataset(features=feats, labels=labels,
                              num_classes=k, role=role)

    train = build(train_rng, counts, ROLE_TRAIN)
    test = build(test_rng, np.full(k, spec.test_per_class), ROLE_TEST)
    return train, test


def save_features(ds: FeatureDataset, path) -> None:
    """Write the binary feature file; round trips are bit-exact."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ds.num_samples,
                              ds.tokens_per_sample, ds.dim, ds.num_classes,
                              _ROLE_CODES[ds.role]))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.features.astype("<f8").tobytes())


def _read_exact(fh, nbytes: int, offset: int, what: str) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"truncated feature file: expected {nbytes} bytes of "
                          f"{what} at byte {offset}, got {len(buf)}")
    return buf


def load_features(path) -> FeatureDataset:
    """Read a binary feature file written by `save_features`."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, _HEADER.size, 0, "header")
        magic, version, n, t, d, k, role_code = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported feature file version {version} at byte 4")
        if role_code not in _ROLE_NAMES:
            raise FormatError(f"unknown role code {role_code} at byte "
                              f"{_HEADER.size - 1}")
        offset = _HEADER.size
        labels_bytes = _read_exact(fh, 4 * n, offset, "labels")
        offset += 4 * n
        feats_bytes = _read_exact(fh, 8 * n * t * d, offset, "features")
        offset += 8 * n * t * d
        if fh.read(1):
            raise FormatError(f"trailing bytes after byte {offset}")
    labels = np.frombuffer(labels_bytes, dtype="<u4").astype(np.int64)
    feats = np.frombuffer(feats_bytes, dtype="<f8").reshape(n, t, d)
    return FeatureDataset(features=feats, labels=labels, num_classes=k,
                          role=_ROLE_NAMES[role_code])


def load_text_table(path, num_classes: int | None = None,
                    role: str = ROLE_TRAIN) -> FeatureDataset:
    """Plain-text fixture loader: each row is `label, v1, ..., vD` (T=1)."""
    labels, rows = [], []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: need a label and at "
                                  "least one feature value")
            try:
                label = int(parts[0])
                values = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, "
                                  f"got {len(values)}")
            labels.append(label)
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    feats = np.asarray(rows, dtype=np.float64)[:, None, :]
    return FeatureDataset(features=feats, labels=labels,
                          num_classes=num_classes, role=role)


def load_matrix_text(path) -> Array:
    """Plain-text matrix: one row of comma-separated floats per line."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values = [float(p) for p in line.split(",")]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} values, "
                                  f"got {len(values)}")
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def class_index(labels: Array, num_classes: int) -> tuple[Array, Array]:
    """Stable per-class index layout: (sorted order, class start offsets)."""
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=num_classes)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return order, starts


def sample_batch(ds: FeatureDataset, stats: ClassStats, strategy: str,
                 batch_size: int, rng: np.random.Generator,
                 index=None) -> Array:
    """Draw `batch_size` dataset indices i.i.d. with replacement.

    instance_balanced picks samples uniformly, so batch class frequencies
    follow the skewed prior. class_balanced picks a class uniformly, then a
    sample within it. Pass a precomputed `class_index(...)` tuple as `index`
    to avoid re-sorting in a training loop.
    """
    if ds.num_samples == 0:
        raise DataError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    if strategy == INSTANCE_BALANCED:
        return rng.integers(0, ds.num_samples, size=batch_size)
    if strategy == CLASS_BALANCED:
        counts = stats.counts
        if np.any(counts < 1):
            raise DataError("class-balanced sampling needs every class "
                            "to have at least one sample")
        order, starts = index if index is not None else class_index(
            ds.labels, stats.num_classes)
        classes = rng.integers(0, stats.num_classes, size=batch_size)
        within = rng.integers(0, counts[classes])
        return order[starts[classes] + within]
    raise ConfigError(f"unknown sampling strategy {strategy!r}")
