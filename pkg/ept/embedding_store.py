"""Embedding datasets: the EPTB file format, a synthetic generator and the
stage schedule of a few-shot class-incremental run.

EPTB layout (little-endian, no padding):

    4s   magic  b"EPTB"
    u32  version (1)
    u32  N      number of samples
    u32  d_f    embedding dimension
    u32  num_classes
    f32  features[N * d_f]  row-major
    u32  labels[N]
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from ept.config import ProtocolSpec
from ept.errors import EmbeddingIOError, FormatError, ProtocolError, ValidationError

MODULE = "embedding_store"

MAGIC = b"EPTB"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
FEATURE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")


@dataclass
class EmbeddingDataset:
    """Frozen-backbone features with integer labels. Arrays are read-only."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.array(self.features, dtype=FEATURE_DTYPE, ndmin=2)
        self.labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        self.num_classes = int(self.num_classes)
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> "EmbeddingDataset":
        if self.size < 1 or self.dim < 1:
            raise ValidationError(f"dataset must have N >= 1 and d_f >= 1, got {self.features.shape}", MODULE)
        if self.labels.shape[0] != self.size:
            raise ValidationError(f"{self.labels.shape[0]} labels for {self.size} samples", MODULE)
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1", MODULE)
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), found range [{self.labels.min()}, {self.labels.max()}]",
                MODULE,
            )
        if not np.all(np.isfinite(self.features)):
            bad = int(np.argwhere(~np.isfinite(self.features))[0][0])
            raise ValidationError(f"non-finite feature in row {bad}", MODULE)
        return self

    def rows_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def load_embeddings(path) -> EmbeddingDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise EmbeddingIOError(f"cannot read {path}: {e}")

    if len(raw) < HEADER.size:
        raise EmbeddingIOError(f"{path} is truncated: {len(raw)} bytes, header needs {HEADER.size}")
    magic, version, n, dim, num_classes = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path} is not an EPTB file (magic {magic!r})", MODULE)
    if version != VERSION:
        raise FormatError(f"{path} has unsupported EPTB version {version}", MODULE)

    feature_bytes = n * dim * FEATURE_DTYPE.itemsize
    expected = HEADER.size + feature_bytes + n * LABEL_DTYPE.itemsize
    if len(raw) < expected:
        raise EmbeddingIOError(f"{path} is truncated: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise FormatError(f"{path} has {len(raw) - expected} trailing bytes", MODULE)

    features = np.frombuffer(raw, dtype=FEATURE_DTYPE, count=n * dim, offset=HEADER.size).reshape(n, dim)
    labels = np.frombuffer(raw, dtype=LABEL_DTYPE, count=n, offset=HEADER.size + feature_bytes)
    return EmbeddingDataset(features, labels, num_classes).validate()


def encode_embeddings(dataset: EmbeddingDataset) -> bytes:
    dataset.validate()
    header = HEADER.pack(MAGIC, VERSION, dataset.size, dataset.dim, dataset.num_classes)
    features = np.ascontiguousarray(dataset.features, dtype=FEATURE_DTYPE).tobytes()
    labels = dataset.labels.astype(LABEL_DTYPE).tobytes()
    return header + features + labels


def save_embeddings(dataset: EmbeddingDataset, path) -> None:
    payload = encode_embeddings(dataset)
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        raise EmbeddingIOError(f"cannot write {path}: {e}")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    dim: int
    samples_per_class: int
    mean_scale: float = 10.0
    noise_std: float = 1.0
    bias_shift: float = 0.0

    def validate(self):
        if self.num_classes < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise ValidationError("num_classes, dim and samples_per_class must be >= 1", MODULE)
        if self.mean_scale <= 0:
            raise ValidationError("mean_scale must be > 0", MODULE)
        if self.noise_std < 0 or self.bias_shift < 0:
            raise ValidationError("noise_std and bias_shift must be >= 0", MODULE)


def _unit_rows(rng, rows, dim):
    directions = rng.standard_normal((rows, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    # a zero draw has probability zero but would divide by zero
    norms[norms == 0] = 1.0
    return directions / norms


def generate_synthetic(spec: SynthSpec, seed: int, protocol: Optional[ProtocolSpec] = None) -> EmbeddingDataset:
    """Gaussian classes around means drawn uniformly on a sphere of radius `mean_scale`.

    With `bias_shift > 0` the support rows of every incremental class (as chosen by
    `split_protocol(dataset, protocol, seed)`) are moved by `bias_shift` along one
    random unit vector per class, which biases the few-shot prototypes.
    """
    spec.validate()
    rng = np.random.default_rng(seed)

    means = spec.mean_scale * _unit_rows(rng, spec.num_classes, spec.dim)
    noise = rng.normal(0.0, spec.noise_std, size=(spec.num_classes, spec.samples_per_class, spec.dim))
    features = (means[:, None, :] + noise).reshape(-1, spec.dim)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    dataset = EmbeddingDataset(features, labels, spec.num_classes)

    if spec.bias_shift > 0:
        if protocol is None:
            raise ValidationError("bias_shift needs the protocol whose support sets it shifts", MODULE)
        plan = split_protocol(dataset, protocol, seed)
        shifted = np.array(dataset.features, dtype=np.float64)
        bias_rng = np.random.default_rng([seed, 1])
        for stage in plan.stages[1:]:
            directions = _unit_rows(bias_rng, len(stage.class_ids), spec.dim)
            for class_id, direction in zip(stage.class_ids, directions):
                rows = stage.support_indices[dataset.labels[stage.support_indices] == class_id]
                shifted[rows] += spec.bias_shift * direction
        dataset = EmbeddingDataset(shifted, labels, spec.num_classes)

    return dataset.validate()


@dataclass
class Stage:
    index: int
    class_ids: List[int]
    support_indices: np.ndarray
    test_indices: np.ndarray  # cumulative over stages 0..index


@dataclass
class StagePlan:
    stages: List[Stage] = field(default_factory=list)

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, index) -> Stage:
        return self.stages[index]

    def seen_classes(self, index: int) -> List[int]:
        return sorted(c for stage in self.stages[: index + 1] for c in stage.class_ids)

    def check(self, dataset: EmbeddingDataset) -> "StagePlan":
        seen = set()
        for stage in self.stages:
            classes = set(stage.class_ids)
            if classes & seen:
                raise ProtocolError(f"stage {stage.index} repeats classes {sorted(classes & seen)}", MODULE)
            seen |= classes
            if not set(dataset.labels[stage.support_indices].tolist()) <= classes:
                raise ProtocolError(f"stage {stage.index} support leaks other classes", MODULE)
            if set(dataset.labels[stage.test_indices].tolist()) != seen:
                raise ProtocolError(f"stage {stage.index} test set does not cover the seen classes", MODULE)
        return self


def _split_class(rows, n_test, n_support):
    test = rows[len(rows) - n_test:]
    support = rows[: len(rows) - n_test]
    if n_support is not None:
        support = support[:n_support]
    return support, test


def split_protocol(dataset: EmbeddingDataset, proto: ProtocolSpec, seed: int) -> StagePlan:
    """Slice a dataset into the base stage and `proto.stages` few-shot stages.

    Base classes are the lowest `base_classes` ids and each stage takes the next
    `ways` ids. Per class, rows are shuffled with a generator keyed by
    (seed, class id); the last `test_per_class` shuffled rows are test rows.
    Only labels are read, so the plan does not depend on feature values.
    """
    proto.validate()
    needed = proto.base_classes + proto.stages * proto.ways
    if needed > dataset.num_classes:
        raise ProtocolError(
            f"protocol needs {needed} classes but the dataset has {dataset.num_classes}", MODULE
        )

    test_all = proto.test_per_class == "all"
    class_ids = [list(range(proto.base_classes))]
    for t in range(proto.stages):
        start = proto.base_classes + t * proto.ways
        class_ids.append(list(range(start, start + proto.ways)))

    plan = StagePlan()
    cumulative_test = []
    for index, classes in enumerate(class_ids):
        support = []
        for class_id in classes:
            rows = np.random.default_rng([seed, class_id]).permutation(dataset.rows_of(class_id))
            if index == 0:
                n_test = max(1, int(round(len(rows) * proto.base_test_fraction))) if test_all else proto.test_per_class
                if len(rows) < n_test + 1:
                    raise ProtocolError(
                        f"base class {class_id} has {len(rows)} samples, needs at least {n_test + 1}", MODULE
                    )
                class_support, class_test = _split_class(rows, n_test, None)
            else:
                n_test = len(rows) - proto.shots if test_all else proto.test_per_class
                if n_test < 1 or len(rows) < proto.shots + n_test:
                    raise ProtocolError(
                        f"class {class_id} has {len(rows)} samples, needs {proto.shots} support plus test samples",
                        MODULE,
                    )
                class_support, class_test = _split_class(rows, n_test, proto.shots)
            support.append(class_support)
            cumulative_test.append(class_test)
        plan.stages.append(
            Stage(
                index=index,
                class_ids=classes,
                support_indices=np.sort(np.concatenate(support)),
                test_indices=np.sort(np.concatenate(cumulative_test)),
            )
        )
    return plan.check(dataset)
