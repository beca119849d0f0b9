"""Raw prototypes and the calibration pool.

A calibrated prototype is

    p_c = p_c^raw + p_c^class + MLP_c(p_t^task)

where p_c^raw is the mean support feature, p_c^class a per-class offset drawn
from alpha * N(0, I), p_t^task a zero-initialized offset shared by the classes of
task t and MLP_c a two-layer rectifier projector (biases start at zero, so the
task contribution is exactly zero before training). Classes of a finished task
keep a frozen copy of p_c that is authoritative from then on.

Pool checkpoint layout (little-endian, version 1, no padding). `fw` is the
float width in bytes (4 or 8) and every vector/matrix is stored row-major:

    4s   magic b"EPTP"
    u32  version
    u32  d_f, d_t, d_h
    f64  alpha
    u32  flags  (bit 0 class offsets on, bit 1 task offsets on, bit 2 per-task projector)
    u32  fw
    u32  number of tasks
    per task:
        u32  number of classes n, u32 frozen
        u32  class ids[n]
        f    task offset[d_t]
        u32  number of projectors m (n, or 1 when shared)
        per projector: f W1[d_h*d_t], f b1[d_h], f W2[d_f*d_h], f b2[d_f]
        per class (class-id order):
            f    raw prototype[d_f], f class offset[d_f]
            u32  has frozen copy, then f frozen prototype[d_f] if set
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ept.errors import EmbeddingIOError, FormatError, PoolStateError, ValidationError

MODULE = "prototype_core"

POOL_MAGIC = b"EPTP"
POOL_VERSION = 1


def compute_raw_prototype(support_features, indices=None) -> np.ndarray:
    """Mean of the support features. With `indices`, rows are summed in sorted-index order."""
    support = np.asarray(support_features)
    if support.ndim != 2 or support.shape[0] == 0:
        raise ValidationError("empty support set", MODULE)
    if not np.all(np.isfinite(support)):
        raise ValidationError("non-finite support feature", MODULE)
    if indices is not None:
        support = support[np.argsort(np.asarray(indices), kind="stable")]
    return support.sum(axis=0) / support.shape[0]


def init_class_offset(d_f: int, alpha: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}", MODULE)
    return (alpha * rng.standard_normal(d_f)).astype(dtype)


@dataclass
class ClassProjector:
    W1: np.ndarray  # d_h x d_t
    b1: np.ndarray
    W2: np.ndarray  # d_f x d_h
    b2: np.ndarray

    @classmethod
    def create(cls, d_f, d_t, d_h, rng, dtype=np.float64) -> "ClassProjector":
        bound1 = 1.0 / np.sqrt(d_t)
        bound2 = 1.0 / np.sqrt(d_h)
        return cls(
            W1=rng.uniform(-bound1, bound1, size=(d_h, d_t)).astype(dtype),
            b1=np.zeros(d_h, dtype=dtype),
            W2=rng.uniform(-bound2, bound2, size=(d_f, d_h)).astype(dtype),
            b2=np.zeros(d_f, dtype=dtype),
        )

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, p_task):
        """Returns (output, pre-activation); the pre-activation is kept for backward."""
        hidden = self.W1 @ p_task + self.b1
        return self.W2 @ np.maximum(hidden, 0) + self.b2, hidden


def project_task_offset(proj: ClassProjector, p_task) -> np.ndarray:
    p_task = np.asarray(p_task)
    if p_task.ndim != 1 or p_task.shape[0] != proj.W1.shape[1]:
        raise ValidationError(
            f"task offset of shape {p_task.shape} does not match projector input {proj.W1.shape[1]}", MODULE
        )
    return proj.forward(p_task)[0]


@dataclass
class TaskEntry:
    task_offset: np.ndarray
    projectors: List[ClassProjector]
    class_ids: List[int]
    frozen: bool = False

    def projector_for(self, class_id) -> ClassProjector:
        if len(self.projectors) == 1:
            return self.projectors[0]
        return self.projectors[self.class_ids.index(class_id)]


@dataclass
class ClassRecord:
    class_id: int
    raw_prototype: np.ndarray
    class_offset: np.ndarray
    task_index: int
    frozen_calibrated: Optional[np.ndarray] = None


@dataclass
class CalibrationPool:
    d_f: int
    d_t: int
    d_h: int
    alpha: float = 0.001
    use_class_offset: bool = True
    use_task_offset: bool = True
    shared_projector: bool = False
    dtype: np.dtype = np.dtype(np.float64)
    records: Dict[int, ClassRecord] = field(default_factory=dict)
    tasks: List[TaskEntry] = field(default_factory=list)

    @classmethod
    def from_config(cls, pool_config, ablation, d_f, dtype="float64") -> "CalibrationPool":
        return cls(
            d_f=d_f,
            d_t=pool_config.d_t or d_f,
            d_h=pool_config.d_h,
            alpha=pool_config.alpha,
            use_class_offset=ablation.cs_offset,
            use_task_offset=ablation.ta_offset,
            shared_projector=pool_config.sharing == "per_task",
            dtype=np.dtype(dtype),
        )

    @property
    def class_ids(self) -> List[int]:
        return sorted(self.records)

    def task(self, task_index) -> TaskEntry:
        if not 0 <= task_index < len(self.tasks):
            raise PoolStateError(f"task {task_index} has not been opened", MODULE)
        return self.tasks[task_index]

    def trainable_parameters(self, task_index) -> Dict[str, np.ndarray]:
        """Enabled parameters of an unfrozen task, keyed by a stable path name."""
        task = self.task(task_index)
        if task.frozen:
            return {}
        params = {}
        if self.use_class_offset:
            for class_id in task.class_ids:
                params[f"task{task_index}/class{class_id}/offset"] = self.records[class_id].class_offset
        if self.use_task_offset:
            params[f"task{task_index}/offset"] = task.task_offset
            for name, proj in zip(projector_names(task), task.projectors):
                for key, value in proj.parameters().items():
                    params[f"task{task_index}/{name}/{key}"] = value
        return params

    def count_parameters(self, task_index=None) -> int:
        indices = range(len(self.tasks)) if task_index is None else [task_index]
        total = 0
        for t in indices:
            task = self.task(t)
            if self.use_class_offset:
                total += len(task.class_ids) * self.d_f
            if self.use_task_offset:
                total += task.task_offset.size + sum(p.num_parameters for p in task.projectors)
        return total

    def prototype_matrix(self, class_ids=None) -> np.ndarray:
        class_ids = self.class_ids if class_ids is None else class_ids
        return np.stack([calibrated_prototype(self.records[c], self) for c in class_ids])


def projector_names(task):
    if len(task.projectors) == 1 and len(task.class_ids) != 1:
        return ["projector"]
    return [f"projector{c}" for c in task.class_ids]


def open_task(pool: CalibrationPool, class_ids, support_features, support_labels, rng, support_indices=None) -> int:
    """Append a task for `class_ids` with raw prototypes from the given support set."""
    class_ids = sorted(int(c) for c in class_ids)
    if not class_ids:
        raise ValidationError("a task needs at least one class", MODULE)
    duplicates = [c for c in class_ids if c in pool.records]
    if duplicates or len(set(class_ids)) != len(class_ids):
        raise ValidationError(f"class ids already in the pool: {duplicates or class_ids}", MODULE)

    support_features = np.asarray(support_features)
    support_labels = np.asarray(support_labels)
    if support_features.ndim != 2 or support_features.shape[1] != pool.d_f:
        raise ValidationError(f"support features must be N x {pool.d_f}", MODULE)
    if support_indices is None:
        support_indices = np.arange(len(support_labels))
    support_indices = np.asarray(support_indices)

    task_index = len(pool.tasks)
    n_projectors = 1 if pool.shared_projector else len(class_ids)
    projectors = [ClassProjector.create(pool.d_f, pool.d_t, pool.d_h, rng, pool.dtype) for _ in range(n_projectors)]
    task = TaskEntry(task_offset=np.zeros(pool.d_t, dtype=pool.dtype), projectors=projectors, class_ids=class_ids)

    records = {}
    for class_id in class_ids:
        mask = support_labels == class_id
        raw = compute_raw_prototype(support_features[mask].astype(pool.dtype), support_indices[mask])
        raw.setflags(write=False)
        if pool.use_class_offset:
            offset = init_class_offset(pool.d_f, pool.alpha, rng, pool.dtype)
        else:
            offset = np.zeros(pool.d_f, dtype=pool.dtype)
        records[class_id] = ClassRecord(class_id, raw, offset, task_index)

    pool.tasks.append(task)
    pool.records.update(records)
    return task_index


def live_prototype(record: ClassRecord, pool: CalibrationPool, task: TaskEntry):
    """Calibrated prototype from the current parameters, plus the projector pre-activation (or None)."""
    prototype = record.raw_prototype + record.class_offset
    if not pool.use_task_offset:
        return prototype, None
    offset, hidden = task.projector_for(record.class_id).forward(task.task_offset)
    return prototype + offset, hidden


def calibrated_prototype(record: ClassRecord, pool: CalibrationPool) -> np.ndarray:
    if record.frozen_calibrated is not None:
        return record.frozen_calibrated
    return live_prototype(record, pool, pool.tasks[record.task_index])[0]


def freeze_stage(pool: CalibrationPool, task_index) -> None:
    task = pool.task(task_index)
    if task.frozen:
        raise PoolStateError(f"task {task_index} is already frozen", MODULE)
    for class_id in task.class_ids:
        record = pool.records[class_id]
        frozen = calibrated_prototype(record, pool).copy()
        frozen.setflags(write=False)
        record.frozen_calibrated = frozen
        record.class_offset.setflags(write=False)
    task.task_offset.setflags(write=False)
    for proj in task.projectors:
        for value in proj.parameters().values():
            value.setflags(write=False)
    task.frozen = True


def _write_array(out, array, dtype):
    out.append(np.ascontiguousarray(array, dtype=dtype).tobytes())


def encode_pool(pool: CalibrationPool) -> bytes:
    dtype = pool.dtype.newbyteorder("<")
    flags = int(pool.use_class_offset) | int(pool.use_task_offset) << 1 | int(pool.shared_projector) << 2
    out = [
        POOL_MAGIC,
        struct.pack("<IIIIdIII", POOL_VERSION, pool.d_f, pool.d_t, pool.d_h, pool.alpha, flags, dtype.itemsize, len(pool.tasks)),
    ]
    for task in pool.tasks:
        out.append(struct.pack("<II", len(task.class_ids), int(task.frozen)))
        out.append(np.asarray(task.class_ids, dtype="<u4").tobytes())
        _write_array(out, task.task_offset, dtype)
        out.append(struct.pack("<I", len(task.projectors)))
        for proj in task.projectors:
            for value in proj.parameters().values():
                _write_array(out, value, dtype)
        for class_id in task.class_ids:
            record = pool.records[class_id]
            _write_array(out, record.raw_prototype, dtype)
            _write_array(out, record.class_offset, dtype)
            out.append(struct.pack("<I", int(record.frozen_calibrated is not None)))
            if record.frozen_calibrated is not None:
                _write_array(out, record.frozen_calibrated, dtype)
    return b"".join(out)


def save_pool(pool: CalibrationPool, path) -> None:
    payload = encode_pool(pool)
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        raise EmbeddingIOError(f"cannot write pool checkpoint {path}: {e}")


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.raw):
            raise EmbeddingIOError(f"pool checkpoint {self.path} is truncated")
        chunk = self.raw[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count, shape=None):
        values = np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()
        return values.reshape(shape) if shape is not None else values


def load_pool(path) -> CalibrationPool:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise EmbeddingIOError(f"cannot read pool checkpoint {path}: {e}")
    reader = _Reader(raw, path)
    if reader.take(4) != POOL_MAGIC:
        raise FormatError(f"{path} is not a pool checkpoint", MODULE)
    version, d_f, d_t, d_h, alpha, flags, width, n_tasks = reader.unpack("<IIIIdIII")
    if version != POOL_VERSION:
        raise FormatError(f"unsupported pool checkpoint version {version}", MODULE)
    if width not in (4, 8):
        raise FormatError(f"unsupported float width {width}", MODULE)
    dtype = np.dtype(f"<f{width}")

    pool = CalibrationPool(
        d_f=d_f,
        d_t=d_t,
        d_h=d_h,
        alpha=alpha,
        use_class_offset=bool(flags & 1),
        use_task_offset=bool(flags & 2),
        shared_projector=bool(flags & 4),
        dtype=np.dtype(f"f{width}"),
    )
    for task_index in range(n_tasks):
        n_classes, frozen = reader.unpack("<II")
        class_ids = reader.array(np.dtype("<u4"), n_classes).astype(int).tolist()
        task_offset = reader.array(dtype, d_t)
        (n_projectors,) = reader.unpack("<I")
        projectors = [
            ClassProjector(
                W1=reader.array(dtype, d_h * d_t, (d_h, d_t)),
                b1=reader.array(dtype, d_h),
                W2=reader.array(dtype, d_f * d_h, (d_f, d_h)),
                b2=reader.array(dtype, d_f),
            )
            for _ in range(n_projectors)
        ]
        pool.tasks.append(TaskEntry(task_offset, projectors, class_ids))
        for class_id in class_ids:
            raw_prototype = reader.array(dtype, d_f)
            raw_prototype.setflags(write=False)
            record = ClassRecord(class_id, raw_prototype, reader.array(dtype, d_f), task_index)
            (has_frozen,) = reader.unpack("<I")
            if has_frozen:
                record.frozen_calibrated = reader.array(dtype, d_f)
            pool.records[class_id] = record
        if frozen:
            # stored frozen copies take precedence, so freezing keeps them byte for byte
            freeze_stage(pool, task_index)
    if reader.offset != len(raw):
        raise FormatError(f"{path} has trailing bytes", MODULE)
    return pool
