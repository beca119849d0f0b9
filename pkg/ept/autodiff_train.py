"""Losses, exact gradients and the per-stage optimization loop.

Training minimizes

    L = mean CE(-R(f) / tau, y) + lambda_inter * mean L_inter(f)

where R are the negative-error-projector residuals computed against K, the
stack of frozen prototypes of past classes and live calibrated prototypes of
the current task. Gradients are derived by hand: the ridge coefficients
rho = A^-1 K f (A = K K^T + lambda I) are differentiated with the linear-solve
adjoint s = A^-1 g_rho, which contributes s f^T - (s rho^T + rho s^T) K to dL/dK.
Only rows of the current task's classes are mapped back to parameters.

After every optimizer step each live prototype is pulled back into a ball around
its raw mean of radius calibration_radius * ||p_raw|| / sqrt(n), n being the
class's support size.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import linalg

from ept.config import NepConfig, TrainConfig
from ept.errors import NumericError, PoolStateError, ValidationError
from ept.nep_classifier import NepModel, ridge_factor
from ept.prototype_core import (
    CalibrationPool,
    calibrated_prototype,
    freeze_stage,
    live_prototype,
    open_task,
    projector_names,
)

MODULE = "autodiff_train"


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class StageData:
    """Support rows of one stage. Every read goes through `on_read` so it can be audited."""

    stage: int
    features: np.ndarray
    labels: np.ndarray
    rows: np.ndarray
    on_read: Optional[Callable[[int, np.ndarray], None]] = None

    def __len__(self):
        return len(self.rows)

    def _read(self, rows) -> Batch:
        if self.on_read is not None:
            self.on_read(self.stage, rows)
        return Batch(self.features[rows], self.labels[rows])

    def support(self) -> Batch:
        return self._read(self.rows)

    def batch(self, positions) -> Batch:
        return self._read(self.rows[positions])

    def class_counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.labels[self.rows], return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


@dataclass
class GradientSet:
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.grads)

    def __getitem__(self, name):
        return self.grads[name]

    def __contains__(self, name):
        return name in self.grads

    def items(self):
        return self.grads.items()

    def max_norm(self) -> float:
        return max((float(np.linalg.norm(g)) for g in self.grads.values()), default=0.0)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class StageTrainReport:
    stage: int
    epochs: int
    params_trainable: int
    loss_trace: List[float] = field(default_factory=list)
    steps: int = 0


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nep_logits(model: NepModel, f, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValidationError(f"temperature must be > 0, got {tau}", MODULE)
    _, res = model.decide(np.atleast_2d(f))
    logits = -res / tau
    return logits[0] if np.ndim(f) == 1 else logits


def ce_loss(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValidationError(f"label {label} outside {logits.shape[-1]} logits", MODULE)
    return float(-_log_softmax(logits)[label])


def inter_loss(f, negatives, eps: float) -> float:
    """(1 / |P_neg|) / (sum_j ||f - p_j|| + eps); zero when there are no negatives."""
    if eps <= 0:
        raise ValidationError(f"epsilon must be > 0, got {eps}", MODULE)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, np.shape(f)[-1])
    if len(negatives) == 0:
        return 0.0
    total = np.linalg.norm(np.asarray(f) - negatives, axis=1).sum()
    return float(1.0 / len(negatives) / (total + eps))


def _stack_prototypes(pool: CalibrationPool, task_index: int):
    """K over all known classes (ascending id); rows of the current task are recomputed live."""
    task = pool.task(task_index)
    live = set() if task.frozen else set(task.class_ids)
    class_ids = pool.class_ids
    rows, hidden = [], {}
    for class_id in class_ids:
        record = pool.records[class_id]
        if class_id in live:
            prototype, hidden[class_id] = live_prototype(record, pool, task)
        else:
            prototype = calibrated_prototype(record, pool)
        rows.append(prototype)
    return np.asarray(class_ids), np.stack(rows), hidden


def _objective(batch: Batch, pool, task_index, config: TrainConfig, nep_config: NepConfig, with_grad: bool):
    class_ids, K, hidden = _stack_prototypes(pool, task_index)
    task = pool.task(task_index)
    labels = np.asarray(batch.labels)
    if not set(labels.tolist()) <= set(task.class_ids):
        raise ValidationError(f"batch labels must belong to task {task_index}", MODULE)

    F = np.asarray(batch.features, dtype=pool.dtype)
    B, C = len(labels), len(class_ids)
    positions = np.searchsorted(class_ids, labels)
    rows = np.arange(B)
    tau, eps = config.temperature, nep_config.epsilon

    if config.train_logits == "nep":
        factor = ridge_factor(K, nep_config.lambda_reg)
        rho = linalg.cho_solve(factor, K @ F.T).T
        diff = F[:, None, :] - rho[:, :, None] * K[None]
        norms = np.linalg.norm(diff, axis=-1)
        denom = np.abs(rho) + eps
        logits = -(norms / denom) / tau
    else:
        logits = -((F[:, None, :] - K[None]) ** 2).sum(axis=-1) / tau

    log_probs = _log_softmax(logits)
    ce = -log_probs[rows, positions]

    negative = np.ones((B, C), dtype=bool)
    negative[rows, positions] = False
    n_neg = C - 1
    dist = np.linalg.norm(F[:, None, :] - K[None], axis=-1)
    if n_neg > 0:
        dist_sum = (dist * negative).sum(axis=1)
        inter = 1.0 / n_neg / (dist_sum + eps)
    else:
        inter = np.zeros(B)

    loss = float(ce.mean() + config.lambda_inter * inter.mean())
    if not with_grad:
        return loss, None
    if task.frozen:
        return loss, GradientSet()

    g_logits = np.exp(log_probs)
    g_logits[rows, positions] -= 1.0
    g_logits /= B
    gK = np.zeros_like(K)

    if config.train_logits == "nep":
        g_res = -g_logits / tau
        alive = norms > 0
        u = (g_res / denom * alive / np.where(alive, norms, 1.0))[:, :, None] * diff
        gK -= np.einsum("bc,bcd->cd", rho, u)
        g_rho = -np.einsum("bcd,cd->bc", u, K) - g_res * norms / denom**2 * np.sign(rho)
        s = linalg.cho_solve(factor, g_rho.T)
        gK += s @ F - (s @ rho + rho.T @ s.T) @ K
    else:
        gK += (2.0 / tau) * (g_logits.T @ F - g_logits.sum(axis=0)[:, None] * K)

    if config.lambda_inter > 0 and n_neg > 0:
        weight = -config.lambda_inter / B / n_neg / (dist_sum + eps) ** 2
        near = dist > 0
        coef = weight[:, None] * negative * near / np.where(near, dist, 1.0)
        gK += np.einsum("bc,bcd->cd", coef, K[None] - F[:, None, :])

    return loss, _parameter_gradients(gK, class_ids, hidden, pool, task_index)


def _parameter_gradients(gK, class_ids, hidden, pool, task_index) -> GradientSet:
    task = pool.task(task_index)
    prefix = f"task{task_index}"
    grads = {}
    names = projector_names(task)
    if len(names) == 1:
        names = names * len(task.class_ids)
    names = dict(zip(task.class_ids, names))
    g_task = np.zeros_like(task.task_offset)
    for class_id in task.class_ids:
        g = gK[np.searchsorted(class_ids, class_id)]
        if pool.use_class_offset:
            grads[f"{prefix}/class{class_id}/offset"] = g.copy()
        if not pool.use_task_offset:
            continue
        proj = task.projector_for(class_id)
        pre = hidden[class_id]
        # rectifier derivative taken as 1 at exactly zero so zero-initialized offsets can start moving
        g_pre = (proj.W2.T @ g) * (pre >= 0)
        parts = {
            "W1": np.outer(g_pre, task.task_offset),
            "b1": g_pre,
            "W2": np.outer(g, np.maximum(pre, 0)),
            "b2": g.copy(),
        }
        for key, value in parts.items():
            name = f"{prefix}/{names[class_id]}/{key}"
            grads[name] = grads[name] + value if name in grads else value
        g_task += proj.W1.T @ g_pre
    if pool.use_task_offset:
        grads[f"{prefix}/offset"] = g_task

    for name, value in grads.items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite gradient for {name}", MODULE)
    return GradientSet(grads)


def total_loss(batch: Batch, pool, task_index, config: TrainConfig, nep_config: NepConfig) -> float:
    return _objective(batch, pool, task_index, config, nep_config, with_grad=False)[0]


def loss_and_gradients(batch: Batch, pool, task_index, config: TrainConfig, nep_config: NepConfig):
    return _objective(batch, pool, task_index, config, nep_config, with_grad=True)


def backward(batch: Batch, pool, task_index, config: TrainConfig, nep_config: NepConfig) -> GradientSet:
    return loss_and_gradients(batch, pool, task_index, config, nep_config)[1]


def optimizer_step(params: Dict[str, np.ndarray], grads: GradientSet, state: OptimizerState, config: TrainConfig):
    """Adam with bias correction, updating `params` in place."""
    state.step += 1
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, value in params.items():
        g = grads[name] if name in grads else np.zeros_like(value)
        if g.shape != value.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, parameter has {value.shape}", MODULE)
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        value -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


def calibration_limits(pool: CalibrationPool, task_index, class_counts: Dict[int, int], radius: float) -> Dict[int, float]:
    """Largest distance each live prototype may keep from its raw mean."""
    limits = {}
    for class_id in pool.task(task_index).class_ids:
        raw = pool.records[class_id].raw_prototype
        n = max(class_counts.get(class_id, 1), 1)
        limits[class_id] = radius * float(np.linalg.norm(raw)) / np.sqrt(n)
    return limits


def limit_calibration(pool: CalibrationPool, task_index, limits: Dict[int, float]) -> None:
    """Pull every live prototype of the task back inside its calibration ball, in place.

    With class offsets on, the excess is taken off the class offset, which moves
    the prototype radially onto the ball. Otherwise each projector's output layer
    is scaled by the tightest factor among the classes it serves.
    """
    task = pool.task(task_index)
    scales = {}
    for class_id in task.class_ids:
        record = pool.records[class_id]
        delta = live_prototype(record, pool, task)[0] - record.raw_prototype
        norm = float(np.linalg.norm(delta))
        scale = 1.0 if norm <= limits[class_id] else limits[class_id] / norm
        scales[class_id] = scale
        if scale < 1.0 and pool.use_class_offset:
            record.class_offset -= (1.0 - scale) * delta
    if pool.use_class_offset or not pool.use_task_offset:
        return
    if len(task.projectors) == 1:
        groups = [(task.projectors[0], task.class_ids)]
    else:
        groups = [(proj, [class_id]) for proj, class_id in zip(task.projectors, task.class_ids)]
    for proj, class_ids in groups:
        scale = min(scales[c] for c in class_ids)
        if scale < 1.0:
            proj.W2 *= scale
            proj.b2 *= scale


def train_stage(stage_data: StageData, pool: CalibrationPool, config: TrainConfig, nep_config: NepConfig) -> StageTrainReport:
    """Optimize the task opened for `stage_data.stage`, then freeze it."""
    task_index = stage_data.stage
    task = pool.task(task_index)
    if task.frozen:
        raise PoolStateError(f"stage {task_index} is frozen and cannot be trained", MODULE)

    epochs = config.base_epochs if task_index == 0 else config.inc_epochs
    report = StageTrainReport(stage=task_index, epochs=epochs, params_trainable=pool.count_parameters(task_index))
    params = pool.trainable_parameters(task_index)
    if params:
        limits = None
        if config.calibration_radius is not None:
            limits = calibration_limits(pool, task_index, stage_data.class_counts(), config.calibration_radius)
        rng = np.random.default_rng([config.seed, task_index])
        state = OptimizerState()
        for _ in range(epochs):
            order = rng.permutation(len(stage_data))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = stage_data.batch(order[start : start + config.batch_size])
                loss, grads = loss_and_gradients(batch, pool, task_index, config, nep_config)
                optimizer_step(params, grads, state, config)
                if limits is not None:
                    limit_calibration(pool, task_index, limits)
                total += loss * len(batch)
            report.loss_trace.append(total / len(order))
        report.steps = state.step
    freeze_stage(pool, task_index)
    return report


@dataclass
class GradCheckResult:
    trials: int
    max_rel_err: float
    worst_parameter: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def random_instance(rng, d_f=8, n_classes=5, n_frozen=2, d_h=4, d_t=8, batch_size=6, dtype="float64", shared=False):
    """A small pool (one frozen task, one live task) and a batch for the live task.

    Parameters are moved away from their initial values and every projector
    pre-activation is kept at least 0.2 away from the rectifier kink, so central
    differences stay on one side of it. Raw prototypes are orthogonal with norm 2
    and the projector output stays small against them, so every ridge
    coefficient of the batch keeps a magnitude of roughly 0.4 or more.
    """
    if n_classes > d_f:
        raise ValidationError(f"need n_classes <= d_f, got {n_classes} > {d_f}", MODULE)
    pool = CalibrationPool(d_f=d_f, d_t=d_t, d_h=d_h, alpha=0.1, shared_projector=shared, dtype=np.dtype(dtype))
    basis, _ = np.linalg.qr(rng.standard_normal((d_f, n_classes)))
    raw = 2.0 * basis.T
    labels = np.arange(n_classes)
    open_task(pool, labels[:n_frozen], raw[:n_frozen], labels[:n_frozen], rng)
    freeze_stage(pool, 0)
    open_task(pool, labels[n_frozen:], raw[n_frozen:], labels[n_frozen:], rng)

    task = pool.tasks[1]
    task.task_offset[:] = 0.5 * rng.standard_normal(d_t)
    for proj in task.projectors:
        proj.W2 *= 0.5
        target = rng.choice([-1.0, 1.0], size=d_h) * rng.uniform(0.2, 1.0, size=d_h)
        proj.b1[:] = target - proj.W1 @ task.task_offset
        proj.b2[:] = 0.1 * rng.standard_normal(d_f)

    K = pool.prototype_matrix()
    coefficients = rng.choice([-1.0, 1.0], size=(batch_size, n_classes)) * rng.uniform(0.5, 1.5, size=(batch_size, n_classes))
    features = coefficients @ K + 0.1 * rng.standard_normal((batch_size, d_f))
    batch_labels = rng.choice(labels[n_frozen:], size=batch_size)
    return pool, Batch(features.astype(dtype), batch_labels)


def relative_error(analytic, numeric) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(trials=100, seed=0, dtype="float64", h=1e-3, train_logits="nep", lambda_inter=1.0, shared=False):
    """Compare `backward` against central differences on random instances."""
    rng = np.random.default_rng(seed)
    config = TrainConfig(lambda_inter=lambda_inter, train_logits=train_logits, dtype=dtype)
    nep_config = NepConfig()
    tolerance = 1e-4 if dtype == "float64" else 1e-2
    worst, worst_name = 0.0, ""
    for trial in range(trials):
        pool, batch = random_instance(rng, dtype=dtype, shared=shared)
        grads = backward(batch, pool, 1, config, nep_config)
        for name, value in pool.trainable_parameters(1).items():
            numeric = np.zeros_like(value)
            flat, out = value.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                up = total_loss(batch, pool, 1, config, nep_config)
                flat[i] = saved - h
                down = total_loss(batch, pool, 1, config, nep_config)
                flat[i] = saved
                out[i] = (up - down) / (2 * h)
            err = relative_error(grads[name], numeric)
            if err > worst:
                worst, worst_name = err, f"trial {trial}: {name}"
    return GradCheckResult(trials=trials, max_rel_err=worst, worst_parameter=worst_name, tolerance=tolerance)
