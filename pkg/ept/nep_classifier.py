"""Negative error projector.

A query f is reconstructed from all calibrated prototypes (rows of K) by ridge
regression, rho* = (K K^T + lambda I)^-1 K f, and assigned to the class with the
smallest normalized residual

    R_i = ||f - rho*_i K_i|| / (|rho*_i| + eps).

The C x C system is factorized once with Cholesky and reused for every query.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import List, Tuple

import numpy as np
from scipy import linalg

from ept.errors import NumericError, ValidationError

MODULE = "nep_classifier"


def _as_float(array):
    array = np.asarray(array)
    return array if np.issubdtype(array.dtype, np.floating) else array.astype(np.float64)


def _check_finite(name, *arrays):
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise ValidationError(f"non-finite values in {name}", MODULE)


def ridge_factor(K, lam):
    """Cholesky factor of K K^T + lam I."""
    if lam <= 0:
        raise ValidationError(f"lambda_reg must be > 0, got {lam}", MODULE)
    gram = K @ K.T
    gram[np.diag_indices_from(gram)] += lam
    try:
        return linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError as e:
        raise NumericError(f"Cholesky factorization failed: {e}", MODULE)


def solve_ridge(K, f, lam) -> np.ndarray:
    """Ridge coefficients for one query (f of shape d_f) or a batch (f of shape B x d_f, result B x C)."""
    K = _as_float(K)
    f = np.asarray(f, dtype=K.dtype)
    _check_finite("K / f", K, f)
    if K.ndim != 2 or f.shape[-1] != K.shape[1]:
        raise ValidationError(f"query of shape {f.shape} does not match prototypes {K.shape}", MODULE)
    factor = ridge_factor(K, lam)
    return linalg.cho_solve(factor, K @ f.T).T


def residuals(K, f, rho, eps) -> np.ndarray:
    """Per-class normalized residuals; works for one query or a batch (leading axis)."""
    if eps <= 0:
        raise ValidationError(f"epsilon must be > 0, got {eps}", MODULE)
    rho = np.asarray(rho)
    diff = np.asarray(f)[..., None, :] - rho[..., :, None] * K
    return np.linalg.norm(diff, axis=-1) / (np.abs(rho) + eps)


def argmin_lowest_id(values, class_ids) -> int:
    """Position of the smallest value; ties resolve to the lowest class id."""
    values = np.asarray(values)
    tied = np.flatnonzero(values == values.min())
    return int(tied[np.argmin(np.asarray(class_ids)[tied])])


@dataclass(frozen=True)
class NepDecision:
    coefficients: np.ndarray
    residuals: np.ndarray
    predicted_class: int


@dataclass
class NepModel:
    K: np.ndarray
    class_ids: List[int]
    lambda_reg: float = 0.3
    epsilon: float = 1e-8

    def __post_init__(self):
        self.K = np.array(_as_float(self.K), ndmin=2)
        self.class_ids = [int(c) for c in self.class_ids]
        if self.K.shape[0] < 1 or self.K.shape[0] != len(self.class_ids):
            raise ValidationError(f"{len(self.class_ids)} class ids for a {self.K.shape} prototype matrix", MODULE)
        _check_finite("prototype matrix", self.K)
        if self.lambda_reg <= 0 or self.epsilon <= 0:
            raise ValidationError("lambda_reg and epsilon must be > 0", MODULE)
        self.K.setflags(write=False)

    @classmethod
    def from_pool(cls, pool, nep_config, class_ids=None) -> "NepModel":
        class_ids = pool.class_ids if class_ids is None else list(class_ids)
        return cls(pool.prototype_matrix(class_ids), class_ids, nep_config.lambda_reg, nep_config.epsilon)

    @cached_property
    def factor(self):
        return ridge_factor(self.K, self.lambda_reg)

    def decide(self, features) -> Tuple[np.ndarray, np.ndarray]:
        """Coefficients and residuals for a B x d_f batch, sharing one factorization."""
        features = np.asarray(features, dtype=self.K.dtype)
        _check_finite("query", features)
        rho = linalg.cho_solve(self.factor, self.K @ features.T).T
        return rho, residuals(self.K, features, rho, self.epsilon)

    def predict(self, features) -> np.ndarray:
        _, res = self.decide(np.atleast_2d(features))
        return np.array([self.class_ids[argmin_lowest_id(row, self.class_ids)] for row in res])


def classify_nep(model: NepModel, f) -> NepDecision:
    rho, res = model.decide(np.atleast_2d(f))
    position = argmin_lowest_id(res[0], model.class_ids)
    return NepDecision(rho[0], res[0], model.class_ids[position])


def metric_scores(prototypes, features, metric) -> np.ndarray:
    """Distances (lower is closer) between B queries and C prototypes, shape B x C."""
    prototypes = np.atleast_2d(prototypes)
    features = np.atleast_2d(features)
    if prototypes.shape[0] == 0:
        raise ValidationError("no prototypes to compare against", MODULE)
    if metric in ("euclidean", "squared_euclidean"):
        sq = ((features[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=-1)
        return np.sqrt(sq) if metric == "euclidean" else sq
    if metric == "cosine":
        p_norm = np.linalg.norm(prototypes, axis=1)
        f_norm = np.linalg.norm(features, axis=1)
        if np.any(p_norm == 0) or np.any(f_norm == 0):
            raise ValidationError("cosine similarity is undefined for zero-norm vectors", MODULE)
        return -(features @ prototypes.T) / (f_norm[:, None] * p_norm[None, :])
    raise ValidationError(f"unknown metric '{metric}'", MODULE)


def classify_metric(prototypes, f, metric, class_ids=None) -> int:
    """Nearest prototype under `metric`; returns the class id (row index when `class_ids` is None)."""
    scores = metric_scores(prototypes, f, metric)[0]
    class_ids = list(range(len(scores))) if class_ids is None else list(class_ids)
    return class_ids[argmin_lowest_id(scores, class_ids)]
