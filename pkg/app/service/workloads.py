"""Convex training tasks with exact loss oracles and known optima.

Two kinds are provided: least-squares (``quadratic``) with a closed-form optimum, and
L2-regularized logistic regression whose optimum is pre-solved by full-batch gradient
descent when the task is built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict
from scipy.special import expit

from app.core import logger
from app.core.errors import (
    DimensionMismatchError,
    IndexOutOfShardError,
    PreconditionError,
    UnderdeterminedTaskError,
)
from app.core.numerics import ParamVector, as_vector

log = logger.get("workloads")

TaskKind = Literal["quadratic", "logistic"]
DEFAULT_BATCH_SIZE = 128
_LOGISTIC_GRAD_TOL = 1e-10
_LOGISTIC_MAX_ITER = 500_000


@dataclass(frozen=True, slots=True)
class MiniBatch:
    indices: npt.NDArray[np.int64]

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True, slots=True)
class TrainingTask:
    """Immutable task: data matrix, targets, optimum and curvature constants.

    For ``quadratic``: f(W) = (1/2n)·Σ(aᵢᵀW − bᵢ)².
    For ``logistic``: f(W) = (1/n)·Σ log(1 + exp(−bᵢ·aᵢᵀW)) + (λ/2)·‖W‖², bᵢ ∈ {−1, +1}.
    """

    kind: TaskKind
    features: npt.NDArray[np.float64]
    targets: npt.NDArray[np.float64]
    optimum: ParamVector
    optimal_loss: float
    lipschitz: float
    condition: float
    seed: int = 0
    l2: float = 0.0
    # geometric growth of shard sizes across workers; 0 splits evenly
    skew: float = 0.0
    # Hessian and linear term of the least-squares loss, so the exact loss costs O(d²)
    _gram: npt.NDArray[np.float64] = field(repr=False, compare=False, default=None)
    _moment: npt.NDArray[np.float64] = field(repr=False, compare=False, default=None)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_examples(self) -> int:
        return int(self.features.shape[0])

    def initial_params(self) -> ParamVector:
        return np.zeros(self.dim, dtype=np.float64)

    def shards(self, n_workers: int, skew: float | None = None) -> list[npt.NDArray[np.int64]]:
        """Disjoint, covering, contiguous shards; ``skew`` > 0 grows shard sizes geometrically."""
        skew = self.skew if skew is None else skew
        if n_workers < 1 or n_workers > self.n_examples:
            raise PreconditionError(f"cannot split {self.n_examples} examples over {n_workers} workers")
        if skew <= 0:
            return [np.asarray(s, dtype=np.int64) for s in np.array_split(np.arange(self.n_examples), n_workers)]
        weights = (1.0 + skew) ** np.arange(n_workers)
        sizes = np.maximum(1, np.floor(weights / weights.sum() * self.n_examples)).astype(np.int64)
        sizes[-1] = self.n_examples - sizes[:-1].sum()
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [np.arange(bounds[i], bounds[i + 1], dtype=np.int64) for i in range(n_workers)]

    def _check_dim(self, w: ParamVector) -> None:
        if w.shape != (self.dim,):
            raise DimensionMismatchError(f"expected dim {self.dim}, got shape {w.shape}")

    def global_loss(self, w: ParamVector) -> float:
        self._check_dim(w)
        if self.kind == "quadratic":
            # excess over the optimum, so no point scores below optimal_loss
            d = w - self.optimum
            return self.optimal_loss + max(0.0, float(0.5 * d @ self._gram @ d))
        margins = self.targets * (self.features @ w)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * self.l2 * (w @ w))

    def full_gradient(self, w: ParamVector) -> ParamVector:
        self._check_dim(w)
        if self.kind == "quadratic":
            return self._gram @ w - self._moment
        return self._gradient_on(self.features, self.targets, w)

    def _gradient_on(self, a: np.ndarray, b: np.ndarray, w: ParamVector) -> ParamVector:
        if self.kind == "quadratic":
            return a.T @ (a @ w - b) / a.shape[0]
        margins = b * (a @ w)
        return -(a.T @ (b * expit(-margins))) / a.shape[0] + self.l2 * w

    def minibatch_gradient(self, w: ParamVector, batch: MiniBatch) -> ParamVector:
        self._check_dim(w)
        idx = batch.indices
        if idx.size == 0 or idx.min() < 0 or idx.max() >= self.n_examples:
            raise IndexOutOfShardError(f"batch indices outside [0, {self.n_examples})")
        return self._gradient_on(self.features[idx], self.targets[idx], w)

    def to_document(self) -> TaskDocument:
        return TaskDocument(
            kind=self.kind,
            seed=self.seed,
            l2=self.l2,
            condition=self.condition,
            features=self.features.tolist(),
            targets=self.targets.tolist(),
            optimum=self.optimum.tolist(),
            optimal_loss=self.optimal_loss,
        )

    @classmethod
    def from_document(cls, doc: TaskDocument) -> TrainingTask:
        a = np.asarray(doc.features, dtype=np.float64)
        b = np.asarray(doc.targets, dtype=np.float64)
        if doc.kind == "quadratic":
            task = _quadratic_from_arrays(a, b, seed=doc.seed, condition=doc.condition)
        else:
            task = _logistic_from_arrays(a, b, l2=doc.l2, seed=doc.seed, w_star=as_vector(doc.optimum))
        return task


class TaskDocument(BaseModel):
    """JSON form of a task: data inline, so cross-run comparisons reuse identical examples."""

    model_config = ConfigDict(extra="forbid")

    kind: TaskKind
    seed: int
    l2: float = 0.0
    condition: float
    features: list[list[float]]
    targets: list[float]
    optimum: list[float]
    optimal_loss: float

    def dumps(self) -> str:
        return self.model_dump_json()

    @classmethod
    def loads(cls, text: str) -> TaskDocument:
        return cls.model_validate(json.loads(text))


def _quadratic_from_arrays(a: np.ndarray, b: np.ndarray, *, seed: int, condition: float | None = None) -> TrainingTask:
    n, dim = a.shape
    if n < dim:
        raise UnderdeterminedTaskError(f"{n} examples cannot pin down {dim} parameters")
    gram = a.T @ a / n
    moment = a.T @ b / n
    w_star, *_ = np.linalg.lstsq(a, b, rcond=None)
    eig = np.linalg.eigvalsh(gram)
    lipschitz = float(eig[-1])
    cond = condition if condition is not None else float(eig[-1] / max(eig[0], np.finfo(float).tiny))
    residual = a @ w_star - b
    return TrainingTask(
        kind="quadratic",
        features=a,
        targets=b,
        optimum=w_star,
        optimal_loss=float(residual @ residual / (2 * n)),
        lipschitz=lipschitz,
        condition=cond,
        seed=seed,
        _gram=gram,
        _moment=moment,
    )


def quadratic_from_data(a: npt.ArrayLike, b: npt.ArrayLike, seed: int = 0) -> TrainingTask:
    features = np.atleast_2d(np.asarray(a, dtype=np.float64))
    targets = np.asarray(b, dtype=np.float64).reshape(-1)
    if features.shape[0] != targets.size:
        raise DimensionMismatchError("features and targets disagree on the number of examples")
    return _quadratic_from_arrays(features, targets, seed=seed)


def make_quadratic(dim: int, n_examples: int, condition: float, seed: int, noise: float = 0.1) -> TrainingTask:
    """Least-squares task whose Hessian AᵀA/n has eigenvalues spread geometrically over [1/κ, 1]."""
    if dim < 1:
        raise PreconditionError("dim must be >= 1")
    if condition < 1:
        raise PreconditionError("condition must be >= 1")
    if n_examples < dim:
        raise UnderdeterminedTaskError(f"{n_examples} examples cannot pin down {dim} parameters")
    rng = np.random.default_rng(seed)
    left, _ = np.linalg.qr(rng.standard_normal((n_examples, dim)))
    right, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    spectrum = np.geomspace(1.0, 1.0 / condition, dim) if dim > 1 else np.ones(1)
    a = np.sqrt(n_examples) * left @ np.diag(np.sqrt(spectrum)) @ right.T
    w_true = rng.standard_normal(dim)
    b = a @ w_true + noise * rng.standard_normal(n_examples)
    task = _quadratic_from_arrays(a, b, seed=seed, condition=float(condition))
    log.debug("Built quadratic task dim=%d n=%d condition=%g", dim, n_examples, condition)
    return task


def _logistic_from_arrays(
    a: np.ndarray, b: np.ndarray, *, l2: float, seed: int, w_star: ParamVector | None = None
) -> TrainingTask:
    n, dim = a.shape
    lipschitz = float(np.linalg.eigvalsh(a.T @ a / n)[-1] / 4 + l2)
    task = TrainingTask(
        kind="logistic",
        features=a,
        targets=b,
        optimum=np.zeros(dim),
        optimal_loss=0.0,
        lipschitz=lipschitz,
        condition=lipschitz / l2,
        seed=seed,
        l2=l2,
    )
    if w_star is None:
        w_star = np.zeros(dim)
        step = 1.0 / lipschitz
        for it in range(_LOGISTIC_MAX_ITER):
            grad = task.full_gradient(w_star)
            if np.linalg.norm(grad) < _LOGISTIC_GRAD_TOL:
                log.debug("Logistic optimum solved in %d iterations", it)
                break
            w_star = w_star - step * grad
        else:
            raise PreconditionError("logistic optimum did not reach the gradient tolerance")
    return TrainingTask(
        kind="logistic",
        features=a,
        targets=b,
        optimum=w_star,
        optimal_loss=task.global_loss(w_star),
        lipschitz=lipschitz,
        condition=lipschitz / l2,
        seed=seed,
        l2=l2,
    )


def make_logistic(dim: int, n_examples: int, seed: int, l2: float = 1e-2) -> TrainingTask:
    if dim < 1 or n_examples < 1:
        raise PreconditionError("dim and n_examples must be >= 1")
    if l2 <= 0:
        raise PreconditionError("logistic tasks need l2 > 0 for the optimum to exist")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_examples, dim))
    w_true = rng.standard_normal(dim)
    flips = rng.random(n_examples) < 0.1
    b = np.where((a @ w_true > 0) ^ flips, 1.0, -1.0)
    return _logistic_from_arrays(a, b, l2=l2, seed=seed)


def make_task(kind: TaskKind, dim: int, n_examples: int, seed: int, condition: float = 10.0, l2: float = 1e-2) -> TrainingTask:
    if kind == "quadratic":
        return make_quadratic(dim, n_examples, condition, seed)
    return make_logistic(dim, n_examples, seed, l2=l2)


class BatchSampler:
    """Cycles a worker's shard in mini-batches, reshuffling with the worker's own seed each pass."""

    def __init__(self, shard: npt.NDArray[np.int64], batch_size: int, rng: np.random.Generator) -> None:
        self._shard = shard
        self._size = min(batch_size, shard.size)
        self._rng = rng
        self._order = rng.permutation(shard)
        self._cursor = 0

    def next(self) -> MiniBatch:
        if self._cursor + self._size > self._order.size:
            self._order = self._rng.permutation(self._shard)
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self._size]
        self._cursor += self._size
        return MiniBatch(idx)


# Convenience wrappers mirroring the operation names used across the lab
def minibatch_gradient(task: TrainingTask, w: ParamVector, batch: MiniBatch) -> ParamVector:
    return task.minibatch_gradient(w, batch)


def global_loss(task: TrainingTask, w: ParamVector) -> float:
    return task.global_loss(w)


__all__ = [
    "BatchSampler",
    "MiniBatch",
    "TaskDocument",
    "TrainingTask",
    "global_loss",
    "make_logistic",
    "make_quadratic",
    "make_task",
    "minibatch_gradient",
    "quadratic_from_data",
]
