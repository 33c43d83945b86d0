"""Parameter-vector arithmetic and the three update rules every synchronization policy shares.

A ParamVector is a one-dimensional float64 numpy array. All functions here are pure: they
validate their inputs, never modify them, and return fresh arrays.
"""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from app.core.errors import DimensionMismatchError, NonFiniteError, PreconditionError

ParamVector = npt.NDArray[np.float64]


def as_vector(values: npt.ArrayLike) -> ParamVector:
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if vec.size == 0:
        raise DimensionMismatchError("parameter vectors must have dim >= 1")
    return vec


def zeros(dim: int) -> ParamVector:
    return np.zeros(dim, dtype=np.float64)


def _check(*vectors: ParamVector) -> None:
    dim = vectors[0].shape
    for vec in vectors:
        if vec.ndim != 1 or vec.shape != dim:
            msg = f"dimension mismatch: {[v.shape for v in vectors]}"
            raise DimensionMismatchError(msg)
    for vec in vectors:
        if not np.all(np.isfinite(vec)):
            raise NonFiniteError("parameter vector contains NaN or Inf")


def _finite(result: ParamVector) -> ParamVector:
    if not np.all(np.isfinite(result)):
        raise NonFiniteError("update produced NaN or Inf; learning rate too large?")
    return result


def sgd_momentum_update(
    w_t: ParamVector, w_prev: ParamVector, grad: ParamVector, lr: float, momentum: float
) -> ParamVector:
    """W_{t+1} = W_t − η·grad + μ·(W_t − W_prev)."""
    _check(w_t, w_prev, grad)
    if lr <= 0:
        raise PreconditionError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise PreconditionError(f"momentum must lie in [0, 1), got {momentum}")
    return _finite(w_t - lr * grad + momentum * (w_t - w_prev))


def accumulate_update(u: ParamVector, grad: ParamVector, local_lr: float) -> ParamVector:
    _check(u, grad)
    if local_lr <= 0:
        raise PreconditionError(f"local learning rate must be positive, got {local_lr}")
    return _finite(u + local_lr * grad)


def apply_commit(w: ParamVector, u: ParamVector, lr: float) -> ParamVector:
    _check(w, u)
    if lr <= 0:
        raise PreconditionError(f"learning rate must be positive, got {lr}")
    return _finite(w - lr * u)


class Hyperparams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # None means 1/M, resolved once the cluster size is known
    global_lr: float | None = Field(default=None, gt=0)
    local_lr_init: float = Field(default=0.1, gt=0)
    local_lr_decay: float = Field(default=0.9999, gt=0, le=1)
    ps_momentum: float = Field(default=0.0, ge=0, lt=1)
    lr_schedule: Literal["constant", "inverse_sqrt"] = "constant"
    batch_size: int = Field(default=128, ge=1)

    def resolved(self, n_workers: int) -> Hyperparams:
        if self.global_lr is not None:
            return self
        return self.model_copy(update={"global_lr": 1.0 / n_workers})

    def global_rate(self, step: int) -> float:
        """Effective PS learning rate for the commit that becomes global step ``step`` (1-based)."""
        lr = self.global_lr if self.global_lr is not None else 1.0
        if self.lr_schedule == "inverse_sqrt":
            return lr / math.sqrt(max(step, 1))
        return lr

    def local_rate(self, local_step: int) -> float:
        return self.local_lr_init * self.local_lr_decay**local_step


__all__ = [
    "Hyperparams",
    "ParamVector",
    "accumulate_update",
    "apply_commit",
    "as_vector",
    "sgd_momentum_update",
    "zeros",
]
