"""Closed-form theory and its empirical checks against run traces."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from collections.abc import Callable, Sequence
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core import logger
from app.core.cache import RunCache
from app.core.errors import (
    BudgetError,
    InfeasibleRateError,
    InsufficientDataError,
    NonFiniteError,
    PreconditionError,
)
from app.core.numerics import Hyperparams
from app.service import sync
from app.service.engine import ClusterSpec, StopRule, run
from app.service.metrics import RunMetrics
from app.service.workloads import TrainingTask

log = logger.get("analysis")

MIN_STALENESS_SAMPLES = 1000


class TheoryInputs(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(gt=0)
    delta_c: tuple[float, ...]
    speeds: tuple[float, ...] = Field(min_length=1)
    overheads: tuple[float, ...]

    @model_validator(mode="after")
    def _consistent(self) -> TheoryInputs:
        m = len(self.speeds)
        if len(self.delta_c) != m or len(self.overheads) != m:
            raise ValueError("delta_c, speeds and overheads must have one entry per worker")
        if any(v <= 0 for v in (*self.delta_c, *self.speeds)):
            raise ValueError("commit rates and speeds must be positive")
        if any(o < 0 for o in self.overheads):
            raise ValueError("overheads must be non-negative")
        return self

    @property
    def m(self) -> int:
        return len(self.speeds)

    @property
    def step_times(self) -> list[float]:
        return [1.0 / v for v in self.speeds]

    @classmethod
    def from_cluster(cls, cluster: ClusterSpec, gamma: float, delta_c: float | Sequence[float]) -> TheoryInputs:
        rates = [delta_c] * cluster.n_workers if isinstance(delta_c, int | float) else list(delta_c)
        return cls(
            gamma=gamma,
            delta_c=tuple(rates),
            speeds=cluster.speeds,
            overheads=tuple(cluster.effective_overheads),
        )


def implicit_momentum(inputs: TheoryInputs) -> tuple[float, float]:
    """Geometric staleness parameter p and the implicit momentum 1 − p it induces."""
    m = inputs.m
    spread = sum(inputs.gamma / (dc * v) for dc, v in zip(inputs.delta_c, inputs.speeds, strict=True))
    p = 1.0 / (1.0 + (1.0 - 1.0 / m) * spread)
    return p, 1.0 - p


def heterogeneity_degree(speeds: Sequence[float]) -> float:
    v = np.asarray(speeds, dtype=np.float64)
    if v.size == 0 or np.any(v <= 0):
        raise PreconditionError("heterogeneity needs positive speeds")
    return float(v.mean() / v.min())


def effective_step_time(step_time: float, overhead: float, tau: float) -> float:
    if tau < 1:
        raise PreconditionError(f"local steps per commit must be >= 1, got {tau}")
    return step_time + overhead / tau


def adsp_local_steps(inputs: TheoryInputs) -> list[float]:
    """τ_i solving t_i·τ_i + O_i = Γ/ΔC_i."""
    taus = []
    for i, (dc, t, o) in enumerate(zip(inputs.delta_c, inputs.step_times, inputs.overheads, strict=True)):
        interval = inputs.gamma / dc
        if interval <= o:
            raise InfeasibleRateError(f"worker {i}: Γ/ΔC = {interval:g} leaves no time beyond O = {o:g}")
        taus.append((interval - o) / t)
    return taus


def policy_speeds(inputs: TheoryInputs, policy: sync.SyncPolicy) -> float:
    """Closed-form steady-state mini-batches per second, averaged over workers."""
    t = np.asarray(inputs.step_times)
    o = np.asarray(inputs.overheads)
    match policy:
        case sync.BSP():
            return float(1.0 / np.max(t + o))
        case sync.SSP(slack=slack):
            return float(1.0 / np.max(t + o / max(slack, 1)))
        case sync.TAP():
            return float(np.mean(1.0 / (t + o)))
        case sync.FixedAdaComm(tau=tau) | sync.AdaComm(tau0=tau):
            return float(1.0 / np.max(t + o / tau))
        case sync.ADSP(blocking_commits=blocking):
            taus = np.asarray(adsp_local_steps(inputs))
            if not blocking:
                # commits overlap with training
                return float(np.mean(1.0 / t))
            return float(np.mean(1.0 / (t + o / taus)))
    raise PreconditionError(f"unknown policy {policy!r}")  # pragma: no cover


def geometric_pmf(p: float, support: int) -> npt.NDArray[np.float64]:
    if not 0 < p <= 1:
        raise PreconditionError(f"geometric parameter must lie in (0, 1], got {p}")
    lags = np.arange(support)
    return p * (1.0 - p) ** lags


def staleness_fit(samples: Sequence[int], p: float) -> float:
    """Total-variation distance between the empirical staleness law and Prob(τ=l) = p(1−p)^l."""
    values = np.asarray(samples, dtype=np.int64)
    if values.size < MIN_STALENESS_SAMPLES:
        raise InsufficientDataError(
            f"staleness fit needs {MIN_STALENESS_SAMPLES} samples, got {values.size}"
        )
    if values.min() < 0:
        raise PreconditionError("staleness samples must be non-negative")
    empirical = np.bincount(values) / values.size
    model = geometric_pmf(p, empirical.size)
    tail = max(0.0, 1.0 - float(model.sum()))
    return 0.5 * (float(np.abs(empirical - model).sum()) + tail)


class RegretCurve(NamedTuple):
    steps: npt.NDArray[np.int64]
    regret: npt.NDArray[np.float64]
    normalized: npt.NDArray[np.float64]


def regret_curve(losses: Sequence[float], optimal_loss: float) -> RegretCurve:
    """Cumulative excess loss R(T) over PS steps T = 1..len(losses) and R(T)/√T."""
    values = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(values)) or not math.isfinite(optimal_loss):
        raise NonFiniteError("regret needs finite losses")
    steps = np.arange(1, values.size + 1)
    regret = np.cumsum(values - optimal_loss)
    return RegretCurve(steps, regret, regret / np.sqrt(steps))


# -- checks ----------------------------------------------------------------------------------------


class CheckResult(BaseModel):
    name: str
    theory: float | None
    empirical: float | None
    tolerance: float
    passed: bool
    note: str = ""


def check_staleness(samples: Sequence[int], p: float, tolerance: float = 0.1) -> CheckResult:
    distance = staleness_fit(samples, p)
    return CheckResult(
        name="staleness_geometric",
        theory=p,
        empirical=distance,
        tolerance=tolerance,
        passed=distance < tolerance,
        note="TV distance to Geom(p); deterministic timers follow the law only approximately",
    )


def check_throughput(
    name: str, metrics: RunMetrics, expected: float, *, warmup: float, tolerance: float = 0.02
) -> CheckResult:
    measured = metrics.measured_speed(warmup)
    error = abs(measured - expected) / expected
    return CheckResult(
        name=name, theory=expected, empirical=measured, tolerance=tolerance, passed=error <= tolerance
    )


def tail_non_increasing(values: Sequence[float], tolerance: float = 0.05, tail: float = 0.5) -> bool:
    data = np.asarray(values, dtype=np.float64)
    start = int(data.size * (1.0 - tail))
    segment = data[start:]
    if segment.size < 2:
        return True
    running_min = np.minimum.accumulate(segment)
    return bool(np.all(segment <= running_min * (1.0 + tolerance) + 1e-12))


def check_regret(losses: Sequence[float], optimal_loss: float, tolerance: float = 0.05) -> CheckResult:
    curve = regret_curve(losses, optimal_loss)
    last = float(curve.normalized[-1]) if curve.normalized.size else 0.0
    return CheckResult(
        name="regret_sublinear",
        theory=None,
        empirical=last,
        tolerance=tolerance,
        passed=tail_non_increasing(curve.normalized, tolerance),
        note="R(T)/sqrt(T) over the last half of T must not grow",
    )


# -- offline searches ------------------------------------------------------------------------------


def task_fingerprint(task: TrainingTask) -> str:
    digest = hashlib.sha256()
    digest.update(f"{task.kind}:{task.l2}:{task.seed}".encode())
    digest.update(np.ascontiguousarray(task.features).tobytes())
    digest.update(np.ascontiguousarray(task.targets).tobytes())
    return digest.hexdigest()


def run_key(**parts: object) -> str:
    text = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _convergence_time(metrics: RunMetrics) -> float:
    return math.inf if metrics.convergence_time is None else metrics.convergence_time


def cached_convergence(cache: RunCache | None, key: str, simulate: Callable[[], RunMetrics]) -> float:
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            log.debug("cache hit %s", key[:12])
            return hit
    value = _convergence_time(simulate())
    if cache is not None:
        cache.set(key, value)
    return value


def max_local_steps(cluster: ClusterSpec, gamma: float, rate: int) -> list[int]:
    """Largest τ_i with t_i·τ_i + O_i ≤ Γ/ΔC for each worker."""
    interval = gamma / rate
    caps = []
    for i, (t, o) in enumerate(zip(cluster.step_times, cluster.effective_overheads, strict=True)):
        if interval <= o:
            raise InfeasibleRateError(f"worker {i}: rate {rate} per {gamma}s is infeasible")
        caps.append(max(1, math.floor((interval - o) / t + 1e-9)))
    return caps


class AdspPlusResult(BaseModel):
    local_steps: tuple[int, ...]
    convergence_time: float
    evaluated: int


def adsp_plus_search(
    task: TrainingTask,
    cluster: ClusterSpec,
    rate: int,
    tau_max: int = 16,
    *,
    hp: Hyperparams,
    stop: StopRule,
    check_period: float = 60.0,
    seed: int = 0,
    max_evaluations: int = 4096,
    evaluate: Callable[[tuple[int, ...]], float] | None = None,
    cache: RunCache | None = None,
) -> AdspPlusResult:
    """Exhaustive search over per-worker local-step caps at a fixed commit rate."""
    caps = [min(tau_max, c) for c in max_local_steps(cluster, check_period, rate)]
    size = math.prod(caps)
    if size > max_evaluations:
        raise BudgetError(f"local-step grid has {size} points, budget is {max_evaluations}")

    if evaluate is None:
        task_key = task_fingerprint(task)

        def evaluate(taus: tuple[int, ...]) -> float:
            policy = sync.ADSP(check_period=check_period, fixed_rate=rate, local_steps=taus)
            key = run_key(
                kind="adsp_plus",
                task=task_key,
                cluster=cluster.model_dump(),
                policy=policy.model_dump(),
                hp=hp.model_dump(),
                stop=stop.model_dump(),
                seed=seed,
            )
            return cached_convergence(cache, key, lambda: run(task, cluster, policy, hp, stop, seed))

    best: tuple[int, ...] | None = None
    best_time = math.inf
    for taus in itertools.product(*(range(1, c + 1) for c in caps)):
        elapsed = evaluate(taus)
        if best is None or elapsed < best_time:
            best, best_time = taus, elapsed
    log.info("ADSP+ best local steps %s converge at %s (%d runs)", best, best_time, size)
    return AdspPlusResult(local_steps=best, convergence_time=best_time, evaluated=size)


__all__ = [
    "AdspPlusResult",
    "CheckResult",
    "RegretCurve",
    "TheoryInputs",
    "adsp_local_steps",
    "adsp_plus_search",
    "check_regret",
    "check_staleness",
    "check_throughput",
    "effective_step_time",
    "heterogeneity_degree",
    "implicit_momentum",
    "max_local_steps",
    "policy_speeds",
    "regret_curve",
    "run_key",
    "staleness_fit",
    "task_fingerprint",
]
