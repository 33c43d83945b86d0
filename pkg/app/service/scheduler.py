"""Epoch-level commit-rate search for ADSP.

At the start of every epoch the scheduler restarts from C_start = max_i c_i + 1 and walks
candidates C_start, C_start+1, ... while the online reward keeps improving. A candidate C is
run as the per-period increment r = C − C_start + 1: at every checkpoint the absolute target
advances by r, and each worker is told ΔC_i = target − c_i. Training never pauses during the
search; rewards are read off the loss curve of the running system.

Loss samples keep the engine's clock, so a reward is the reciprocal of the time at which a
candidate's fitted curve reaches a reference loss. Two consecutive candidates are scored
against one shared reference: the lower of their final window losses, scaled by 0.9.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.optimize import least_squares

from app.core import config, logger
from app.core.errors import (
    FitFailure,
    InsufficientDataError,
    LabError,
    PreconditionError,
    UnreachableLossError,
)
from app.service.metrics import EpochDecision

log = logger.get("scheduler")

REFERENCE_LOSS_FACTOR = 0.9
MIN_DISTINCT_LOSSES = 3
_A3_GRID = (0.0, 0.5, 0.9)
# accepted fit residual (RMS) as a share of the sampled loss spread
_FIT_RELATIVE_TOLERANCE = 0.05
_A3_SLACK = 1e-9


class EngineHandle(Protocol):
    """What the scheduler may see and do; it never touches worker or PS state directly."""

    @property
    def now(self) -> float: ...

    @property
    def finished(self) -> bool: ...

    @property
    def check_period(self) -> float: ...

    def commit_counts(self) -> list[int]: ...

    def current_loss(self) -> float: ...

    def max_commit_rate(self) -> int | None: ...

    def set_commit_rate(self, rate: int) -> None: ...

    def advance(self, duration: float) -> None: ...


class RewardFit(BaseModel):
    model_config = ConfigDict(frozen=True)

    a1: float
    a2: float
    a3: float
    residual: float = 0.0

    def loss_at(self, t: float) -> float:
        return 1.0 / (self.a1**2 * t + self.a2) + self.a3


@dataclass(slots=True)
class SchedulerState:
    c_target: int = 1
    epoch: int = 0
    commits: list[int] = field(default_factory=list)
    eval_log: list[tuple[int, float]] = field(default_factory=list)
    decisions: list[EpochDecision] = field(default_factory=list)


@dataclass(frozen=True, slots=True)
class SearchResult:
    chosen: int
    candidates: list[int]
    rewards: list[float]
    # (reward of the incumbent, reward of the challenger) behind every step decision
    comparisons: list[tuple[float, float]] = field(default_factory=list)


@dataclass(frozen=True, slots=True)
class EvalWindow:
    """(engine time, loss) samples taken while one candidate was running."""

    candidate: int
    samples: tuple[tuple[float, float], ...]

    @property
    def final_loss(self) -> float:
        return self.samples[-1][1]


def commit_rate_targets(c_target: int, commits: Sequence[int]) -> list[int]:
    """ΔC_i = C_target − c_i for every worker."""
    if not commits:
        raise PreconditionError("no workers")
    if c_target < max(commits) + 1:
        raise PreconditionError(f"C_target={c_target} must exceed every commit count {list(commits)}")
    return [c_target - c for c in commits]


def _curve(params: np.ndarray, t: np.ndarray) -> np.ndarray:
    a1, a2, a3 = params
    return 1.0 / (a1 * a1 * t + a2) + a3


def fit_reward_curve(samples: Sequence[tuple[float, float]]) -> RewardFit:
    """Least-squares fit of ℓ(t) = 1/(a1²·t + a2) + a3.

    Levenberg–Marquardt (damped Gauss–Newton) is started from a small grid over a3
    (fractions of the smallest loss), with a2 taken from the first sample and a1 from the last.
    A fit is only accepted with its asymptote in [0, min ℓ) and a residual small against the
    loss spread.
    """
    if len(samples) < 3:
        raise InsufficientDataError(f"need at least 3 (time, loss) samples, got {len(samples)}")
    data = np.asarray(sorted(samples), dtype=np.float64)
    t, loss = data[:, 0], data[:, 1]
    if np.unique(t).size < 3:
        raise InsufficientDataError("need at least 3 distinct sample times")
    if not np.all(np.isfinite(loss)):
        raise InsufficientDataError("loss samples must be finite")
    spread = float(loss.max() - loss.min())
    if spread <= 1e-12 * max(1.0, float(np.abs(loss).max())):
        raise FitFailure("flat loss curve has no 1/t component")
    if np.unique(loss).size < MIN_DISTINCT_LOSSES:
        raise FitFailure(f"need {MIN_DISTINCT_LOSSES} distinct loss values, got {np.unique(loss).size}")

    best = None
    for fraction in _A3_GRID:
        a3 = fraction * float(loss.min())
        head, tail = loss[0] - a3, loss[-1] - a3
        if head <= 0 or tail <= 0:
            continue
        slope = (1.0 / tail - 1.0 / head) / (t[-1] - t[0])
        a1 = float(np.sqrt(max(slope, 1e-12)))
        a2 = 1.0 / head - a1 * a1 * t[0]
        try:
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                result = least_squares(
                    lambda p: _curve(p, t) - loss,
                    x0=np.array([a1, a2, a3]),
                    method="lm",
                    xtol=1e-15,
                    ftol=1e-15,
                    gtol=1e-15,
                    max_nfev=5000,
                )
        except ValueError as exc:
            log.debug("Fit from a3=%g failed: %s", a3, exc)
            continue
        if not np.all(np.isfinite(result.fun)):
            continue
        if best is None or result.cost < best.cost:
            best = result

    if best is None:
        raise FitFailure("no starting point produced a finite fit")
    a1, a2, a3 = (float(v) for v in best.x)
    if np.any(a1 * a1 * t + a2 <= 0):
        raise FitFailure("fitted curve has a pole inside the sample window")
    if a1 * a1 < 1e-12:
        raise FitFailure("fitted curve has no decreasing component")
    floor = float(loss.min())
    if a3 < -_A3_SLACK * max(1.0, float(np.abs(loss).max())) or a3 >= floor:
        raise FitFailure(f"asymptote {a3:.3g} outside [0, {floor:.3g})")
    residual = float(np.sqrt(np.mean(best.fun**2)))
    if residual > _FIT_RELATIVE_TOLERANCE * spread:
        raise FitFailure(f"fit residual {residual:.3g} too large for loss spread {spread:.3g}")
    return RewardFit(a1=abs(a1), a2=a2, a3=max(a3, 0.0), residual=residual)


def reciprocal_line_fit(samples: Sequence[tuple[float, float]]) -> RewardFit:
    """Least-squares line through (t, 1/ℓ): the reward curve with its asymptote pinned at 0."""
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2 or np.ptp(data[:, 0]) == 0:
        raise InsufficientDataError("need two samples at distinct times")
    t, loss = data[:, 0], data[:, 1]
    if not np.all(np.isfinite(loss)) or np.any(loss <= 0):
        raise FitFailure("reciprocal fit needs positive finite losses")
    slope, intercept = np.polyfit(t, 1.0 / loss, 1)
    if slope <= 1e-12 * float(np.abs(1.0 / loss).max()):
        raise FitFailure("loss did not decrease over the window")
    residual = float(np.sqrt(np.mean((1.0 / (slope * t + intercept) - loss) ** 2)))
    return RewardFit(a1=float(np.sqrt(slope)), a2=float(intercept), a3=0.0, residual=residual)


def reward_from_fit(fit: RewardFit, reference_loss: float) -> float:
    """Reciprocal of the fitted time needed to reach ``reference_loss``."""
    if reference_loss <= fit.a3:
        raise UnreachableLossError(f"reference loss {reference_loss} is below the asymptote {fit.a3}")
    denom = 1.0 / (reference_loss - fit.a3) - fit.a2
    if denom <= 0:
        raise PreconditionError("reference loss is already reached before the window starts")
    return fit.a1**2 / denom


def score_window(window: EvalWindow, reference_loss: float) -> float:
    """Reward of one window; the reciprocal line stands in when the full fit is unusable."""
    try:
        return reward_from_fit(fit_reward_curve(window.samples), reference_loss)
    except LabError as exc:
        log.debug("C_target=%d: curve fit unusable (%s)", window.candidate, exc)
    try:
        return reward_from_fit(reciprocal_line_fit(window.samples), reference_loss)
    except LabError as exc:
        log.warning("C_target=%d: no usable reward (%s); scoring 0", window.candidate, exc)
        return 0.0


def observe_window(c_target: int, engine: EngineHandle, eval_window: float, *, c_start: int) -> EvalWindow:
    """Run candidate ``c_target`` for ``eval_window`` virtual seconds, sampling the loss.

    Loss is sampled at the window start and every half check period up to the window end.
    """
    engine.set_commit_rate(c_target - c_start + 1)
    samples = [(engine.now, engine.current_loss())]
    pieces = max(2, round(2 * eval_window / engine.check_period))
    for _ in range(pieces):
        engine.advance(eval_window / pieces)
        samples.append((engine.now, engine.current_loss()))
        if engine.finished:
            break
    return EvalWindow(candidate=c_target, samples=tuple(samples))


def online_evaluate(c_target: int, engine: EngineHandle, eval_window: float, *, c_start: int) -> float:
    """Reward of ``c_target`` on its own window, at 0.9 × the final window loss."""
    window = observe_window(c_target, engine, eval_window, c_start=c_start)
    return score_window(window, REFERENCE_LOSS_FACTOR * window.final_loss)


def search_commit_rate(
    c_start: int,
    evaluate: Callable[[int], float],
    *,
    cap: int | None = None,
    budget: int | None = None,
    should_stop: Callable[[], bool] = lambda: False,
    compare: Callable[[int, int], tuple[float, float]] | None = None,
) -> SearchResult:
    """Walk C_start, C_start+1, ... while the reward strictly improves.

    With ``compare``, each step is decided by rescoring the incumbent and the challenger
    together; otherwise the rewards ``evaluate`` returned are compared directly.
    """
    budget = config.search_budget if budget is None else budget
    if budget < 1:
        raise PreconditionError("search budget must be >= 1")
    if cap is not None and cap < c_start:
        cap = c_start
    current = c_start
    candidates, rewards = [current], [evaluate(current)]
    comparisons: list[tuple[float, float]] = []
    while len(candidates) < budget and not should_stop():
        nxt = current + 1
        if cap is not None and nxt > cap:
            break
        reward = evaluate(nxt)
        candidates.append(nxt)
        rewards.append(reward)
        pair = compare(current, nxt) if compare is not None else (rewards[-2], reward)
        comparisons.append(pair)
        if pair[1] <= pair[0]:
            break
        current = nxt
    return SearchResult(chosen=current, candidates=candidates, rewards=rewards, comparisons=comparisons)


class _LiveSearch:
    """Runs candidates on the engine and keeps their windows for pairwise rescoring."""

    def __init__(self, engine: EngineHandle, eval_window: float, c_start: int) -> None:
        self._engine = engine
        self._eval_window = eval_window
        self._c_start = c_start
        self._windows: dict[int, EvalWindow] = {}

    def evaluate(self, candidate: int) -> float:
        window = observe_window(candidate, self._engine, self._eval_window, c_start=self._c_start)
        self._windows[candidate] = window
        return score_window(window, REFERENCE_LOSS_FACTOR * window.final_loss)

    def compare(self, incumbent: int, challenger: int) -> tuple[float, float]:
        before, after = self._windows[incumbent], self._windows[challenger]
        reference = REFERENCE_LOSS_FACTOR * min(before.final_loss, after.final_loss)
        return score_window(before, reference), score_window(after, reference)


def decide_commit_rate(
    c_start: int,
    engine: EngineHandle,
    *,
    eval_window: float = 60.0,
    evaluate: Callable[[int], float] | None = None,
    budget: int | None = None,
) -> int:
    return _search(c_start, engine, eval_window, evaluate, budget).chosen


def _search(
    c_start: int,
    engine: EngineHandle,
    eval_window: float,
    evaluate: Callable[[int], float] | None,
    budget: int | None,
) -> SearchResult:
    compare = None
    if evaluate is None:
        live = _LiveSearch(engine, eval_window, c_start)
        evaluate, compare = live.evaluate, live.compare

    max_rate = engine.max_commit_rate()
    cap = None if max_rate is None else c_start + max_rate - 1
    return search_commit_rate(
        c_start, evaluate, cap=cap, budget=budget, should_stop=lambda: engine.finished, compare=compare
    )


def run_epoch(
    scheduler: SchedulerState,
    engine: EngineHandle,
    *,
    epoch_len: float,
    eval_window: float,
    evaluate: Callable[[int], float] | None = None,
) -> SchedulerState:
    """Search a commit rate, then keep it for the remainder of the epoch."""
    started = engine.now
    commits = engine.commit_counts()
    c_start = max(commits) + 1
    result = _search(c_start, engine, eval_window, evaluate, None)
    rate = result.chosen - c_start + 1
    engine.set_commit_rate(rate)
    remaining = epoch_len - (engine.now - started)
    if remaining > 1e-9 and not engine.finished:
        engine.advance(remaining)

    decision = EpochDecision(
        epoch=scheduler.epoch,
        started_at=started,
        c_start=c_start,
        candidates=result.candidates,
        rewards=result.rewards,
        comparisons=result.comparisons,
        chosen=result.chosen,
        rate=rate,
    )
    log.info(
        "epoch %d: tried %s, chose C_target=%d (rate %d/period)",
        scheduler.epoch,
        result.candidates,
        result.chosen,
        rate,
    )
    return SchedulerState(
        c_target=result.chosen,
        epoch=scheduler.epoch + 1,
        commits=commits,
        eval_log=[*scheduler.eval_log, *zip(result.candidates, result.rewards, strict=True)],
        decisions=[*scheduler.decisions, decision],
    )


__all__ = [
    "EngineHandle",
    "EvalWindow",
    "RewardFit",
    "SchedulerState",
    "SearchResult",
    "commit_rate_targets",
    "decide_commit_rate",
    "fit_reward_curve",
    "observe_window",
    "online_evaluate",
    "reciprocal_line_fit",
    "reward_from_fit",
    "run_epoch",
    "score_window",
    "search_commit_rate",
]
