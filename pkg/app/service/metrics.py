from __future__ import annotations

from collections.abc import Sequence
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.errors import PreconditionError


class WorkerLedger(BaseModel):
    worker: int
    comp_s: float = 0.0
    comm_s: float = 0.0
    blocked_s: float = 0.0
    # commits the PS has applied; replies still in flight at stop are included
    commits: int = 0
    local_steps: int = 0


class CommitSnapshot(BaseModel):
    time: float
    commits: list[int]


class ProgressSample(BaseModel):
    time: float
    local_steps: int


class EpochDecision(BaseModel):
    epoch: int
    started_at: float
    c_start: int
    candidates: list[int] = Field(default_factory=list)
    rewards: list[float] = Field(default_factory=list)
    comparisons: list[tuple[float, float]] = Field(default_factory=list)
    chosen: int
    rate: int


class RunMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    policy: str
    run_id: str = ""
    seed: int = 0
    mode: Literal["simulation", "realtime"] = "simulation"
    times: list[float] = Field(default_factory=list)
    losses: list[float] = Field(default_factory=list)
    ledgers: list[WorkerLedger] = Field(default_factory=list)
    commit_snapshots: list[CommitSnapshot] = Field(default_factory=list)
    progress: list[ProgressSample] = Field(default_factory=list)
    staleness_commits: list[int] = Field(default_factory=list)
    staleness_steps: list[int] = Field(default_factory=list)
    total_steps: int = 0
    local_steps_total: int = 0
    elapsed: float = 0.0
    optimal_loss: float = 0.0
    convergence_time: float | None = None
    convergence_step: int | None = None
    steps_to_converge: int | None = None
    scheduler_log: list[EpochDecision] = Field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def max_commit_gap(self) -> int:
        """Largest pairwise commit-count difference over all recorded checkpoints."""
        gaps = [max(s.commits) - min(s.commits) for s in self.commit_snapshots if s.commits]
        return max(gaps, default=0)

    def measured_speed(self, warmup: float = 0.0) -> float:
        """Average per-worker steps/second over the progress samples after ``warmup``."""
        samples = [p for p in self.progress if p.time >= warmup]
        if len(samples) < 2:
            raise PreconditionError("not enough progress samples after warm-up")
        first, last = samples[0], samples[-1]
        n_workers = max(len(self.ledgers), 1)
        return (last.local_steps - first.local_steps) / (n_workers * (last.time - first.time))


def detect_convergence(
    losses: Sequence[float], times: Sequence[float], window: int = 10, eps: float = 1e-9
) -> float | None:
    """Earliest time at which the last ``window`` sampled losses have variance below ``eps``."""
    index = convergence_index(losses, window, eps)
    return None if index is None else float(times[index])


def convergence_index(losses: Sequence[float], window: int = 10, eps: float = 1e-9) -> int | None:
    values = np.asarray(losses, dtype=np.float64)
    if window < 1 or values.size < window:
        return None
    variances = np.lib.stride_tricks.sliding_window_view(values, window).var(axis=1)
    hits = np.flatnonzero(variances < eps)
    return None if hits.size == 0 else int(hits[0]) + window - 1


def waiting_fraction(metrics: RunMetrics) -> tuple[list[float], float]:
    """(communication + blocked) / elapsed per worker, plus the cluster average."""
    if metrics.elapsed <= 0:
        raise PreconditionError("waiting fraction needs a positive elapsed time")
    per_worker = [(led.comm_s + led.blocked_s) / metrics.elapsed for led in metrics.ledgers]
    average = float(np.mean(per_worker)) if per_worker else 0.0
    return per_worker, average


__all__ = [
    "CommitSnapshot",
    "EpochDecision",
    "ProgressSample",
    "RunMetrics",
    "WorkerLedger",
    "convergence_index",
    "detect_convergence",
    "waiting_fraction",
]
