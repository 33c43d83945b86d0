"""Synchronization policies as explicit state machines.

Each policy decides, after every finished mini-batch, whether a worker keeps training,
commits, or commits and then waits on a barrier. ADSP never decides anything here: its
commits fire on per-worker timers whose interval follows from the commit rate ΔC.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Annotated, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.errors import DimensionMismatchError, InfeasibleRateError, PreconditionError
from app.core.numerics import ParamVector, apply_commit, sgd_momentum_update, zeros


class _Policy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class BSP(_Policy):
    kind: Literal["bsp"] = "bsp"


class SSP(_Policy):
    kind: Literal["ssp"] = "ssp"
    slack: int = Field(default=3, ge=0)


class TAP(_Policy):
    kind: Literal["tap"] = "tap"


class FixedAdaComm(_Policy):
    kind: Literal["fixed_adacomm"] = "fixed_adacomm"
    tau: int = Field(default=4, ge=1)


class AdaComm(_Policy):
    kind: Literal["adacomm"] = "adacomm"
    tau0: int = Field(default=4, ge=1)
    check_interval: float = Field(default=60.0, gt=0)
    multiplier: float = Field(default=2.0, gt=1)


class ADSP(_Policy):
    kind: Literal["adsp"] = "adsp"
    check_period: float = Field(default=60.0, gt=0)
    epoch_len: float = Field(default=1200.0, gt=0)
    eval_window: float = Field(default=60.0, gt=0)
    # per-period commit increment; None runs the online commit-rate search
    fixed_rate: int | None = Field(default=None, ge=1)
    blocking_commits: bool = False
    timer_jitter: Literal["none", "exponential"] = "none"
    # per-worker cap on mini-batches between two commits (offline τ search)
    local_steps: tuple[int, ...] | None = None


SyncPolicy = Annotated[BSP | SSP | TAP | FixedAdaComm | AdaComm | ADSP, Field(discriminator="kind")]
POLICY_KINDS = ("bsp", "ssp", "tap", "fixed_adacomm", "adacomm", "adsp")


class Action(enum.Enum):
    CONTINUE_TRAINING = "continue"
    COMMIT_NOW = "commit"
    BLOCK = "block"


@dataclass(frozen=True, slots=True)
class CommitMsg:
    worker: int
    update: ParamVector
    n_steps: int
    sent_at: float


@dataclass(slots=True)
class WorkerState:
    id: int
    u: ParamVector
    w_local: ParamVector
    commits: int = 0  # c_i, counted on PS acknowledgment
    issued: int = 0  # commits sent, acknowledged or not
    local_steps: int = 0
    steps_since_commit: int = 0
    tau: int = 1
    delta_c: int = 1
    period_start: float = 0.0
    period_commits: int = 0
    timer_deadline: float | None = None
    in_flight: bool = False
    blocked: bool = False

    @classmethod
    def fresh(cls, worker_id: int, w0: ParamVector) -> WorkerState:
        return cls(id=worker_id, u=zeros(w0.size), w_local=w0.copy())


@dataclass(slots=True)
class PSState:
    w_global: ParamVector
    w_prev: ParamVector
    step: int = 0
    vector_clock: list[int] = field(default_factory=list)
    steps_applied: int = 0
    # staleness bookkeeping: PS step and folded-in mini-batch count at each worker's last commit
    last_commit_step: list[int | None] = field(default_factory=list)
    last_commit_steps_applied: list[int] = field(default_factory=list)
    staleness_commits: list[int] = field(default_factory=list)
    staleness_steps: list[int] = field(default_factory=list)

    @classmethod
    def fresh(cls, w0: ParamVector, n_workers: int) -> PSState:
        return cls(
            w_global=w0.copy(),
            w_prev=w0.copy(),
            vector_clock=[0] * n_workers,
            last_commit_step=[None] * n_workers,
            last_commit_steps_applied=[0] * n_workers,
        )


def ssp_gate_open(own: int, cluster_view: Sequence[int], worker_id: int, slack: int) -> bool:
    peers = [c for i, c in enumerate(cluster_view) if i != worker_id]
    return not peers or own - min(peers) <= slack


def on_step_complete(policy: SyncPolicy, worker: WorkerState, cluster_view: Sequence[int]) -> Action:
    """Decide what a worker does after finishing a mini-batch.

    ``cluster_view`` holds the PS's committed-step count per worker. BLOCK means: commit,
    then wait after the round trip until the slack gate opens again.
    """
    match policy:
        case BSP() | TAP():
            return Action.COMMIT_NOW
        case SSP(slack=slack):
            if ssp_gate_open(worker.local_steps, cluster_view, worker.id, slack):
                return Action.COMMIT_NOW
            return Action.BLOCK
        case FixedAdaComm() | AdaComm():
            if worker.steps_since_commit > 0 and worker.steps_since_commit % worker.tau == 0:
                return Action.COMMIT_NOW
            return Action.CONTINUE_TRAINING
        case ADSP():
            return Action.CONTINUE_TRAINING
    raise PreconditionError(f"unknown policy {policy!r}")  # pragma: no cover


def adsp_timer_interval(gamma: float, delta_c: int, overhead: float) -> float:
    """Γ/ΔC − O: training time between two commits."""
    if delta_c < 1:
        raise PreconditionError(f"commit rate must be >= 1, got {delta_c}")
    interval = gamma / delta_c - overhead
    if interval <= 0:
        msg = f"commit rate {delta_c} per {gamma}s leaves no training time with overhead {overhead}s"
        raise InfeasibleRateError(msg)
    return interval


def max_feasible_rate(gamma: float, overhead: float) -> int | None:
    """Largest ΔC with Γ/ΔC > O; None when the worker has no overhead."""
    if overhead <= 0:
        return None
    return math.ceil(gamma / overhead) - 1


def next_commit_deadline(worker: WorkerState, gamma: float, overhead: float) -> float | None:
    """Deadline of the worker's next commit in its current check period, anchored at the period start."""
    if worker.period_commits >= worker.delta_c:
        return None
    spacing = gamma / worker.delta_c
    return worker.period_start + (worker.period_commits + 1) * spacing - overhead


def adsp_on_timeout(
    worker: WorkerState, now: float, gamma: float, overhead: float
) -> tuple[CommitMsg, float | None]:
    """Emit the accumulated update and reset it; the worker keeps training meanwhile.

    Returns the commit and the deadline the timer restarts with once the PS reply arrives
    (None when the worker has met this period's target).
    """
    msg = CommitMsg(worker=worker.id, update=worker.u, n_steps=worker.steps_since_commit, sent_at=now)
    worker.u = zeros(worker.u.size)
    worker.steps_since_commit = 0
    worker.issued += 1
    worker.period_commits += 1
    worker.in_flight = True
    worker.timer_deadline = None
    return msg, next_commit_deadline(worker, gamma, overhead)


def make_commit(worker: WorkerState, now: float) -> CommitMsg:
    msg = CommitMsg(worker=worker.id, update=worker.u, n_steps=worker.steps_since_commit, sent_at=now)
    worker.u = zeros(worker.u.size)
    worker.steps_since_commit = 0
    worker.issued += 1
    worker.in_flight = True
    return msg


def ps_on_commit(ps: PSState, msg: CommitMsg, lr: float, momentum: float = 0.0) -> PSState:
    """Apply one commit: W ← W − η·U (or the explicit-momentum rule); updates ``ps`` in place."""
    if msg.update.shape != ps.w_global.shape:
        raise DimensionMismatchError(f"commit of shape {msg.update.shape} for model {ps.w_global.shape}")
    i = msg.worker
    last = ps.last_commit_step[i]
    if last is not None:
        ps.staleness_commits.append(ps.step - last)
        ps.staleness_steps.append(ps.steps_applied - ps.last_commit_steps_applied[i])

    if momentum > 0:
        w_next = sgd_momentum_update(ps.w_global, ps.w_prev, msg.update, lr, momentum)
    else:
        w_next = apply_commit(ps.w_global, msg.update, lr)
    ps.w_prev = ps.w_global
    ps.w_global = w_next
    ps.step += 1
    ps.vector_clock[i] += 1
    ps.last_commit_step[i] = ps.step
    ps.last_commit_steps_applied[i] = ps.steps_applied + msg.n_steps
    ps.steps_applied += msg.n_steps
    return ps


def adacomm_update_tau(
    tau: int,
    loss_history: Sequence[float],
    *,
    tau0: int,
    multiplier: float,
    initial_loss: float,
) -> int:
    """Adapt the local-step count from per-interval mean losses (oldest first).

    A stalled loss multiplies τ; otherwise τ decays with the loss as τ₀·√(ℓ_now/ℓ₀).
    """
    if not loss_history:
        return tau
    latest = loss_history[-1]
    if len(loss_history) >= 2 and latest >= loss_history[-2]:
        return max(1, math.ceil(tau * multiplier))
    ratio = max(latest, 0.0) / initial_loss if initial_loss > 0 else 1.0
    return max(1, round(tau0 * math.sqrt(ratio)))


def exponential_interval(rng: np.random.Generator, mean: float) -> float:
    return float(rng.exponential(mean))


__all__ = [
    "ADSP",
    "BSP",
    "POLICY_KINDS",
    "SSP",
    "TAP",
    "Action",
    "AdaComm",
    "CommitMsg",
    "FixedAdaComm",
    "PSState",
    "SyncPolicy",
    "WorkerState",
    "adacomm_update_tau",
    "adsp_on_timeout",
    "adsp_timer_interval",
    "make_commit",
    "max_feasible_rate",
    "next_commit_deadline",
    "on_step_complete",
    "ps_on_commit",
    "ssp_gate_open",
]
