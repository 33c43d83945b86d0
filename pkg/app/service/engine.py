"""Deterministic virtual-time executor of workers, the parameter server and the ADSP scheduler.

Everything happens on one heap of events ordered by (time, seq). Communication is a fixed
per-worker round trip split evenly into uplink and downlink. Every worker's time is ledgered
as computation, communication or blocked, so the three always add up to the elapsed time.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core import logger
from app.core.errors import InfeasibleRateError, PreconditionError
from app.core.numerics import Hyperparams, accumulate_update
from app.service import sync
from app.service.metrics import CommitSnapshot, ProgressSample, RunMetrics, WorkerLedger
from app.service.scheduler import SchedulerState, run_epoch
from app.service.workloads import BatchSampler, TrainingTask

log = logger.get("engine")

_EPS = 1e-9


class ClusterSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    speeds: tuple[float, ...] = Field(min_length=1)  # mini-batches per virtual second
    overheads: tuple[float, ...]  # round-trip commit time per worker
    extra_delay: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> ClusterSpec:
        if any(not math.isfinite(v) or v <= 0 for v in self.speeds):
            raise ValueError("worker speeds must be positive and finite")
        if len(self.overheads) != len(self.speeds):
            raise ValueError(f"expected {len(self.speeds)} overheads, got {len(self.overheads)}")
        if any(not math.isfinite(o) or o < 0 for o in self.overheads):
            raise ValueError("overheads must be non-negative and finite")
        return self

    @property
    def n_workers(self) -> int:
        return len(self.speeds)

    @property
    def step_times(self) -> list[float]:
        return [1.0 / v for v in self.speeds]

    @property
    def effective_overheads(self) -> list[float]:
        return [o + self.extra_delay for o in self.overheads]

    @classmethod
    def homogeneous(
        cls, n_workers: int, speed: float = 1.0, overhead: float = 0.0, extra_delay: float = 0.0
    ) -> ClusterSpec:
        return cls(
            speeds=(speed,) * n_workers, overheads=(overhead,) * n_workers, extra_delay=extra_delay
        )

    @classmethod
    def from_heterogeneity(
        cls,
        n_workers: int,
        degree: float,
        overhead: float = 0.0,
        extra_delay: float = 0.0,
        *,
        mean_speed: float | None = None,
    ) -> ClusterSpec:
        """One slow worker, the others uniform so that mean/min speed equals ``degree``.

        The slow worker runs at speed 1 unless ``mean_speed`` is given; then the mean speed is
        held fixed and the slow worker runs at ``mean_speed / degree``.
        """
        if degree < 1:
            raise ValueError(f"heterogeneity degree must be >= 1, got {degree}")
        if n_workers == 1:
            if degree != 1:
                raise ValueError("a single worker is always homogeneous (degree 1)")
            return cls.homogeneous(1, mean_speed or 1.0, overhead, extra_delay)
        slow = 1.0 if mean_speed is None else mean_speed / degree
        fast = (degree * n_workers - 1) / (n_workers - 1) * slow
        return cls(
            speeds=(slow, *([fast] * (n_workers - 1))),
            overheads=(overhead,) * n_workers,
            extra_delay=extra_delay,
        )


class StopRule(BaseModel):
    """Stop at the first of: virtual-time limit, PS-step limit, convergence."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_time: float | None = Field(default=None, gt=0)
    max_steps: int | None = Field(default=None, ge=1)
    convergence_window: int = Field(default=10, ge=1)
    # variance rule; None disables it
    convergence_eps: float | None = Field(default=None, gt=0)
    # stop once loss <= f(W*) + target_gap; None disables it
    target_gap: float | None = Field(default=None, gt=0)
    # progress/commit sampling period for policies without a check period
    sample_period: float = Field(default=60.0, gt=0)

    @model_validator(mode="after")
    def _bounded(self) -> StopRule:
        if self.max_time is None and self.max_steps is None:
            raise ValueError("a stop rule needs max_time or max_steps")
        return self


class EventKind(enum.Enum):
    STEP_COMPLETE = "step_complete"
    COMMIT_ARRIVE = "commit_arrive"
    PARAMS_ARRIVE = "params_arrive"
    TIMER_FIRE = "timer_fire"
    CHECKPOINT_TICK = "checkpoint_tick"
    EVAL_TICK = "eval_tick"


@dataclass(frozen=True, slots=True, order=True)
class Event:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    worker: int = field(default=-1, compare=False)
    token: int = field(default=0, compare=False)
    payload: Any = field(default=None, compare=False, repr=False)


class EventQueue:
    """Binary heap of events; ``seq`` is unique so no two events ever compare equal."""

    def __init__(self) -> None:
        self._heap: list[Event] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def push(
        self, time: float, kind: EventKind, worker: int = -1, token: int = 0, payload: Any = None
    ) -> Event:
        if not math.isfinite(time):
            raise PreconditionError(f"cannot schedule {kind.value} at time {time}")
        event = Event(time, next(self._seq), kind, worker, token, payload)
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> Event:
        return heapq.heappop(self._heap)

    def peek_time(self) -> float:
        return self._heap[0].time


class _Status(enum.Enum):
    TRAINING = "training"
    WAITING = "waiting"  # round trip first, then barrier
    IDLE = "idle"  # local-step cap reached


@dataclass(slots=True)
class _Runtime:
    state: sync.WorkerState
    sampler: BatchSampler
    jitter: np.random.Generator
    step_time: float
    overhead: float
    ledger: WorkerLedger
    status: _Status = _Status.TRAINING
    since: float = 0.0
    comm_budget: float = 0.0
    step_token: int = 0
    step_due: float | None = None
    suspended: float | None = None
    timer_token: int = 0
    timer_pending: bool = False
    gate_pending: bool = False


def train_one_step(
    worker: sync.WorkerState, task: TrainingTask, sampler: BatchSampler, hp: Hyperparams
) -> None:
    """One local mini-batch: W_local and the accumulator U both move by the scaled gradient."""
    grad = task.minibatch_gradient(worker.w_local, sampler.next())
    lr = hp.local_rate(worker.local_steps)
    worker.u = accumulate_update(worker.u, grad, lr)
    worker.w_local = worker.w_local - lr * grad
    worker.local_steps += 1
    worker.steps_since_commit += 1


def commit_target(
    previous: int, rate: int, issued: list[int], max_rates: list[int | None], *, now: float = 0.0
) -> int:
    """Absolute commit target for the next check period.

    Advances by ``rate`` but never below max issued + 1, and never beyond what the tightest
    worker can still issue within one period.
    """
    target = max(previous + rate, max(issued) + 1)
    limits = [c + m for c, m in zip(issued, max_rates, strict=True) if m is not None]
    if limits and target > min(limits):
        log.warning("t=%.1f: commit target %d capped at %d", now, target, min(limits))
        target = min(limits)
    return target


class Simulation:
    """One run in virtual time; also the handle the commit-rate scheduler drives."""

    def __init__(
        self,
        task: TrainingTask,
        cluster: ClusterSpec,
        policy: sync.SyncPolicy,
        hp: Hyperparams,
        stop: StopRule,
        seed: int = 0,
    ) -> None:
        self.task = task
        self.cluster = cluster
        self.policy = policy
        self.hp = hp.resolved(cluster.n_workers)
        self.stop = stop
        self.seed = seed

        self._queue = EventQueue()
        self._now = 0.0
        self._finished = False

        n = cluster.n_workers
        w0 = task.initial_params()
        self.ps = sync.PSState.fresh(w0, n)
        streams = np.random.SeedSequence(seed).spawn(2 * n)
        shards = task.shards(n)
        self.workers = [
            _Runtime(
                state=sync.WorkerState.fresh(i, w0),
                sampler=BatchSampler(shards[i], self.hp.batch_size, np.random.default_rng(streams[i])),
                jitter=np.random.default_rng(streams[n + i]),
                step_time=step_time,
                overhead=overhead,
                ledger=WorkerLedger(worker=i),
            )
            for i, (step_time, overhead) in enumerate(
                zip(cluster.step_times, cluster.effective_overheads, strict=True)
            )
        ]

        self._times = [0.0]
        self._losses = [task.global_loss(w0)]
        self._snapshots: list[CommitSnapshot] = []
        self._progress: list[ProgressSample] = []
        self._local_total = 0
        self._converged_at: float | None = None
        self._converged_step: int | None = None
        self._converged_local: int | None = None
        self._blocked: list[int] = []
        self._scheduler = SchedulerState()

        self._tau = 1
        self._eval_mark = 0
        self._window_means: list[float] = []
        self._rate = 1
        self._target = 0
        self._max_rates: list[int | None] = []

        self._validate()
        self._start()

    # -- handle surface -------------------------------------------------------------------------

    @property
    def now(self) -> float:
        return self._now

    @property
    def finished(self) -> bool:
        return self._finished

    @property
    def check_period(self) -> float:
        if isinstance(self.policy, sync.ADSP):
            return self.policy.check_period
        return self.stop.sample_period

    def commit_counts(self) -> list[int]:
        return [rt.state.issued for rt in self.workers]

    def current_loss(self) -> float:
        return self._losses[-1]

    def max_commit_rate(self) -> int | None:
        finite = [r for r in self._max_rates if r is not None]
        return min(finite) if finite else None

    def set_commit_rate(self, rate: int) -> None:
        """Per-period commit increment; takes effect at the next checkpoint."""
        if rate < 1:
            raise PreconditionError(f"commit rate must be >= 1, got {rate}")
        self._rate = rate

    def advance(self, duration: float) -> None:
        """Process every event strictly before now + duration (clipped to the time limit)."""
        if duration < 0:
            raise PreconditionError(f"cannot advance by {duration}")
        until = self._now + duration
        if self.stop.max_time is not None:
            until = min(until, self.stop.max_time)
        while not self._finished and self._queue and self._queue.peek_time() < until - _EPS:
            event = self._queue.pop()
            self._now = event.time
            self._dispatch(event)
        if self._finished:
            return
        self._now = max(self._now, until)
        if self.stop.max_time is not None and self._now >= self.stop.max_time - _EPS:
            self._finished = True

    # -- driver ---------------------------------------------------------------------------------

    def run(self) -> RunMetrics:
        log.info(
            "run start: policy=%s workers=%d seed=%d", self.policy.kind, self.cluster.n_workers, self.seed
        )
        policy = self.policy
        if isinstance(policy, sync.ADSP) and policy.fixed_rate is None:
            while not self._finished:
                self._scheduler = run_epoch(
                    self._scheduler, self, epoch_len=policy.epoch_len, eval_window=policy.eval_window
                )
        else:
            while not self._finished:
                self.advance(self.check_period)
        metrics = self.metrics()
        log.info(
            "run finish: policy=%s t=%.1f T=%d loss=%.6g converged=%s",
            policy.kind,
            metrics.elapsed,
            metrics.total_steps,
            metrics.final_loss,
            metrics.convergence_time,
        )
        return metrics

    def metrics(self) -> RunMetrics:
        for rt in self.workers:
            self._accrue(rt)
        ledgers = [
            rt.ledger.model_copy(update={"commits": applied, "local_steps": rt.state.local_steps})
            for rt, applied in zip(self.workers, self.ps.vector_clock, strict=True)
        ]
        return RunMetrics(
            policy=self.policy.kind,
            seed=self.seed,
            times=list(self._times),
            losses=list(self._losses),
            ledgers=ledgers,
            commit_snapshots=list(self._snapshots),
            progress=list(self._progress),
            staleness_commits=list(self.ps.staleness_commits),
            staleness_steps=list(self.ps.staleness_steps),
            total_steps=self.ps.step,
            local_steps_total=self._local_total,
            elapsed=self._now,
            optimal_loss=self.task.optimal_loss,
            convergence_time=self._converged_at,
            convergence_step=self._converged_step,
            steps_to_converge=self._converged_local,
            scheduler_log=list(self._scheduler.decisions),
        )

    # -- setup ----------------------------------------------------------------------------------

    def _validate(self) -> None:
        policy = self.policy
        if not isinstance(policy, sync.ADSP):
            return
        self._max_rates = [
            sync.max_feasible_rate(policy.check_period, rt.overhead) for rt in self.workers
        ]
        for rt, limit in zip(self.workers, self._max_rates, strict=True):
            if limit is not None and limit < 1:
                raise InfeasibleRateError(
                    f"worker {rt.state.id}: overhead {rt.overhead}s leaves no training time "
                    f"in a {policy.check_period}s check period"
                )
        if policy.local_steps is not None and len(policy.local_steps) != self.cluster.n_workers:
            raise PreconditionError(
                f"local_steps lists {len(policy.local_steps)} caps for {self.cluster.n_workers} workers"
            )
        if policy.fixed_rate is not None:
            self._rate = policy.fixed_rate

    def _start(self) -> None:
        match self.policy:
            case sync.FixedAdaComm(tau=tau):
                self._tau = tau
            case sync.AdaComm(tau0=tau0, check_interval=interval):
                self._tau = tau0
                self._queue.push(interval, EventKind.EVAL_TICK)
        for rt in self.workers:
            rt.state.tau = self._tau
            self._begin_step(rt)
        self._queue.push(0.0, EventKind.CHECKPOINT_TICK)

    # -- event handlers -------------------------------------------------------------------------

    def _dispatch(self, event: Event) -> None:
        match event.kind:
            case EventKind.STEP_COMPLETE:
                self._on_step_complete(event)
            case EventKind.COMMIT_ARRIVE:
                self._on_commit_arrive(event)
            case EventKind.PARAMS_ARRIVE:
                self._on_params_arrive(event)
            case EventKind.TIMER_FIRE:
                self._on_timer_fire(event)
            case EventKind.CHECKPOINT_TICK:
                self._on_checkpoint()
            case EventKind.EVAL_TICK:
                self._on_eval_tick()

    def _on_step_complete(self, event: Event) -> None:
        rt = self.workers[event.worker]
        if event.token != rt.step_token:
            return
        rt.step_due = None
        w = rt.state
        train_one_step(w, self.task, rt.sampler, self.hp)
        self._local_total += 1

        if isinstance(self.policy, sync.ADSP):
            caps = self.policy.local_steps
            if caps is not None and w.steps_since_commit >= caps[w.id]:
                self._set_status(rt, _Status.IDLE)
            else:
                self._begin_step(rt)
            return

        action = sync.on_step_complete(self.policy, w, self.ps.vector_clock)
        if action is sync.Action.CONTINUE_TRAINING:
            self._begin_step(rt)
            return
        rt.gate_pending = action is sync.Action.BLOCK
        self._set_status(rt, _Status.WAITING, comm=rt.overhead)
        self._send(rt, sync.make_commit(w, self._now))

    def _on_commit_arrive(self, event: Event) -> None:
        msg: sync.CommitMsg = event.payload
        lr = self.hp.global_rate(self.ps.step + 1)
        sync.ps_on_commit(self.ps, msg, lr, self.hp.ps_momentum)
        self._record_loss()

        w_global = self.ps.w_global
        if isinstance(self.policy, sync.BSP | sync.FixedAdaComm | sync.AdaComm):
            # round barrier: release everybody once all vector clocks agree
            if min(self.ps.vector_clock) == max(self.ps.vector_clock):
                for rt in self.workers:
                    self._reply(rt, w_global)
        else:
            self._reply(self.workers[msg.worker], w_global)
            if isinstance(self.policy, sync.SSP):
                self._release_gated()

        if self.stop.max_steps is not None and self.ps.step >= self.stop.max_steps:
            self._finished = True

    def _on_params_arrive(self, event: Event) -> None:
        rt = self.workers[event.worker]
        w = rt.state
        w.commits += 1
        w.in_flight = False
        if isinstance(self.policy, sync.ADSP):
            self._adsp_ack(rt, event.payload)
            return

        w.w_local = event.payload.copy()
        if isinstance(self.policy, sync.AdaComm):
            w.tau = self._tau
        if rt.gate_pending:
            rt.gate_pending = False
            if not sync.ssp_gate_open(w.local_steps, self.ps.vector_clock, w.id, self.policy.slack):
                w.blocked = True
                self._blocked.append(w.id)
                return
        self._begin_step(rt)

    def _on_timer_fire(self, event: Event) -> None:
        rt = self.workers[event.worker]
        if event.token != rt.timer_token:
            return
        rt.timer_pending = False
        policy = self.policy
        w = rt.state
        if w.in_flight:
            return
        if policy.timer_jitter == "exponential":
            msg = sync.make_commit(w, self._now)
            w.period_commits += 1
        else:
            msg, _ = sync.adsp_on_timeout(w, self._now, policy.check_period, rt.overhead)

        was_idle = rt.status is _Status.IDLE
        if policy.blocking_commits:
            if rt.step_due is not None:
                rt.suspended = rt.step_due - self._now
                rt.step_token += 1
                rt.step_due = None
            self._set_status(rt, _Status.WAITING, comm=rt.overhead)
        elif was_idle:
            self._begin_step(rt)
        self._send(rt, msg)

    def _on_checkpoint(self) -> None:
        if isinstance(self.policy, sync.ADSP):
            self._adsp_checkpoint()
        self._snapshots.append(
            CommitSnapshot(time=self._now, commits=[rt.state.commits for rt in self.workers])
        )
        self._progress.append(ProgressSample(time=self._now, local_steps=self._local_total))
        self._queue.push(self._now + self.check_period, EventKind.CHECKPOINT_TICK)

    def _on_eval_tick(self) -> None:
        policy = self.policy
        window = self._losses[self._eval_mark :]
        self._eval_mark = len(self._losses)
        self._window_means.append(float(np.mean(window)) if window else self._losses[-1])
        tau = sync.adacomm_update_tau(
            self._tau,
            self._window_means,
            tau0=policy.tau0,
            multiplier=policy.multiplier,
            initial_loss=self._losses[0],
        )
        if tau != self._tau:
            log.debug("t=%.1f: AdaComm tau %d -> %d", self._now, self._tau, tau)
        self._tau = tau
        self._queue.push(self._now + policy.check_interval, EventKind.EVAL_TICK)

    # -- ADSP -----------------------------------------------------------------------------------

    def _adsp_checkpoint(self) -> None:
        if self.policy.timer_jitter == "exponential":
            rate = self._rate
            limit = self.max_commit_rate()
            if limit is not None and rate > limit:
                log.warning("commit rate %d capped at %d", rate, limit)
                rate = limit
            for rt in self.workers:
                w = rt.state
                w.delta_c, w.period_start, w.period_commits = rate, self._now, 0
                if not w.in_flight and not rt.timer_pending:
                    self._arm_timer(rt)
            return

        issued = [rt.state.issued for rt in self.workers]
        target = commit_target(self._target, self._rate, issued, self._max_rates, now=self._now)
        self._target = target
        log.debug("t=%.1f: checkpoint target %d, issued %s", self._now, target, issued)
        for rt in self.workers:
            w = rt.state
            w.delta_c = target - w.issued
            w.period_start = self._now
            w.period_commits = 0
            rt.timer_token += 1
            rt.timer_pending = False
            if not w.in_flight and w.delta_c > 0:
                self._arm_timer(rt)

    def _arm_timer(self, rt: _Runtime) -> None:
        policy = self.policy
        w = rt.state
        if policy.timer_jitter == "exponential":
            mean = sync.adsp_timer_interval(policy.check_period, w.delta_c, rt.overhead)
            at = self._now + sync.exponential_interval(rt.jitter, mean)
        else:
            deadline = sync.next_commit_deadline(w, policy.check_period, rt.overhead)
            if deadline is None:
                return
            at = max(self._now, deadline)
        rt.timer_token += 1
        rt.timer_pending = True
        self._queue.push(at, EventKind.TIMER_FIRE, rt.state.id, rt.timer_token)

    def _adsp_ack(self, rt: _Runtime, w_global: np.ndarray) -> None:
        w = rt.state
        # keep the local progress made while the commit was in flight
        w.w_local = w_global - w.u
        if self.policy.blocking_commits:
            self._set_status(rt, _Status.TRAINING)
            remaining, rt.suspended = rt.suspended, None
            if remaining is not None:
                self._begin_step(rt, duration=remaining)
            else:
                self._begin_step(rt)
        self._arm_timer(rt)

    # -- helpers --------------------------------------------------------------------------------

    def _begin_step(self, rt: _Runtime, duration: float | None = None) -> None:
        self._set_status(rt, _Status.TRAINING)
        rt.state.blocked = False
        rt.step_token += 1
        rt.step_due = self._now + (rt.step_time if duration is None else duration)
        self._queue.push(rt.step_due, EventKind.STEP_COMPLETE, rt.state.id, rt.step_token)

    def _send(self, rt: _Runtime, msg: sync.CommitMsg) -> None:
        self._queue.push(self._now + rt.overhead / 2, EventKind.COMMIT_ARRIVE, rt.state.id, payload=msg)

    def _reply(self, rt: _Runtime, w_global: np.ndarray) -> None:
        self._queue.push(
            self._now + rt.overhead / 2, EventKind.PARAMS_ARRIVE, rt.state.id, payload=w_global.copy()
        )

    def _release_gated(self) -> None:
        still: list[int] = []
        for i in sorted(self._blocked):
            rt = self.workers[i]
            w = rt.state
            if sync.ssp_gate_open(w.local_steps, self.ps.vector_clock, i, self.policy.slack):
                w.w_local = self.ps.w_global.copy()
                self._begin_step(rt)
            else:
                still.append(i)
        self._blocked = still

    def _record_loss(self) -> None:
        loss = self.task.global_loss(self.ps.w_global)
        self._times.append(self._now)
        self._losses.append(loss)
        if self._converged_at is None and self._has_converged(loss):
            self._converged_at = self._now
            self._converged_step = self.ps.step
            self._converged_local = self._local_total
            self._finished = True
            log.info("t=%.1f: converged after %d PS steps", self._now, self.ps.step)

    def _has_converged(self, loss: float) -> bool:
        stop = self.stop
        if stop.target_gap is not None and loss <= self.task.optimal_loss + stop.target_gap:
            return True
        if stop.convergence_eps is not None and len(self._losses) >= stop.convergence_window:
            return float(np.var(self._losses[-stop.convergence_window :])) < stop.convergence_eps
        return False

    def _set_status(self, rt: _Runtime, status: _Status, comm: float = 0.0) -> None:
        self._accrue(rt)
        rt.status = status
        if status is _Status.WAITING:
            rt.comm_budget = comm

    def _accrue(self, rt: _Runtime) -> None:
        dt = self._now - rt.since
        rt.since = self._now
        if dt <= 0:
            return
        ledger = rt.ledger
        match rt.status:
            case _Status.TRAINING:
                ledger.comp_s += dt
            case _Status.WAITING:
                comm = min(dt, rt.comm_budget)
                # the two transit legs sum to the overhead only up to rounding
                if dt - comm <= _EPS:
                    comm = dt
                rt.comm_budget = max(0.0, rt.comm_budget - comm)
                ledger.comm_s += comm
                ledger.blocked_s += dt - comm
            case _Status.IDLE:
                ledger.blocked_s += dt


def run(
    task: TrainingTask,
    cluster: ClusterSpec,
    policy: sync.SyncPolicy,
    hp: Hyperparams,
    stop: StopRule,
    seed: int = 0,
) -> RunMetrics:
    return Simulation(task, cluster, policy, hp, stop, seed).run()


__all__ = [
    "ClusterSpec",
    "Event",
    "EventKind",
    "EventQueue",
    "Simulation",
    "StopRule",
    "commit_target",
    "train_one_step",
    "run",
]
