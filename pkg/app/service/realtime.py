"""Wall-clock runtime: one PS actor, one actor per worker, ADSP timer and checkpoint actors.

Actors talk through asyncio queues only. Virtual seconds are mapped to wall seconds by
``time_scale``. Runs are comparable to the simulation but not bit-deterministic. The
commit-rate scheduler runs in a worker thread and drives the runtime through a handle that
sleeps in wall time.
"""

from __future__ import annotations

import asyncio
import threading
import time
from collections.abc import Callable, Coroutine
from typing import Any

import numpy as np

from app.core import config, logger
from app.core.errors import PreconditionError
from app.core.numerics import Hyperparams
from app.service import sync
from app.service.engine import ClusterSpec, StopRule, commit_target, train_one_step
from app.service.metrics import CommitSnapshot, ProgressSample, RunMetrics, WorkerLedger
from app.service.scheduler import SchedulerState, run_epoch
from app.service.workloads import BatchSampler, TrainingTask

log = logger.get("realtime")


class _Clock:
    def __init__(self, scale: float) -> None:
        if scale <= 0:
            raise PreconditionError(f"time scale must be positive, got {scale}")
        self.scale = scale
        self._t0 = time.monotonic()

    def start(self) -> None:
        self._t0 = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._t0) / self.scale

    async def sleep(self, duration: float) -> None:
        await asyncio.sleep(max(duration, 0.0) * self.scale)

    async def sleep_until(self, at: float) -> None:
        await self.sleep(at - self.now())


class _ThreadHandle:
    """Scheduler-facing view of a running realtime cluster, safe to use from another thread."""

    def __init__(self, runtime: RealtimeRun, loop: asyncio.AbstractEventLoop) -> None:
        self._rt = runtime
        self._loop = loop

    @property
    def now(self) -> float:
        return self._rt.clock.now()

    @property
    def finished(self) -> bool:
        return self._rt.done.is_set()

    @property
    def check_period(self) -> float:
        return self._rt.policy.check_period

    def commit_counts(self) -> list[int]:
        return [w.issued for w in self._rt.states]

    def current_loss(self) -> float:
        return self._rt.losses[-1]

    def max_commit_rate(self) -> int | None:
        finite = [r for r in self._rt.max_rates if r is not None]
        return min(finite) if finite else None

    def set_commit_rate(self, rate: int) -> None:
        if rate < 1:
            raise PreconditionError(f"commit rate must be >= 1, got {rate}")
        self._loop.call_soon_threadsafe(setattr, self._rt, "rate", rate)

    def advance(self, duration: float) -> None:
        self._rt.done.wait(timeout=max(duration, 0.0) * self._rt.clock.scale)


class RealtimeRun:
    def __init__(
        self,
        task: TrainingTask,
        cluster: ClusterSpec,
        policy: sync.SyncPolicy,
        hp: Hyperparams,
        stop: StopRule,
        seed: int = 0,
        time_scale: float | None = None,
    ) -> None:
        if isinstance(policy, sync.ADSP) and (
            policy.timer_jitter != "none" or policy.local_steps is not None or policy.blocking_commits
        ):
            raise PreconditionError(
                "realtime mode runs plain ADSP only (no timer jitter, local-step caps or blocking commits)"
            )
        self.task = task
        self.cluster = cluster
        self.policy = policy
        self.hp = hp.resolved(cluster.n_workers)
        self.stop = stop
        self.seed = seed
        self.clock = _Clock(config.realtime_time_scale if time_scale is None else time_scale)

        n = cluster.n_workers
        w0 = task.initial_params()
        self.ps = sync.PSState.fresh(w0, n)
        streams = np.random.SeedSequence(seed).spawn(n)
        shards = task.shards(n)
        self.states = [sync.WorkerState.fresh(i, w0) for i in range(n)]
        self.samplers = [
            BatchSampler(shards[i], self.hp.batch_size, np.random.default_rng(streams[i]))
            for i in range(n)
        ]
        self.ledgers = [WorkerLedger(worker=i) for i in range(n)]
        self.step_times = cluster.step_times
        self.overheads = cluster.effective_overheads

        self.times = [0.0]
        self.losses = [task.global_loss(w0)]
        self.snapshots: list[CommitSnapshot] = []
        self.progress: list[ProgressSample] = []
        self.local_total = 0
        self.converged: tuple[float, int, int] | None = None

        self.rate = 1
        self.target = 0
        self.tau = 1
        self.max_rates: list[int | None] = []
        if isinstance(policy, sync.ADSP):
            self.max_rates = [sync.max_feasible_rate(policy.check_period, o) for o in self.overheads]
            self.rate = policy.fixed_rate or 1
        elif isinstance(policy, sync.FixedAdaComm):
            self.tau = policy.tau
        elif isinstance(policy, sync.AdaComm):
            self.tau = policy.tau0
        for w in self.states:
            w.tau = self.tau

        self.done = threading.Event()
        self.scheduler = SchedulerState()
        self._failure: BaseException | None = None
        self._background: set[asyncio.Task[Any]] = set()

    # -- entry ----------------------------------------------------------------------------------

    async def run(self) -> RunMetrics:
        n = self.cluster.n_workers
        self._inbox: asyncio.Queue[sync.CommitMsg] = asyncio.Queue()
        self._replies: list[asyncio.Queue[np.ndarray]] = [asyncio.Queue() for _ in range(n)]
        self._applied = asyncio.Condition()
        self._stop = asyncio.Event()
        self._periods = [asyncio.Event() for _ in range(n)]

        loop = asyncio.get_running_loop()
        self.clock.start()
        actors: list[Coroutine[Any, Any, None]] = [self._ps_actor(), self._sampler_actor()]
        actors += [self._worker_actor(i) for i in range(n)]
        if isinstance(self.policy, sync.ADSP):
            actors += [self._timer_actor(i) for i in range(n)]
        if isinstance(self.policy, sync.AdaComm):
            actors.append(self._adacomm_actor())
        tasks = [asyncio.create_task(self._guard(actor)) for actor in actors]

        scheduler = None
        if isinstance(self.policy, sync.ADSP) and self.policy.fixed_rate is None:
            scheduler = loop.run_in_executor(None, self._scheduler_thread, _ThreadHandle(self, loop))

        timeout = None if self.stop.max_time is None else self.stop.max_time * self.clock.scale
        try:
            await asyncio.wait_for(self._stop.wait(), timeout=timeout)
        except (TimeoutError, asyncio.TimeoutError):
            pass
        elapsed = self.clock.now()
        self._finish()
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, *self._background, return_exceptions=True)
        if scheduler is not None:
            await scheduler
        if self._failure is not None:
            raise self._failure
        return self._metrics(elapsed)

    def _finish(self) -> None:
        self._stop.set()
        self.done.set()

    async def _guard(self, actor: Coroutine[Any, Any, None]) -> None:
        try:
            await actor
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            log.exception("actor failed")
            self._failure = exc
            self._finish()

    def _scheduler_thread(self, handle: _ThreadHandle) -> None:
        policy = self.policy
        state = self.scheduler
        while not handle.finished:
            state = run_epoch(state, handle, epoch_len=policy.epoch_len, eval_window=policy.eval_window)
        self.scheduler = state

    # -- actors ---------------------------------------------------------------------------------

    async def _ps_actor(self) -> None:
        barrier = isinstance(self.policy, sync.BSP | sync.FixedAdaComm | sync.AdaComm)
        while not self._stop.is_set():
            msg = await self._inbox.get()
            sync.ps_on_commit(self.ps, msg, self.hp.global_rate(self.ps.step + 1), self.hp.ps_momentum)
            self._record_loss()
            w_global = self.ps.w_global.copy()
            if not barrier:
                self._deliver(msg.worker, w_global)
            elif min(self.ps.vector_clock) == max(self.ps.vector_clock):
                for j in range(self.cluster.n_workers):
                    self._deliver(j, w_global)
            async with self._applied:
                self._applied.notify_all()
            if self.stop.max_steps is not None and self.ps.step >= self.stop.max_steps:
                self._finish()

    def _deliver(self, worker: int, w_global: np.ndarray) -> None:
        async def downlink() -> None:
            await self.clock.sleep(self.overheads[worker] / 2)
            await self._replies[worker].put(w_global)

        task = asyncio.create_task(downlink())
        self._background.add(task)
        task.add_done_callback(self._background.discard)

    async def _uplink(self, msg: sync.CommitMsg) -> None:
        await self.clock.sleep(self.overheads[msg.worker] / 2)
        await self._inbox.put(msg)

    async def _worker_actor(self, i: int) -> None:
        w, ledger, step_time = self.states[i], self.ledgers[i], self.step_times[i]
        while True:
            await self.clock.sleep(step_time)
            train_one_step(w, self.task, self.samplers[i], self.hp)
            self.local_total += 1
            ledger.comp_s += step_time
            if isinstance(self.policy, sync.ADSP):
                continue
            action = sync.on_step_complete(self.policy, w, self.ps.vector_clock)
            if action is sync.Action.CONTINUE_TRAINING:
                continue

            sent = self.clock.now()
            await self._uplink(sync.make_commit(w, sent))
            w.w_local = await self._replies[i].get()
            w.commits += 1
            w.in_flight = False
            w.tau = self.tau
            if action is sync.Action.BLOCK:
                w.blocked = True
                async with self._applied:
                    await self._applied.wait_for(self._gate(w))
                w.blocked = False
                w.w_local = self.ps.w_global.copy()
            waited = self.clock.now() - sent
            comm = min(waited, self.overheads[i])
            ledger.comm_s += comm
            ledger.blocked_s += waited - comm

    def _gate(self, w: sync.WorkerState) -> Callable[[], bool]:
        slack = self.policy.slack
        return lambda: sync.ssp_gate_open(w.local_steps, self.ps.vector_clock, w.id, slack)

    async def _timer_actor(self, i: int) -> None:
        w, overhead, gamma = self.states[i], self.overheads[i], self.policy.check_period
        period = self._periods[i]
        await period.wait()
        period.clear()
        while True:
            deadline = sync.next_commit_deadline(w, gamma, overhead) if w.delta_c > 0 else None
            if deadline is None:
                await period.wait()
                period.clear()
                continue
            await self.clock.sleep_until(deadline)
            msg, _ = sync.adsp_on_timeout(w, self.clock.now(), gamma, overhead)
            await self._uplink(msg)
            w_global = await self._replies[i].get()
            w.commits += 1
            w.in_flight = False
            w.w_local = w_global - w.u

    async def _sampler_actor(self) -> None:
        """Checkpoints: ADSP commit targets every Γ, progress and commit counts for every policy."""
        period = self.policy.check_period if isinstance(self.policy, sync.ADSP) else self.stop.sample_period
        k = 0
        while True:
            await self.clock.sleep_until(k * period)
            now = k * period
            if isinstance(self.policy, sync.ADSP):
                issued = [w.issued for w in self.states]
                self.target = commit_target(self.target, self.rate, issued, self.max_rates, now=now)
                for w, event in zip(self.states, self._periods, strict=True):
                    w.delta_c = self.target - w.issued
                    w.period_start = now
                    w.period_commits = 0
                    event.set()
            self.snapshots.append(CommitSnapshot(time=now, commits=[w.commits for w in self.states]))
            self.progress.append(ProgressSample(time=now, local_steps=self.local_total))
            k += 1

    async def _adacomm_actor(self) -> None:
        policy = self.policy
        mark = 0
        means: list[float] = []
        while True:
            await self.clock.sleep(policy.check_interval)
            window, mark = self.losses[mark:], len(self.losses)
            means.append(float(np.mean(window)) if window else self.losses[-1])
            self.tau = sync.adacomm_update_tau(
                self.tau,
                means,
                tau0=policy.tau0,
                multiplier=policy.multiplier,
                initial_loss=self.losses[0],
            )

    # -- bookkeeping ----------------------------------------------------------------------------

    def _record_loss(self) -> None:
        now = self.clock.now()
        loss = self.task.global_loss(self.ps.w_global)
        self.times.append(now)
        self.losses.append(loss)
        if self.converged is not None:
            return
        stop = self.stop
        hit = stop.target_gap is not None and loss <= self.task.optimal_loss + stop.target_gap
        if not hit and stop.convergence_eps is not None and len(self.losses) >= stop.convergence_window:
            hit = float(np.var(self.losses[-stop.convergence_window :])) < stop.convergence_eps
        if hit:
            self.converged = (now, self.ps.step, self.local_total)
            self._finish()

    def _metrics(self, elapsed: float) -> RunMetrics:
        ledgers = [
            led.model_copy(update={"commits": applied, "local_steps": w.local_steps})
            for led, w, applied in zip(self.ledgers, self.states, self.ps.vector_clock, strict=True)
        ]
        converged_at, converged_step, converged_local = self.converged or (None, None, None)
        return RunMetrics(
            policy=self.policy.kind,
            seed=self.seed,
            mode="realtime",
            times=list(self.times),
            losses=list(self.losses),
            ledgers=ledgers,
            commit_snapshots=list(self.snapshots),
            progress=list(self.progress),
            staleness_commits=list(self.ps.staleness_commits),
            staleness_steps=list(self.ps.staleness_steps),
            total_steps=self.ps.step,
            local_steps_total=self.local_total,
            elapsed=elapsed,
            optimal_loss=self.task.optimal_loss,
            convergence_time=converged_at,
            convergence_step=converged_step,
            steps_to_converge=converged_local,
            scheduler_log=list(self.scheduler.decisions),
        )


def run_realtime(
    task: TrainingTask,
    cluster: ClusterSpec,
    policy: sync.SyncPolicy,
    hp: Hyperparams,
    stop: StopRule,
    seed: int = 0,
    time_scale: float | None = None,
) -> RunMetrics:
    return asyncio.run(RealtimeRun(task, cluster, policy, hp, stop, seed, time_scale).run())


__all__ = ["RealtimeRun", "run_realtime"]
