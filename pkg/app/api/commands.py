"""The four operator verbs: run, compare, sweep and verify."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from itertools import repeat
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from app.api.artifacts import (
    SWEEP_COLUMNS,
    atomic_write,
    render_csv,
    run_id_for,
    write_run_artifacts,
)
from app.api.schemas import ExperimentConfig, describe_validation_error
from app.core import config, get_run_cache, logger
from app.core.errors import ConfigError, InfeasibleRateError, LabError
from app.service import analysis, sync
from app.service.engine import ClusterSpec, StopRule, run
from app.service.metrics import RunMetrics, waiting_fraction
from app.service.realtime import run_realtime

log = logger.get("api.commands")

SWEEP_PARAMS = ("delta_c", "heterogeneity", "extra_delay", "workers")
INVARIANT_CHECKPOINTS = 100


class RunSummary(BaseModel):
    policy: str
    run_id: str
    convergence_time: float | None
    steps_to_converge: int | None
    final_loss: float
    waiting_fraction: float
    total_steps: int
    elapsed: float

    def line(self) -> str:
        converged = "never" if self.convergence_time is None else f"{self.convergence_time:.1f}s"
        return (
            f"{self.policy}: converged={converged} waiting={self.waiting_fraction:.3f} "
            f"T={self.total_steps} final_loss={self.final_loss:.6g}"
        )


class SweepRow(BaseModel):
    param: str
    value: float
    feasible: bool = True
    convergence_time: float | None = None
    final_loss: float | None = None
    waiting_fraction: float | None = None

    def cells(self) -> tuple[object, ...]:
        if not self.feasible:
            return (self.param, self.value, "infeasible", None, None)
        return (self.param, self.value, self.convergence_time, self.final_loss, self.waiting_fraction)


class VerifyReport(BaseModel):
    config_hash: str
    checks: list[analysis.CheckResult]

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    @property
    def passed(self) -> bool:
        return not self.failed


def summarize(metrics: RunMetrics) -> RunSummary:
    _, average = waiting_fraction(metrics)
    return RunSummary(
        policy=metrics.policy,
        run_id=metrics.run_id,
        convergence_time=metrics.convergence_time,
        steps_to_converge=metrics.steps_to_converge,
        final_loss=metrics.final_loss,
        waiting_fraction=average,
        total_steps=metrics.total_steps,
        elapsed=metrics.elapsed,
    )


def render(rows: Sequence[BaseModel], fmt: str) -> str:
    if fmt == "json":
        return json.dumps([r.model_dump(mode="json") for r in rows], indent=2)
    if not rows:
        return ""
    columns = list(type(rows[0]).model_fields)
    return render_csv(columns, ([getattr(r, c) for c in columns] for r in rows))


def _build_policy(cfg: ExperimentConfig, kind: str | None = None) -> sync.SyncPolicy:
    try:
        return cfg.policy.build(kind)
    except ValidationError as exc:
        field, summary = describe_validation_error(exc)
        raise ConfigError(summary, f"policy.{field}" if field else "policy") from exc


def execute(cfg: ExperimentConfig, policy: sync.SyncPolicy, *, realtime: bool = False) -> RunMetrics:
    task = cfg.task.build()
    cluster = cfg.cluster.build()
    runner = run_realtime if realtime else run
    metrics = runner(task, cluster, policy, cfg.hyper, cfg.stop, cfg.seed)
    metrics.run_id = run_id_for(policy.kind, cfg.config_hash(), cfg.seed, metrics.mode)
    return metrics


def cmd_run(cfg: ExperimentConfig, *, realtime: bool = False) -> RunSummary:
    metrics = execute(cfg, _build_policy(cfg), realtime=realtime)
    write_run_artifacts(metrics, cfg.output.path, cfg.config_hash())
    return summarize(metrics)


def cmd_compare(
    cfg: ExperimentConfig, policies: Sequence[str], *, realtime: bool = False
) -> list[RunSummary]:
    built = [_build_policy(cfg, kind) for kind in policies]
    summaries = []
    for policy in built:
        try:
            metrics = execute(cfg, policy, realtime=realtime)
        except LabError as exc:
            raise LabError(f"compare aborted: {policy.kind} run failed: {exc}") from exc
        write_run_artifacts(metrics, cfg.output.path, cfg.config_hash())
        summaries.append(summarize(metrics))
        log.info("compare: %s", summaries[-1].line())
    atomic_write(cfg.output.path / f"compare-{cfg.config_hash()}.csv", render(summaries, "csv"))
    return summaries


def sweep_config(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    """The configuration of one sweep point."""
    cluster = cfg.cluster
    try:
        match param:
            case "delta_c":
                if cfg.policy.kind != "adsp":
                    raise ConfigError("the commit-rate sweep needs policy.kind = adsp", "policy.kind")
                return cfg.with_values(policy={"fixed_rate": int(value)})
            case "heterogeneity":
                mean = cluster.mean_speed
                if cluster.speeds is not None:
                    mean = float(np.mean(cluster.speeds))
                return cfg.with_values(
                    cluster={
                        "heterogeneity": value,
                        "mean_speed": mean,
                        "speeds": None,
                        "workers": cluster.n_workers,
                    }
                )
            case "extra_delay":
                return cfg.with_values(cluster={"extra_delay": value})
            case "workers":
                if isinstance(cluster.overhead, list):
                    raise ConfigError("a workers sweep needs a scalar overhead", "cluster.overhead")
                degree = cluster.heterogeneity
                if degree is None:
                    degree = analysis.heterogeneity_degree(cluster.speeds)
                return cfg.with_values(
                    cluster={"workers": int(value), "heterogeneity": degree, "speeds": None}
                )
    except ValidationError as exc:
        field, summary = describe_validation_error(exc)
        raise ConfigError(summary, field or None) from exc
    raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")


def _sweep_row(cfg: ExperimentConfig, param: str, value: float, realtime: bool = False) -> SweepRow:
    try:
        point = sweep_config(cfg, param, value)
        # heterogeneity sweeps at M=1 only admit H=1
        point.cluster.build()
    except (ConfigError, ValueError) as exc:
        log.warning("sweep %s=%g skipped: %s", param, value, exc)
        return SweepRow(param=param, value=value, feasible=False)

    cache = None if realtime else get_run_cache()
    key = analysis.run_key(kind="sweep", config=point.config_hash(), param=param, value=value)
    if cache is not None and (hit := cache.get(key)) is not None:
        log.debug("sweep %s=%g served from cache", param, value)
        return hit
    try:
        metrics = execute(point, _build_policy(point), realtime=realtime)
    except InfeasibleRateError as exc:
        log.warning("sweep %s=%g infeasible: %s", param, value, exc)
        return SweepRow(param=param, value=value, feasible=False)
    write_run_artifacts(metrics, point.output.path, point.config_hash())
    summary = summarize(metrics)
    row = SweepRow(
        param=param,
        value=value,
        convergence_time=summary.convergence_time,
        final_loss=summary.final_loss,
        waiting_fraction=summary.waiting_fraction,
    )
    if cache is not None:
        cache.set(key, row)
    log.info("sweep %s=%g done: converged=%s", param, value, row.convergence_time)
    return row


def cmd_sweep(
    cfg: ExperimentConfig, param: str, values: Sequence[float], *, realtime: bool = False
) -> list[SweepRow]:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if config.sweep_workers > 1 and not realtime and len(values) > 1:
        with ProcessPoolExecutor(max_workers=config.sweep_workers) as pool:
            rows = list(pool.map(_sweep_row, repeat(cfg), repeat(param), values, repeat(False)))
    else:
        rows = [_sweep_row(cfg, param, v, realtime) for v in values]
    atomic_write(
        cfg.output.path / f"sweep-{param}-{cfg.config_hash()}.csv",
        render_csv(SWEEP_COLUMNS, (row.cells() for row in rows)),
    )
    return rows


# -- verify ----------------------------------------------------------------------------------------


def _check_period(cfg: ExperimentConfig) -> float:
    return cfg.policy.check_period or sync.ADSP().check_period


def _invariant_checks(cfg: ExperimentConfig) -> list[analysis.CheckResult]:
    """ADSP on the configured cluster: balanced commit counts and no blocked time."""
    policy = _build_policy(cfg) if cfg.policy.kind == "adsp" else sync.ADSP()
    policy = policy.model_copy(update={"local_steps": None})
    # fixed horizon, no convergence rules
    stop = StopRule(max_time=(INVARIANT_CHECKPOINTS + 1) * _check_period(cfg))
    metrics = run(cfg.task.build(), cfg.cluster.build(), policy, cfg.hyper, stop, cfg.seed)
    gap = metrics.max_commit_gap()
    blocked = max(led.blocked_s for led in metrics.ledgers)
    observed = len(metrics.commit_snapshots)
    return [
        analysis.CheckResult(
            name="commit_balance",
            theory=float(config.commit_epsilon),
            empirical=float(gap),
            tolerance=0.0,
            passed=gap <= config.commit_epsilon and observed >= INVARIANT_CHECKPOINTS,
            note=f"{observed} checkpoints",
        ),
        analysis.CheckResult(
            name="adsp_no_blocking", theory=0.0, empirical=blocked, tolerance=0.0, passed=blocked == 0.0
        ),
    ]


def _staleness_checks(cfg: ExperimentConfig) -> list[analysis.CheckResult]:
    """Poisson commits on a homogeneous cluster, one expected commit per mini-batch."""
    settings = cfg.verify
    m = cfg.cluster.n_workers
    gamma = _check_period(cfg)
    rate = max(1, round(gamma))
    cluster = ClusterSpec.homogeneous(m, speed=1.0)
    policy = sync.ADSP(check_period=gamma, fixed_rate=rate, timer_jitter="exponential")
    stop = StopRule(max_steps=settings.staleness_commits + m)
    metrics = run(cfg.task.build(), cluster, policy, cfg.hyper, stop, cfg.seed)

    p, _ = analysis.implicit_momentum(analysis.TheoryInputs.from_cluster(cluster, gamma, rate))
    if settings.staleness_p is not None:
        p = settings.staleness_p
    return [analysis.check_staleness(metrics.staleness_commits, p, settings.staleness_tolerance)]


def _momentum_checks(cfg: ExperimentConfig) -> list[analysis.CheckResult]:
    """Raising every worker's commit rate lowers the measured mean staleness."""
    settings = cfg.verify
    cluster = cfg.cluster.build()
    gamma = _check_period(cfg)
    limits = [
        r for r in (sync.max_feasible_rate(gamma, o) for o in cluster.effective_overheads) if r is not None
    ]
    rates = sorted(r for r in set(settings.momentum_rates) if not limits or r <= min(limits))
    task = cfg.task.build()
    stop = StopRule(max_time=settings.momentum_time)
    means, ps = [], []
    for rate in rates:
        policy = sync.ADSP(check_period=gamma, fixed_rate=rate)
        metrics = run(task, cluster, policy, cfg.hyper, stop, cfg.seed)
        means.append(float(np.mean(metrics.staleness_steps)) if metrics.staleness_steps else 0.0)
        ps.append(analysis.implicit_momentum(analysis.TheoryInputs.from_cluster(cluster, gamma, rate))[0])
    monotone = all(b <= a for a, b in zip(means, means[1:], strict=False))
    theory_monotone = all(b >= a for a, b in zip(ps, ps[1:], strict=False))
    return [
        analysis.CheckResult(
            name="implicit_momentum_monotone",
            theory=ps[-1] if ps else None,
            empirical=means[-1] if means else None,
            tolerance=0.0,
            passed=monotone and theory_monotone,
            note=f"rates {rates}: mean staleness {[round(x, 3) for x in means]}, p {[round(x, 4) for x in ps]}",
        )
    ]


def _throughput_checks(cfg: ExperimentConfig) -> list[analysis.CheckResult]:
    settings = cfg.verify
    rng = np.random.default_rng(cfg.seed)
    m = cfg.cluster.n_workers
    gamma = _check_period(cfg)
    rate, tau = 4, 4
    task = cfg.task.build()
    stop = StopRule(max_time=settings.throughput_time, sample_period=gamma)
    checks = []
    for k in range(settings.throughput_clusters):
        cluster = ClusterSpec(
            speeds=tuple(rng.uniform(0.5, 2.0, m)), overheads=tuple(rng.uniform(0.0, 1.0, m))
        )
        inputs = analysis.TheoryInputs.from_cluster(cluster, gamma, rate)
        for policy in (
            sync.BSP(),
            sync.FixedAdaComm(tau=tau),
            sync.ADSP(check_period=gamma, fixed_rate=rate, blocking_commits=True),
        ):
            metrics = run(task, cluster, policy, cfg.hyper, stop, cfg.seed)
            checks.append(
                analysis.check_throughput(
                    f"throughput_{policy.kind}_{k}",
                    metrics,
                    analysis.policy_speeds(inputs, policy),
                    warmup=2 * gamma,
                    tolerance=settings.throughput_tolerance,
                )
            )

    homogeneous = analysis.TheoryInputs.from_cluster(ClusterSpec.homogeneous(m, 1.0, 1.0), gamma, rate)
    ssp_fixed = (
        analysis.policy_speeds(homogeneous, sync.SSP(slack=tau)),
        analysis.policy_speeds(homogeneous, sync.FixedAdaComm(tau=tau)),
    )
    bsp_ssp = (
        analysis.policy_speeds(inputs, sync.BSP()),
        analysis.policy_speeds(inputs, sync.SSP(slack=1)),
    )
    for name, (left, right) in (("homogeneous_ssp_equals_fixed", ssp_fixed), ("slack1_ssp_equals_bsp", bsp_ssp)):
        checks.append(
            analysis.CheckResult(
                name=name, theory=left, empirical=right, tolerance=0.0, passed=math.isclose(left, right)
            )
        )
    return checks


def _regret_checks(cfg: ExperimentConfig) -> list[analysis.CheckResult]:
    settings = cfg.verify
    cluster = cfg.cluster.build()
    gamma = _check_period(cfg)
    rate = max(1, int(gamma * min(cluster.speeds)))
    limits = [
        r for r in (sync.max_feasible_rate(gamma, o) for o in cluster.effective_overheads) if r is not None
    ]
    if limits:
        rate = min(rate, min(limits))
    hp = cfg.hyper.model_copy(update={"lr_schedule": "inverse_sqrt", "local_lr_decay": 1.0})
    policy = sync.ADSP(check_period=gamma, fixed_rate=rate)
    stop = StopRule(max_steps=settings.regret_steps)
    task = cfg.task.build()
    checks = []
    for seed in range(cfg.seed, cfg.seed + settings.regret_seeds):
        metrics = run(task, cluster, policy, hp, stop, seed)
        check = analysis.check_regret(metrics.losses[1:], task.optimal_loss, settings.regret_tolerance)
        checks.append(check.model_copy(update={"name": f"{check.name}_seed{seed}"}))
    return checks


def _adsp_plus_checks(cfg: ExperimentConfig) -> list[analysis.CheckResult]:
    """ADSP without local-step caps against the best capped grid point."""
    settings = cfg.verify
    gamma = _check_period(cfg)
    m = len(settings.plus_speeds)
    cluster = ClusterSpec(speeds=tuple(settings.plus_speeds), overheads=(settings.plus_overhead,) * m)
    stop = StopRule(max_time=settings.plus_time, target_gap=settings.plus_target_gap)
    task, cache = cfg.task.build(), get_run_cache()
    best = analysis.adsp_plus_search(
        task,
        cluster,
        settings.plus_rate,
        settings.plus_tau_max,
        hp=cfg.hyper,
        stop=stop,
        check_period=gamma,
        seed=cfg.seed,
        cache=cache,
    )
    policy = sync.ADSP(check_period=gamma, fixed_rate=settings.plus_rate)
    key = analysis.run_key(
        kind="adsp",
        task=analysis.task_fingerprint(task),
        cluster=cluster.model_dump(),
        policy=policy.model_dump(),
        hp=cfg.hyper.model_dump(),
        stop=stop.model_dump(),
        seed=cfg.seed,
    )
    adsp_time = analysis.cached_convergence(
        cache, key, lambda: run(task, cluster, policy, cfg.hyper, stop, cfg.seed)
    )
    reached = math.isfinite(adsp_time) and math.isfinite(best.convergence_time)
    note = f"best caps {list(best.local_steps)} over {best.evaluated} runs"
    if not reached:
        note = f"target gap not reached within {settings.plus_time:g}s; {note}"
    return [
        analysis.CheckResult(
            name="adsp_plus_near_optimal",
            theory=best.convergence_time if math.isfinite(best.convergence_time) else None,
            empirical=adsp_time if math.isfinite(adsp_time) else None,
            tolerance=settings.plus_tolerance,
            passed=reached and adsp_time <= (1 + settings.plus_tolerance) * best.convergence_time,
            note=note,
        )
    ]


def cmd_verify(cfg: ExperimentConfig) -> VerifyReport:
    checks = [
        *_invariant_checks(cfg),
        *_staleness_checks(cfg),
        *_momentum_checks(cfg),
        *_throughput_checks(cfg),
        *_regret_checks(cfg),
        *_adsp_plus_checks(cfg),
    ]
    report = VerifyReport(config_hash=cfg.config_hash(), checks=checks)
    path = cfg.output.path / f"verify-{report.config_hash}.json"
    atomic_write(path, json.dumps(report.model_dump(mode="json"), indent=2) + "\n")
    for check in checks:
        log.info("check %s: %s", check.name, "pass" if check.passed else "FAIL")
    return report


def write_task(cfg: ExperimentConfig, path: Path) -> None:
    atomic_write(path, cfg.task.build().to_document().dumps())


__all__ = [
    "SWEEP_PARAMS",
    "RunSummary",
    "SweepRow",
    "VerifyReport",
    "cmd_compare",
    "cmd_run",
    "cmd_sweep",
    "cmd_verify",
    "execute",
    "render",
    "summarize",
    "sweep_config",
    "write_task",
]
