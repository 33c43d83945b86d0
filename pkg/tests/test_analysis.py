from __future__ import annotations

import math

import numpy as np
import pytest

from app.core import RunCache
from app.core.errors import BudgetError, InfeasibleRateError, InsufficientDataError
from app.core.numerics import Hyperparams
from app.service import sync
from app.service.analysis import (
    TheoryInputs,
    adsp_local_steps,
    adsp_plus_search,
    cached_convergence,
    check_regret,
    check_staleness,
    effective_step_time,
    heterogeneity_degree,
    implicit_momentum,
    max_local_steps,
    policy_speeds,
    regret_curve,
    staleness_fit,
)
from app.service.engine import ClusterSpec, StopRule
from app.service.metrics import RunMetrics


def _inputs(speeds, overheads=None, gamma=60.0, delta_c=1.0) -> TheoryInputs:
    overheads = overheads or [0.0] * len(speeds)
    return TheoryInputs(
        gamma=gamma,
        delta_c=tuple([delta_c] * len(speeds)),
        speeds=tuple(speeds),
        overheads=tuple(overheads),
    )


def test_implicit_momentum():
    assert implicit_momentum(_inputs([1.0])) == (1.0, 0.0)
    p, mu = implicit_momentum(_inputs([1.0, 1.0, 1.0], gamma=10.0))
    assert p == pytest.approx(1 / 21)
    assert mu == pytest.approx(20 / 21)
    faster_commits, _ = implicit_momentum(_inputs([1.0, 1.0, 1.0], gamma=10.0, delta_c=2.0))
    assert faster_commits > p


def test_heterogeneity_and_effective_step_time():
    assert heterogeneity_degree([2, 2, 2]) == 1.0
    assert heterogeneity_degree([4, 4, 2, 1]) == 2.75
    assert effective_step_time(1.0, 0.0, 3) == 1.0
    assert effective_step_time(1.0, 4.0, 4) == 2.0


def test_policy_speed_closed_forms():
    assert policy_speeds(_inputs([1.0, 1.0, 1 / 3]), sync.BSP()) == pytest.approx(1 / 3)

    hetero = _inputs([1.0, 2.0, 4.0], overheads=[1.0, 2.0, 0.5])
    assert policy_speeds(hetero, sync.SSP(slack=1)) == pytest.approx(policy_speeds(hetero, sync.BSP()))

    homo = _inputs([2.0, 2.0], overheads=[1.0, 1.0])
    assert policy_speeds(homo, sync.SSP(slack=4)) == pytest.approx(
        policy_speeds(homo, sync.FixedAdaComm(tau=4))
    )
    assert policy_speeds(hetero, sync.ADSP()) == pytest.approx(np.mean([1.0, 2.0, 4.0]))


def test_adsp_local_steps_and_infeasibility():
    taus = adsp_local_steps(_inputs([1.0, 2.0], overheads=[2.0, 2.0], delta_c=3.0))
    assert taus == pytest.approx([18.0, 36.0])
    with pytest.raises(InfeasibleRateError):
        adsp_local_steps(_inputs([1.0], overheads=[30.0], delta_c=2.0))


def test_staleness_fit_on_geometric_samples():
    rng = np.random.default_rng(0)
    samples = rng.geometric(0.3, size=20_000) - 1
    assert staleness_fit(samples, 0.3) < 0.03
    assert staleness_fit(samples, 0.8) > 0.3
    assert staleness_fit([0] * 1000, 1.0) == 0.0
    assert check_staleness(samples, 0.3).passed
    with pytest.raises(InsufficientDataError):
        staleness_fit([0] * 10, 1.0)


def test_regret_curve():
    flat = regret_curve([0.5] * 10, 0.5)
    assert np.all(flat.regret == 0)

    steps = np.arange(1, 200_001)
    curve = regret_curve(0.1 + 1 / np.sqrt(steps), 0.1)
    assert curve.normalized[-1] == pytest.approx(2.0, abs=0.01)
    assert check_regret(0.1 + 1 / np.sqrt(steps), 0.1).passed
    assert not check_regret(0.1 + np.linspace(0, 1, 1000), 0.1).passed


def test_max_local_steps():
    cluster = ClusterSpec(speeds=(1.0, 2.0), overheads=(2.0, 2.0))
    assert max_local_steps(cluster, 60.0, 3) == [18, 36]


def test_adsp_plus_search_picks_fastest_combination():
    cluster = ClusterSpec.homogeneous(2, speed=1.0)
    seen: list[tuple[int, ...]] = []

    def evaluate(taus: tuple[int, ...]) -> float:
        seen.append(taus)
        return 100.0 + abs(taus[0] - 3) + abs(taus[1] - 2)

    result = adsp_plus_search(
        None, cluster, rate=10, tau_max=4, hp=Hyperparams(), stop=StopRule(max_time=60.0), evaluate=evaluate
    )
    assert result.local_steps == (3, 2)
    assert result.convergence_time == 100.0
    assert result.evaluated == 16 == len(seen)

    with pytest.raises(BudgetError):
        adsp_plus_search(
            None,
            cluster,
            rate=10,
            tau_max=4,
            hp=Hyperparams(),
            stop=StopRule(max_time=60.0),
            max_evaluations=10,
            evaluate=evaluate,
        )


def test_adsp_plus_single_worker_prefers_largest_feasible_tau(small_task):
    cluster = ClusterSpec.homogeneous(1, speed=1.0, overhead=2.0)
    result = adsp_plus_search(
        small_task,
        cluster,
        rate=12,
        tau_max=16,
        hp=Hyperparams(local_lr_init=0.05, local_lr_decay=1.0, batch_size=8),
        stop=StopRule(max_time=1200.0, target_gap=0.05),
        cache=RunCache(),
    )
    assert result.local_steps == (3,)
    assert math.isfinite(result.convergence_time)


def test_cached_convergence_reuses_results(tmp_path):
    cache = RunCache(tmp_path / "runs.sqlite")
    calls = []

    def simulate() -> RunMetrics:
        calls.append(1)
        return RunMetrics(policy="adsp", convergence_time=42.0)

    assert cached_convergence(cache, "key", simulate) == 42.0
    assert cached_convergence(cache, "key", simulate) == 42.0
    assert len(calls) == 1
    assert cached_convergence(None, "other", lambda: RunMetrics(policy="bsp")) == math.inf
