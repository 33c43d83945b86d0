"""Policy-level behaviour on the shipped default configuration and on simulated traces."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from app.api import commands
from app.api.schemas import ExperimentConfig, load_config
from app.core.numerics import Hyperparams
from app.service import analysis, sync
from app.service.engine import ClusterSpec, StopRule, run

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.conf"
HP = Hyperparams(local_lr_init=0.05, local_lr_decay=1.0, batch_size=8)


@pytest.fixture
def default_cfg(tmp_path) -> ExperimentConfig:
    return load_config(DEFAULT_CONFIG, out=str(tmp_path))


def _converge(cfg: ExperimentConfig, kind: str | None = None) -> float:
    metrics = commands.execute(cfg, cfg.policy.build(kind))
    assert metrics.convergence_time is not None, f"{kind or cfg.policy.kind} did not converge"
    return metrics.convergence_time


def test_staleness_of_poisson_commits_is_geometric(small_task):
    cluster = ClusterSpec.homogeneous(6, speed=1.0)
    policy = sync.ADSP(check_period=60.0, fixed_rate=60, timer_jitter="exponential")
    metrics = run(small_task, cluster, policy, HP, StopRule(max_steps=10_006), seed=0)

    p, _ = analysis.implicit_momentum(analysis.TheoryInputs.from_cluster(cluster, 60.0, 60))
    assert p == pytest.approx(1 / 6)
    assert len(metrics.staleness_commits) >= 10_000
    assert analysis.check_staleness(metrics.staleness_commits, p).passed


@pytest.mark.slow
def test_regret_grows_sublinearly_on_a_simulated_trace(small_task):
    cluster = ClusterSpec.homogeneous(4, speed=1.0, overhead=0.5)
    hp = HP.model_copy(update={"lr_schedule": "inverse_sqrt"})
    policy = sync.ADSP(check_period=60.0, fixed_rate=20)
    metrics = run(small_task, cluster, policy, hp, StopRule(max_steps=20_000), seed=0)

    assert metrics.total_steps == 20_000
    assert analysis.check_regret(metrics.losses[1:], small_task.optimal_loss).passed


@pytest.mark.slow
def test_policies_converge_in_the_expected_order(default_cfg):
    times = {kind: _converge(default_cfg, kind) for kind in ("adsp", "fixed_adacomm", "ssp", "bsp")}
    assert times["adsp"] < times["fixed_adacomm"] < times["ssp"] < times["bsp"]
    assert times["adsp"] <= 0.9 * times["fixed_adacomm"]


@pytest.mark.slow
def test_commit_rate_sweep_is_u_shaped_and_the_search_lands_near_its_bottom(default_cfg):
    rates = list(range(1, 13))
    times = [_converge(commands.sweep_config(default_cfg, "delta_c", rate)) for rate in rates]
    best = min(times)
    assert 0 < times.index(best) < len(times) - 1
    assert times[0] > best
    assert times[-1] > best

    # one search epoch on the same cluster with no convergence rule
    epoch = default_cfg.with_values(stop={"max_time": default_cfg.policy.epoch_len, "target_gap": None})
    metrics = commands.execute(epoch, epoch.policy.build())
    (decision,) = metrics.scheduler_log
    assert times[decision.rate - 1] <= 1.15 * best


@pytest.mark.slow
def test_adsp_is_robust_to_heterogeneity(default_cfg):
    adsp, fixed = [], []
    for degree in (1.0, 2.0, 3.0):
        point = commands.sweep_config(default_cfg, "heterogeneity", degree)
        assert np.mean(point.cluster.build().speeds) == pytest.approx(3.0)
        adsp.append(_converge(point, "adsp"))
        fixed.append(_converge(point, "fixed_adacomm"))

    assert max(adsp) < 1.2 * min(adsp)
    assert fixed[0] < fixed[1] < fixed[2]
    gaps = [f / a for f, a in zip(fixed, adsp, strict=True)]
    assert gaps[0] < gaps[1] < gaps[2]


@pytest.mark.slow
def test_extra_delay_moves_the_adsp_to_bsp_ratio_in_adsp_favour(default_cfg):
    mean_step = float(np.mean(default_cfg.cluster.build().step_times))
    ratios = []
    for delay in (0.0, mean_step, 5 * mean_step):
        point = commands.sweep_config(default_cfg, "extra_delay", delay)
        ratios.append(_converge(point, "adsp") / _converge(point, "bsp"))
    assert ratios[0] > ratios[1] > ratios[2]


@pytest.mark.slow
def test_adsp_is_near_the_exhaustive_local_step_optimum(default_cfg):
    (check,) = commands._adsp_plus_checks(default_cfg)
    assert check.passed, check.note
    assert check.empirical <= 1.15 * check.theory
