from __future__ import annotations

import pytest

from app.core.errors import InfeasibleRateError, PreconditionError
from app.core.numerics import Hyperparams
from app.service import sync
from app.service.analysis import TheoryInputs, policy_speeds
from app.service.engine import (
    ClusterSpec,
    EventKind,
    EventQueue,
    Simulation,
    StopRule,
    commit_target,
    run,
)

HP = Hyperparams(local_lr_init=0.05, local_lr_decay=1.0, batch_size=8)


def _ledger_total(ledger) -> float:
    return ledger.comp_s + ledger.comm_s + ledger.blocked_s


def test_event_queue_orders_by_time_then_insertion():
    queue = EventQueue()
    queue.push(2.0, EventKind.TIMER_FIRE, worker=0)
    queue.push(1.0, EventKind.STEP_COMPLETE, worker=1)
    queue.push(1.0, EventKind.COMMIT_ARRIVE, worker=2)
    assert queue.peek_time() == 1.0
    assert [queue.pop().worker for _ in range(3)] == [1, 2, 0]
    with pytest.raises(PreconditionError):
        queue.push(float("nan"), EventKind.EVAL_TICK)


def test_commit_target_advances_and_caps():
    assert commit_target(0, 3, [0, 0, 0], [None, None, None]) == 3
    # a lagging target never falls behind max issued + 1
    assert commit_target(2, 1, [3, 4, 5], [None, None, None]) == 6
    assert commit_target(10, 5, [10, 10], [29, 2]) == 12


def test_heterogeneity_preset_matches_degree():
    cluster = ClusterSpec.from_heterogeneity(4, 2.5)
    assert cluster.speeds[0] == 1.0
    assert sum(cluster.speeds) / 4 == pytest.approx(2.5)
    with pytest.raises(ValueError):
        ClusterSpec(speeds=(1.0, 0.0), overheads=(0.0, 0.0))


def test_mean_preserving_heterogeneity_preset():
    for degree in (1.0, 3.0, 6.0):
        cluster = ClusterSpec.from_heterogeneity(6, degree, mean_speed=3.0)
        assert sum(cluster.speeds) / 6 == pytest.approx(3.0)
        assert max(cluster.speeds) / min(cluster.speeds) >= 1.0
        assert cluster.speeds[0] == pytest.approx(3.0 / degree)
    assert ClusterSpec.from_heterogeneity(6, 3.0, mean_speed=3.0).speeds[1:] == pytest.approx((3.4,) * 5)


def test_stop_rule_needs_a_bound():
    with pytest.raises(ValueError):
        StopRule()


def test_single_worker_every_step_policies_coincide(small_task):
    cluster = ClusterSpec.homogeneous(1, speed=2.0, overhead=0.5)
    stop = StopRule(max_time=60.0)
    traces = [run(small_task, cluster, policy, HP, stop, seed=3) for policy in (sync.BSP(), sync.TAP(), sync.SSP())]
    assert traces[0].losses == traces[1].losses == traces[2].losses
    assert traces[0].times == traces[1].times == traces[2].times


def test_same_seed_gives_identical_metrics(small_task):
    cluster = ClusterSpec(speeds=(1.0, 2.0, 3.0), overheads=(1.0, 1.0, 1.0))
    policy = sync.ADSP(fixed_rate=2)
    stop = StopRule(max_time=300.0)
    first = run(small_task, cluster, policy, HP, stop, seed=11)
    second = run(small_task, cluster, policy, HP, stop, seed=11)
    assert first.model_dump() == second.model_dump()


def test_bsp_matches_fixed_adacomm_with_one_local_step(small_task):
    cluster = ClusterSpec.homogeneous(3, speed=1.0, overhead=0.0)
    stop = StopRule(max_time=120.0)
    bsp = run(small_task, cluster, sync.BSP(), HP, stop, seed=5)
    fixed = run(small_task, cluster, sync.FixedAdaComm(tau=1), HP, stop, seed=5)
    assert bsp.losses == fixed.losses
    assert bsp.total_steps == fixed.total_steps


def test_bsp_fast_workers_wait_on_the_slow_one(small_task):
    cluster = ClusterSpec(speeds=(1.0, 1.0, 1.0 / 3.0), overheads=(0.5, 0.5, 0.5))
    metrics = run(small_task, cluster, sync.BSP(), HP, StopRule(max_time=350.0), seed=0)
    fast, _, slow = metrics.ledgers
    # rounds of 3.5 s: fast workers train 1 s, spend 0.5 s in transit and 2 s blocked
    assert fast.blocked_s == pytest.approx(200.0, rel=0.02)
    assert slow.blocked_s == pytest.approx(0.0, abs=1e-6)
    assert all(led.comm_s + led.blocked_s > 0 for led in metrics.ledgers)
    for ledger in metrics.ledgers:
        assert _ledger_total(ledger) == pytest.approx(metrics.elapsed)


def test_adsp_workers_never_block_and_commit_counts_stay_balanced(small_task):
    cluster = ClusterSpec(speeds=(1.0, 2.0, 4.0), overheads=(1.0, 1.0, 1.0))
    metrics = run(small_task, cluster, sync.ADSP(fixed_rate=3), HP, StopRule(max_time=600.0), seed=2)
    for ledger in metrics.ledgers:
        assert ledger.blocked_s == 0.0
        assert ledger.comp_s == pytest.approx(metrics.elapsed)
    assert metrics.max_commit_gap() <= 1
    commits = [ledger.commits for ledger in metrics.ledgers]
    assert max(commits) - min(commits) <= 1
    assert metrics.losses[-1] < metrics.losses[0]


def test_blocking_adsp_throughput_matches_closed_form(small_task):
    cluster = ClusterSpec(speeds=(1.0, 2.0), overheads=(2.0, 2.0))
    policy = sync.ADSP(fixed_rate=3, blocking_commits=True)
    metrics = run(small_task, cluster, policy, HP, StopRule(max_time=600.0), seed=0)
    expected = policy_speeds(TheoryInputs.from_cluster(cluster, 60.0, 3), policy)
    assert expected == pytest.approx(1.35)
    assert metrics.measured_speed() == pytest.approx(expected, rel=0.02)
    for ledger in metrics.ledgers:
        assert ledger.comm_s > 0
        assert _ledger_total(ledger) == pytest.approx(metrics.elapsed)


def test_infeasible_overhead_is_rejected(small_task):
    cluster = ClusterSpec.homogeneous(2, overhead=60.0)
    with pytest.raises(InfeasibleRateError):
        Simulation(small_task, cluster, sync.ADSP(), HP, StopRule(max_time=60.0))


def test_max_steps_stops_the_run(small_task):
    cluster = ClusterSpec.homogeneous(2)
    metrics = run(small_task, cluster, sync.TAP(), HP, StopRule(max_steps=25))
    assert metrics.total_steps == 25


def test_target_gap_marks_convergence(small_task):
    cluster = ClusterSpec.homogeneous(2, speed=4.0)
    stop = StopRule(max_time=3600.0, target_gap=0.5)
    metrics = run(small_task, cluster, sync.TAP(), HP, stop)
    assert metrics.convergence_time is not None
    assert metrics.final_loss <= small_task.optimal_loss + 0.5


def test_own_reply_wait_counts_as_communication(small_task):
    cluster = ClusterSpec(speeds=(1.0, 3.0, 7.0), overheads=(0.3, 0.7, 0.1))
    for policy in (sync.TAP(), sync.SSP(slack=10_000)):
        metrics = run(small_task, cluster, policy, HP, StopRule(max_time=500.0), seed=4)
        for ledger in metrics.ledgers:
            assert ledger.blocked_s == 0.0
            assert ledger.comm_s > 0
            assert _ledger_total(ledger) == pytest.approx(metrics.elapsed)


@pytest.mark.parametrize(
    "policy",
    [sync.TAP(), sync.BSP(), sync.SSP(slack=2), sync.FixedAdaComm(tau=3), sync.ADSP(fixed_rate=4)],
    ids=lambda p: p.kind,
)
def test_ledger_commits_sum_to_ps_steps(small_task, policy):
    cluster = ClusterSpec(speeds=(1.0, 2.0, 5.0), overheads=(1.0, 0.6, 0.2))
    metrics = run(small_task, cluster, policy, HP, StopRule(max_time=437.0), seed=6)
    assert sum(ledger.commits for ledger in metrics.ledgers) == metrics.total_steps


def test_online_search_drives_a_live_simulation(small_task):
    cluster = ClusterSpec(speeds=(1.0, 2.0, 4.0), overheads=(1.0, 1.0, 1.0))
    metrics = run(small_task, cluster, sync.ADSP(epoch_len=300.0), HP, StopRule(max_time=600.0), seed=1)

    assert metrics.scheduler_log
    for decision in metrics.scheduler_log:
        start = decision.c_start
        assert decision.candidates == list(range(start, start + len(decision.candidates)))
        assert decision.chosen in decision.candidates
        assert decision.rate == decision.chosen - start + 1
        assert len(decision.comparisons) == len(decision.candidates) - 1
    # training never pauses while candidates are evaluated
    steps = [sample.local_steps for sample in metrics.progress]
    assert all(later > earlier for earlier, later in zip(steps, steps[1:], strict=False))
    for k in range(10):
        assert any(60.0 * k <= t < 60.0 * (k + 1) for t in metrics.times[1:])
    assert all(ledger.blocked_s == 0.0 for ledger in metrics.ledgers)
