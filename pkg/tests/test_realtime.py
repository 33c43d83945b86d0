from __future__ import annotations

import math

import pytest

from app.core.errors import PreconditionError
from app.core.numerics import Hyperparams
from app.service import sync
from app.service.engine import ClusterSpec, StopRule
from app.service.realtime import RealtimeRun

HP = Hyperparams(local_lr_init=0.05, local_lr_decay=1.0, batch_size=8)


@pytest.mark.asyncio
async def test_realtime_tap_stops_at_step_limit(small_task):
    cluster = ClusterSpec.homogeneous(2, speed=10.0, overhead=0.1)
    runtime = RealtimeRun(small_task, cluster, sync.TAP(), HP, StopRule(max_steps=30), time_scale=0.002)
    metrics = await runtime.run()

    assert metrics.mode == "realtime"
    assert metrics.total_steps == 30
    assert sum(ledger.commits for ledger in metrics.ledgers) <= 30
    assert all(math.isfinite(loss) for loss in metrics.losses)


@pytest.mark.asyncio
async def test_realtime_adsp_keeps_workers_training(small_task):
    cluster = ClusterSpec(speeds=(10.0, 20.0), overheads=(0.2, 0.2))
    policy = sync.ADSP(check_period=2.0, fixed_rate=2)
    runtime = RealtimeRun(small_task, cluster, policy, HP, StopRule(max_time=20.0), time_scale=0.005)
    metrics = await runtime.run()

    assert metrics.total_steps > 0
    assert metrics.commit_snapshots
    for ledger in metrics.ledgers:
        assert ledger.blocked_s == 0.0
        assert ledger.comm_s == 0.0
        assert ledger.local_steps > 0
    commits = [ledger.commits for ledger in metrics.ledgers]
    assert max(commits) - min(commits) <= 2


def test_realtime_rejects_simulation_only_modes(small_task):
    cluster = ClusterSpec.homogeneous(2)
    for policy in (
        sync.ADSP(timer_jitter="exponential"),
        sync.ADSP(blocking_commits=True),
        sync.ADSP(local_steps=(1, 2)),
    ):
        with pytest.raises(PreconditionError):
            RealtimeRun(small_task, cluster, policy, HP, StopRule(max_time=1.0))
