from __future__ import annotations

import numpy as np
import pytest

from app.core.errors import DimensionMismatchError, IndexOutOfShardError, UnderdeterminedTaskError
from app.api.schemas import TaskSection
from app.service.workloads import (
    BatchSampler,
    MiniBatch,
    TaskDocument,
    TrainingTask,
    make_logistic,
    make_quadratic,
    make_task,
    quadratic_from_data,
)


def test_quadratic_optimum_has_zero_gradient(small_task):
    np.testing.assert_allclose(small_task.full_gradient(small_task.optimum), 0.0, atol=1e-9)
    assert small_task.global_loss(small_task.optimum) == pytest.approx(small_task.optimal_loss)
    assert small_task.global_loss(small_task.initial_params()) > small_task.optimal_loss


def test_quadratic_from_data_matches_hand_computed_loss():
    task = quadratic_from_data([[1.0], [1.0]], [0.0, 2.0])
    assert task.optimum.tolist() == pytest.approx([1.0])
    assert task.optimal_loss == pytest.approx(0.5)
    assert task.global_loss(np.array([0.0])) == pytest.approx(1.0)


def test_underdetermined_task_rejected():
    with pytest.raises(UnderdeterminedTaskError):
        make_quadratic(dim=5, n_examples=3, condition=2.0, seed=0)


def test_shards_are_disjoint_and_cover_the_data(small_task):
    for skew in (0.0, 0.5):
        shards = small_task.shards(3, skew=skew)
        joined = np.concatenate(shards)
        assert sorted(joined.tolist()) == list(range(small_task.n_examples))


def test_minibatch_gradient_of_full_batch_equals_full_gradient(small_task):
    w = np.ones(small_task.dim)
    full = MiniBatch(np.arange(small_task.n_examples, dtype=np.int64))
    np.testing.assert_allclose(small_task.minibatch_gradient(w, full), small_task.full_gradient(w))
    with pytest.raises(IndexOutOfShardError):
        small_task.minibatch_gradient(w, MiniBatch(np.array([small_task.n_examples])))
    with pytest.raises(DimensionMismatchError):
        small_task.global_loss(np.ones(small_task.dim + 1))


def test_batch_sampler_stays_inside_its_shard():
    shard = np.arange(10, 20, dtype=np.int64)
    sampler = BatchSampler(shard, batch_size=4, rng=np.random.default_rng(0))
    seen = [sampler.next().indices for _ in range(6)]
    assert all(b.size == 4 for b in seen)
    assert set(np.concatenate(seen).tolist()) <= set(shard.tolist())


def test_logistic_optimum_and_document_round_trip():
    task = make_logistic(dim=3, n_examples=40, seed=1, l2=0.1)
    assert np.linalg.norm(task.full_gradient(task.optimum)) < 1e-8

    restored = TrainingTask.from_document(TaskDocument.loads(task.to_document().dumps()))
    assert restored.kind == "logistic"
    assert restored.global_loss(task.optimum) == pytest.approx(task.optimal_loss)


@pytest.fixture(params=["quadratic", "logistic"])
def task(request) -> TrainingTask:
    return make_task(request.param, dim=10, n_examples=1000, seed=7, condition=10.0, l2=1e-2)


def test_optimum_is_stationary(task):
    assert np.linalg.norm(task.full_gradient(task.optimum)) < 1e-9


def test_full_gradient_matches_finite_differences(task):
    w = task.optimum + np.random.default_rng(0).standard_normal(task.dim)
    h = 1e-6
    numeric = np.array(
        [(task.global_loss(w + h * e) - task.global_loss(w - h * e)) / (2 * h) for e in np.eye(task.dim)]
    )
    exact = task.full_gradient(w)
    assert np.linalg.norm(numeric - exact) <= 1e-6 * np.linalg.norm(exact)


def test_single_example_gradients_average_to_the_full_gradient(task):
    w = np.random.default_rng(1).standard_normal(task.dim)
    singles = [task.minibatch_gradient(w, MiniBatch(np.array([i], dtype=np.int64))) for i in range(task.n_examples)]
    np.testing.assert_allclose(np.mean(singles, axis=0), task.full_gradient(w), rtol=1e-9, atol=1e-12)


def test_no_point_beats_the_optimum(task):
    rng = np.random.default_rng(2)
    for scale in (1e-3, 1e-2, 1e-1, 1.0, 10.0):
        for _ in range(40):
            w = task.optimum + scale * rng.standard_normal(task.dim)
            assert task.global_loss(w) >= task.optimal_loss


def test_loss_is_convex_along_segments(task):
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, y = task.optimum + rng.standard_normal((2, task.dim))
        lam = rng.uniform()
        mixed = task.global_loss(lam * x + (1 - lam) * y)
        chord = lam * task.global_loss(x) + (1 - lam) * task.global_loss(y)
        assert mixed <= chord + 1e-12 * max(1.0, abs(chord))


def test_quadratic_loss_never_dips_below_optimum_at_rounding_scale():
    task = make_quadratic(dim=10, n_examples=1000, condition=10.0, seed=7)
    assert task.global_loss(task.optimum) == task.optimal_loss
    rng = np.random.default_rng(4)
    for _ in range(200):
        assert task.global_loss(task.optimum + 1e-9 * rng.standard_normal(task.dim)) >= task.optimal_loss


def test_configured_skew_reaches_the_shards():
    task = TaskSection(dim=4, examples=64, skew=0.5).build()
    sizes = [s.size for s in task.shards(3)]
    assert sizes[0] < sizes[1] < sizes[2]
    assert sum(sizes) == 64
    assert [s.size for s in task.shards(3, skew=0.0)] == [22, 21, 21]
