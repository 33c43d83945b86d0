from __future__ import annotations

import pytest

from app.core import config, get_run_cache
from app.service.workloads import TrainingTask, make_quadratic


@pytest.fixture(autouse=True)
def isolated_run_cache(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "run_cache_db", str(tmp_path / "run-cache.sqlite3"))
    get_run_cache.cache_clear()
    yield
    get_run_cache.cache_clear()


@pytest.fixture
def small_task() -> TrainingTask:
    return make_quadratic(dim=4, n_examples=64, condition=4.0, seed=7)
