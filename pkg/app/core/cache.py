from __future__ import annotations

import functools
import os
import pickle
import sqlite3
import threading
import time
from pathlib import Path
from typing import Any

from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.core import logger
from app.core.config import config

log = logger.get("core.cache")

_RETRY_KWARGS = dict(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.05, min=0.05, max=1),
    retry=retry_if_exception_type(sqlite3.OperationalError),
    reraise=True,
)


def _retryer() -> Retrying:
    return Retrying(**_RETRY_KWARGS)


def _resolve_db_path(db_path: str | Path | None) -> Path:
    if db_path is not None:
        return Path(db_path)
    if config.run_cache_db:
        return Path(config.run_cache_db)
    return Path(os.getenv("TMPDIR", "/tmp")) / "adsp-run-cache.sqlite3"


class RunCache:
    """Process-safe cache of finished run results, keyed by configuration hash.

    Values are pickled before storage to preserve types (pydantic run summaries).
    Sweep processes and offline searches share one database file, so a configuration
    simulated once is never simulated again while its entry is fresh.
    """

    def __init__(self, db_path: str | Path | None = None, ttl_seconds: int | None = None) -> None:
        self._path = _resolve_db_path(db_path)
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._ttl = config.run_cache_ttl_seconds if ttl_seconds is None else ttl_seconds
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(
            str(self._path),
            timeout=10,
            check_same_thread=False,
            isolation_level=None,  # autocommit mode
        )
        self._execute("PRAGMA journal_mode=WAL")
        self._execute("PRAGMA synchronous=NORMAL")
        self._execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                key TEXT PRIMARY KEY,
                value BLOB NOT NULL,
                expires_at REAL NOT NULL
            )
            """
        )

    def _execute(self, sql: str, params: tuple = ()) -> sqlite3.Cursor:
        # concurrent sweep workers may hold the write lock briefly
        for attempt in _retryer():
            with attempt, self._lock:
                return self._conn.execute(sql, params)
        raise AssertionError("unreachable")  # pragma: no cover

    def get(self, key: str) -> Any | None:
        now = time.time()
        row = self._execute("SELECT value, expires_at FROM runs WHERE key = ?", (key,)).fetchone()
        if not row:
            return None
        value_blob, expires_at = row
        if now >= expires_at:
            self.delete(key)
            return None
        try:
            value = pickle.loads(value_blob)
        except Exception as exc:  # pragma: no cover - stale schema after an upgrade
            log.exception("Failed to unpickle cached run for key=%s: %s", key, exc)
            self.delete(key)
            return None
        log.debug("Run cache hit for key=%s", key)
        return value

    def set(self, key: str, value: Any, ttl_seconds: int | None = None) -> None:
        ttl = self._ttl if ttl_seconds is None else ttl_seconds
        if ttl <= 0:
            self.delete(key)
            return
        expires_at = time.time() + ttl
        blob = pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)
        self._execute(
            """
            INSERT INTO runs(key, value, expires_at)
            VALUES(?, ?, ?)
            ON CONFLICT(key) DO UPDATE SET
                value=excluded.value,
                expires_at=excluded.expires_at
            """,
            (key, sqlite3.Binary(blob), expires_at),
        )

    def delete(self, key: str) -> None:
        self._execute("DELETE FROM runs WHERE key = ?", (key,))

    def purge_expired(self) -> int:
        cur = self._execute("DELETE FROM runs WHERE expires_at <= ?", (time.time(),))
        removed = cur.rowcount or 0
        if removed:
            log.debug("Purged %d expired run entries", removed)
        return removed

    def clear(self) -> None:
        self._execute("DELETE FROM runs")

    def close(self) -> None:
        with self._lock:
            self._conn.close()


@functools.cache
def get_run_cache() -> RunCache:
    return RunCache()


__all__ = ["RunCache", "get_run_cache"]
