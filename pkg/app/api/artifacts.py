"""Run artifacts on disk: metrics JSON plus loss-trace and ledger CSVs, written atomically.

Floats are written with ``repr`` so reading a CSV back reproduces the in-memory values exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

from app.core import logger
from app.service.metrics import RunMetrics, WorkerLedger

log = logger.get("api.artifacts")

LOSS_COLUMNS = ("time", "loss", "policy", "run_id")
LEDGER_COLUMNS = ("worker", "comp_s", "comm_s", "blocked_s", "commits")
SWEEP_COLUMNS = ("param", "value", "convergence_time", "final_loss", "waiting_fraction")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def render_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue()


def run_id_for(policy: str, config_hash: str, seed: int, mode: str = "simulation") -> str:
    """``<policy>-<hash>-s<seed>``; realtime runs carry an ``-rt`` suffix so they never share a directory."""
    suffix = "-rt" if mode == "realtime" else ""
    return f"{policy}-{config_hash}-s{seed}{suffix}"


def write_run_artifacts(metrics: RunMetrics, out_dir: Path, config_hash: str) -> Path:
    """Write ``<out_dir>/<run_id>/{metrics.json,loss.csv,ledger.csv}`` and return the run directory."""
    run_dir = out_dir / metrics.run_id
    document = {"config_hash": config_hash, **metrics.model_dump(mode="json")}
    atomic_write(run_dir / "metrics.json", json.dumps(document, indent=2, sort_keys=True) + "\n")
    atomic_write(
        run_dir / "loss.csv",
        render_csv(
            LOSS_COLUMNS,
            ((t, loss, metrics.policy, metrics.run_id) for t, loss in zip(metrics.times, metrics.losses, strict=True)),
        ),
    )
    atomic_write(
        run_dir / "ledger.csv",
        render_csv(
            LEDGER_COLUMNS,
            ((led.worker, led.comp_s, led.comm_s, led.blocked_s, led.commits) for led in metrics.ledgers),
        ),
    )
    log.info("artifacts written to %s", run_dir)
    return run_dir


def read_loss_trace(path: Path) -> tuple[list[float], list[float]]:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["time"]) for r in rows], [float(r["loss"]) for r in rows]


def read_ledger(path: Path) -> list[WorkerLedger]:
    with path.open(newline="") as fh:
        return [
            WorkerLedger(
                worker=int(r["worker"]),
                comp_s=float(r["comp_s"]),
                comm_s=float(r["comm_s"]),
                blocked_s=float(r["blocked_s"]),
                commits=int(r["commits"]),
            )
            for r in csv.DictReader(fh)
        ]


def read_metrics(path: Path) -> RunMetrics:
    document = json.loads(path.read_text())
    document.pop("config_hash", None)
    return RunMetrics.model_validate(document)


__all__ = [
    "LEDGER_COLUMNS",
    "LOSS_COLUMNS",
    "SWEEP_COLUMNS",
    "atomic_write",
    "read_ledger",
    "read_loss_trace",
    "read_metrics",
    "render_csv",
    "run_id_for",
    "write_run_artifacts",
]
