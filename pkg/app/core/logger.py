"""
Unified logging configuration: logs go to stderr so stdout stays free for summaries and tables.

Usage:
    from app.core import logger
    log = logger.get("engine")
    log.info("message")

Config:
    LOG_LEVEL environment variable controls verbosity (DEBUG, INFO, WARNING, ERROR, CRITICAL).
    The CLI's --log-level flag takes precedence over it.
"""

from __future__ import annotations

import logging
import os
import sys

# Internal flag to avoid duplicate configuration
_configured = False

# Human-readable formats
LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
CONSOLE_HANDLER = "adsp-console"


def _determine_level(level: int | str | None = None) -> int:
    """Resolve a numeric log level from an int/str/None value.

    Order of precedence:
    - explicit level argument
    - LOG_LEVEL environment variable
    - WARNING (default; simulations are chatty at INFO)
    """
    if isinstance(level, int):
        return level
    level_name = level.upper() if isinstance(level, str) else os.getenv("LOG_LEVEL", "WARNING").upper()
    return getattr(logging, level_name, logging.WARNING)


def setup(level: int | str | None = None, *, force: bool = False) -> None:
    """Configure the root logger with a stderr handler.

    Idempotent; pass ``force=True`` to re-apply a new level (used by the CLI).
    """
    global _configured
    if _configured and not force:
        return

    root = logging.getLogger()
    numeric_level = _determine_level(level)
    root.setLevel(numeric_level)

    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)

    console = next((h for h in root.handlers if getattr(h, "name", None) == CONSOLE_HANDLER), None)
    if console is None:
        console = logging.StreamHandler(stream=sys.stderr)
        console.set_name(CONSOLE_HANDLER)
        console.setFormatter(formatter)
        root.addHandler(console)
    console.setLevel(numeric_level)

    _configured = True


def get(name: str | None = None) -> logging.Logger:
    """Get a logger under the ``adsp`` namespace.

    Example:
        log = get("scheduler")
        log.info("epoch %d decided C_target=%d", 3, 41)
    """
    setup()
    return logging.getLogger(f"adsp.{name}") if name else logging.getLogger("adsp")
