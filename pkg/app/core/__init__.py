from . import logger
from .cache import RunCache, get_run_cache
from .config import config

__all__ = ["config", "logger", "get_run_cache", "RunCache"]
