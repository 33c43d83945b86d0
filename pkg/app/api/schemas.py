"""Experiment configuration: a flat ``section.key = value`` text file parsed into strict models.

    # comments start with '#'
    task.kind = quadratic
    cluster.workers = 6
    cluster.heterogeneity = 3
    cluster.overhead = 2
    policy.kind = adsp
    stop.max_time = 3600

Lists are comma separated; ``none``, ``true`` and ``false`` are literals. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    TypeAdapter,
    ValidationError,
    field_validator,
    model_validator,
)

from app.core.config import config
from app.core.errors import ConfigError
from app.core.numerics import Hyperparams
from app.service import sync
from app.service.engine import ClusterSpec, StopRule
from app.service.workloads import TaskDocument, TrainingTask, make_task

_POLICY_MODELS: dict[str, type[BaseModel]] = {
    "bsp": sync.BSP,
    "ssp": sync.SSP,
    "tap": sync.TAP,
    "fixed_adacomm": sync.FixedAdaComm,
    "adacomm": sync.AdaComm,
    "adsp": sync.ADSP,
}
_POLICY_ADAPTER: TypeAdapter[sync.SyncPolicy] = TypeAdapter(sync.SyncPolicy)


def _as_list(value: Any) -> Any:
    return [value] if isinstance(value, int | float) and not isinstance(value, bool) else value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TaskSection(_Section):
    kind: Literal["quadratic", "logistic"] = "quadratic"
    dim: int = Field(default=10, ge=1)
    examples: int = Field(default=1000, ge=1)
    seed: int = 0
    condition: float = Field(default=10.0, ge=1)
    l2: float = Field(default=1e-2, gt=0)
    # shard sizes grow by (1 + skew) from one worker to the next
    skew: float = Field(default=0.0, ge=0)
    # exported task JSON; overrides the generator fields when set
    file: str | None = None

    def build(self) -> TrainingTask:
        if self.file is not None:
            task = TrainingTask.from_document(TaskDocument.loads(Path(self.file).read_text()))
        else:
            task = make_task(self.kind, self.dim, self.examples, self.seed, self.condition, self.l2)
        return dataclasses.replace(task, skew=self.skew) if self.skew else task


class ClusterSection(_Section):
    workers: int | None = Field(default=None, ge=1)
    speeds: list[float] | None = None
    heterogeneity: float | None = Field(default=None, ge=1)
    # with heterogeneity: hold the mean speed fixed instead of the slowest worker at 1
    mean_speed: float | None = Field(default=None, gt=0)
    overhead: float | list[float] = 0.0
    extra_delay: float = Field(default=0.0, ge=0)

    @field_validator("speeds", mode="before")
    @classmethod
    def _listify_speeds(cls, value: Any) -> Any:
        return _as_list(value)

    @model_validator(mode="after")
    def _one_speed_source(self) -> ClusterSection:
        if self.speeds is None and self.heterogeneity is None:
            raise ValueError("cluster.speeds: give per-worker speeds or cluster.heterogeneity")
        if self.speeds is not None and self.heterogeneity is not None:
            raise ValueError("cluster.speeds and cluster.heterogeneity are mutually exclusive")
        if self.mean_speed is not None and self.heterogeneity is None:
            raise ValueError("cluster.mean_speed needs cluster.heterogeneity")
        if self.heterogeneity is not None and self.workers is None:
            raise ValueError("cluster.workers is required with cluster.heterogeneity")
        if self.speeds is not None and self.workers not in (None, len(self.speeds)):
            raise ValueError(f"cluster.workers={self.workers} but {len(self.speeds)} speeds given")
        return self

    @property
    def n_workers(self) -> int:
        return len(self.speeds) if self.speeds is not None else self.workers

    def build(self) -> ClusterSpec:
        n = self.n_workers
        if isinstance(self.overhead, list):
            if len(self.overhead) != n:
                raise ConfigError(f"expected {n} values, got {len(self.overhead)}", "cluster.overhead")
            overheads = tuple(self.overhead)
        else:
            overheads = (self.overhead,) * n
        if self.speeds is not None:
            speeds = tuple(self.speeds)
        else:
            speeds = ClusterSpec.from_heterogeneity(n, self.heterogeneity, mean_speed=self.mean_speed).speeds
        return ClusterSpec(speeds=speeds, overheads=overheads, extra_delay=self.extra_delay)


class PolicySection(_Section):
    """Parameters for every policy kind; only those the selected kind declares are used."""

    kind: Literal["bsp", "ssp", "tap", "fixed_adacomm", "adacomm", "adsp"] = "adsp"
    slack: int | None = None
    tau: int | None = None
    tau0: int | None = None
    check_interval: float | None = None
    multiplier: float | None = None
    check_period: float | None = None
    epoch_len: float | None = None
    eval_window: float | None = None
    fixed_rate: int | None = None
    blocking_commits: bool | None = None
    timer_jitter: Literal["none", "exponential"] | None = None
    local_steps: list[int] | None = None

    @field_validator("local_steps", mode="before")
    @classmethod
    def _listify_steps(cls, value: Any) -> Any:
        return _as_list(value)

    def build(self, kind: str | None = None) -> sync.SyncPolicy:
        kind = kind or self.kind
        fields = _POLICY_MODELS[kind].model_fields
        params: dict[str, Any] = {
            key: value
            for key, value in self.model_dump(exclude={"kind"}, exclude_none=True).items()
            if key in fields
        }
        if "local_steps" in params:
            params["local_steps"] = tuple(params["local_steps"])
        return _POLICY_ADAPTER.validate_python({"kind": kind, **params})


class OutputSection(_Section):
    dir: str | None = None
    format: Literal["csv", "json"] = "csv"

    @property
    def path(self) -> Path:
        return Path(self.dir or config.output_dir)


class VerifySection(_Section):
    # overrides the theoretical p of the staleness check
    staleness_p: float | None = Field(default=None, gt=0, le=1)
    staleness_commits: int = Field(default=10_000, ge=1000)
    staleness_tolerance: float = Field(default=0.1, gt=0)
    throughput_clusters: int = Field(default=5, ge=1)
    throughput_time: float = Field(default=1800.0, gt=0)
    throughput_tolerance: float = Field(default=0.02, gt=0)
    regret_steps: int = Field(default=100_000, ge=10)
    regret_seeds: int = Field(default=3, ge=1)
    regret_tolerance: float = Field(default=0.05, gt=0)
    momentum_rates: list[int] = Field(default_factory=lambda: [1, 2, 4])
    momentum_time: float = Field(default=1200.0, gt=0)
    # ADSP against the exhaustive local-step search on a small cluster
    plus_speeds: list[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0 / 3.0])
    plus_overhead: float = Field(default=1.0, ge=0)
    plus_rate: int = Field(default=6, ge=1)
    plus_tau_max: int = Field(default=16, ge=1)
    plus_time: float = Field(default=3600.0, gt=0)
    plus_target_gap: float = Field(default=1e-3, gt=0)
    plus_tolerance: float = Field(default=0.15, gt=0)

    @field_validator("momentum_rates", "plus_speeds", mode="before")
    @classmethod
    def _listify_rates(cls, value: Any) -> Any:
        return _as_list(value)


class ExperimentConfig(_Section):
    seed: int = 0
    task: TaskSection = TaskSection()
    cluster: ClusterSection
    policy: PolicySection = PolicySection()
    hyper: Hyperparams = Hyperparams()
    stop: StopRule = StopRule(max_time=3600.0)
    output: OutputSection = OutputSection()
    verify: VerifySection = VerifySection()

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def with_values(self, **sections: Any) -> ExperimentConfig:
        """Copy with some section fields replaced, re-validated."""
        data = self.model_dump()
        for section, values in sections.items():
            if isinstance(data.get(section), dict):
                data[section] = {**data[section], **values}
            else:
                data[section] = values
        return ExperimentConfig.model_validate(data)


def parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    lowered = text.lower()
    if lowered in {"none", "null"}:
        return None
    if lowered in {"true", "false"}:
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        *sections, leaf = key.split(".")
        node = tree
        for section in sections:
            node = node.setdefault(section, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: '{section}' is both a value and a section", key)
        if leaf in node:
            raise ConfigError(f"line {lineno}: duplicate key", key)
        node[leaf] = parse_value(value)
    return tree


def describe_validation_error(exc: ValidationError) -> tuple[str, str]:
    """First failing field as a dotted path, and a one-line summary of every failure."""
    errors = exc.errors()
    fields = [".".join(str(p) for p in err["loc"]) for err in errors]
    summary = "; ".join(f"{f or '<root>'}: {err['msg']}" for f, err in zip(fields, errors, strict=True))
    return fields[0] if fields else "", summary


def validate_config(tree: dict[str, Any]) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(tree)
        # build once so cross-section preconditions surface before any run starts
        cfg.cluster.build()
        cfg.policy.build()
    except ValidationError as exc:
        field, summary = describe_validation_error(exc)
        raise ConfigError(summary, field or None) from exc
    except ValueError as exc:
        raise ConfigError(str(exc), "cluster") from exc
    return cfg


def load_config(path: str | Path, *, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    tree = parse_config_text(text)
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree.setdefault("output", {})["dir"] = out
    return validate_config(tree)


__all__ = [
    "ClusterSection",
    "ExperimentConfig",
    "OutputSection",
    "PolicySection",
    "TaskSection",
    "VerifySection",
    "load_config",
    "parse_config_text",
    "parse_value",
    "validate_config",
]
