"""Run configuration: schema, validation, file loading and manifests.

Configs are YAML (or JSON) with a ``schema_version`` field. Unknown keys are
rejected so that a typo in a calibration constant fails loudly instead of
silently running with defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

SCHEMA_VERSION = 1

POLICIES = ("cfs", "eevdf", "rr", "lags", "lags-static")
WORKLOAD_KINDS = ("azure", "steady", "random", "trace")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class WorkloadConfig:
    kind: str = "azure"
    density: float = 9.0
    n_functions: Optional[int] = None
    demand_us: int = 380
    service: str = "fixed"  # fixed | mix | parallel
    mix: tuple = ((0.3, 10_000), (0.4, 100_000), (0.3, 1_000_000))
    parallel_workers: int = 2
    concurrency: int = 2
    shared_levels: int = 1
    function_levels: int = 1
    segment_us: int = 5_000_000
    burst_sigma: float = 1.2
    aggregate_util: float = 1.0
    band_profile_path: Optional[str] = None
    trace_path: Optional[str] = None
    latency_target_us: int = 100_000
    warmup_us: int = 5_000_000
    flagged: bool = True

    def validate(self) -> None:
        if self.kind not in WORKLOAD_KINDS:
            raise ConfigError(f"workload.kind: unknown kind {self.kind!r}")
        if self.n_functions is None and self.density < 1:
            raise ConfigError(f"workload.density: must be >= 1, got {self.density}")
        if self.n_functions is not None and self.n_functions < 1:
            raise ConfigError(f"workload.n_functions: must be >= 1, got {self.n_functions}")
        if self.demand_us <= 0:
            raise ConfigError(f"workload.demand_us: must be positive, got {self.demand_us}")
        if self.service not in ("fixed", "mix", "parallel"):
            raise ConfigError(f"workload.service: unknown model {self.service!r}")
        if self.concurrency < 1:
            raise ConfigError(f"workload.concurrency: must be >= 1, got {self.concurrency}")
        if self.shared_levels < 0 or self.function_levels < 1:
            raise ConfigError("workload.shared_levels must be >= 0 and function_levels >= 1")
        if self.kind == "trace" and not self.trace_path:
            raise ConfigError("workload.trace_path: required for trace workloads")
        if not (0.0 < self.aggregate_util <= 4.0):
            raise ConfigError(f"workload.aggregate_util: out of range: {self.aggregate_util}")


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 1
    cores: int = 12
    horizon_us: int = 60_000_000
    tick_us: int = 4000
    policy: str = "cfs"
    rr_quantum_us: int = 100_000
    rr_bandwidth_cap: float = 0.95
    wakeup_granularity_us: int = 4000
    eevdf_base_slice_us: int = 3000
    switch_base_cost_us: int = 2
    switch_per_level_cost_us: int = 3
    load_credit_window_ticks: int = 1000
    balance_interval_us: int = 16_000
    imbalance_threshold: int = 2
    rt_bands: tuple = ()
    latency_target_us: int = 1_000_000
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if self.cores < 1:
            raise ConfigError(f"cores: must be >= 1, got {self.cores}")
        if self.horizon_us <= 0:
            raise ConfigError(f"horizon_us: must be positive, got {self.horizon_us}")
        if self.tick_us <= 0:
            raise ConfigError(f"tick_us: must be positive, got {self.tick_us}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy: unknown policy {self.policy!r}")
        if not (0.0 < self.rr_bandwidth_cap <= 1.0):
            raise ConfigError(f"rr_bandwidth_cap: must be in (0, 1], got {self.rr_bandwidth_cap}")
        if self.rr_quantum_us <= 0:
            raise ConfigError(f"rr_quantum_us: must be positive, got {self.rr_quantum_us}")
        if self.switch_base_cost_us < 0 or self.switch_per_level_cost_us < 0:
            raise ConfigError("switch cost constants must be non-negative")
        if self.load_credit_window_ticks < 0:
            raise ConfigError(f"load_credit_window_ticks: must be >= 0, got {self.load_credit_window_ticks}")
        if self.balance_interval_us <= 0:
            raise ConfigError(f"balance_interval_us: must be positive, got {self.balance_interval_us}")
        if self.imbalance_threshold < 2:
            raise ConfigError(f"imbalance_threshold: must be >= 2, got {self.imbalance_threshold}")
        if any(not (1 <= b <= 10) for b in self.rt_bands):
            raise ConfigError(f"rt_bands: bands must be in 1..10, got {self.rt_bands}")
        self.workload.validate()

    @property
    def n_functions(self) -> int:
        wl = self.workload
        if wl.n_functions is not None:
            return wl.n_functions
        return max(1, round(wl.density * self.cores))

    @property
    def density(self) -> float:
        return self.n_functions / self.cores

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["workload"]["mix"] = [list(p) for p in self.workload.mix]
        d["rt_bands"] = list(self.rt_bands)
        return d


def _coerce(obj, cls, prefix: str):
    """Build a dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(obj).__name__}")
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        if key not in fields:
            raise ConfigError(f"{prefix}{key}: unknown key")
        if key == "workload":
            kwargs[key] = _coerce(value, WorkloadConfig, "workload.")
        elif key == "mix":
            kwargs[key] = tuple((float(p), int(us)) for p, us in value)
        elif key == "rt_bands":
            kwargs[key] = tuple(int(b) for b in value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _coerce(data, RunConfig, "")
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return config_from_dict(data)


def write_manifest(cfg: RunConfig, path: str, extra: Optional[dict] = None) -> None:
    """Persist the fully resolved config (plus run metadata) for reproduction."""
    doc = {"config": cfg.to_dict()}
    if extra:
        doc["run"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str) -> RunConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return config_from_dict(doc["config"])
