"""Run configuration: built-in defaults, overridden by a TOML or JSON
config file, overridden by CLI flags (that precedence is applied by the
CLI; this module just loads and merges)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .cost import CostModelParams
from .errors import TandemError
from .pipeline import ExecutionSettings

CONSOLIDATION_MODES = ("vote", "judge", "delegate", "acc-at-k")


@dataclass
class RunConfig:
    K: int = 6
    b: int = 100
    B_max: float = 8192.0
    epsilon: float = 2.0
    tau: int = 6
    w_sys: float = 1.0
    w_llm: float = 1.0
    c_cpu: float = 0.001
    c_io: float = 0.1
    c_call: float = 1.0
    alpha: float = 0.001
    page_size: int = 8192
    filter_selectivity: float = 1.0 / 3.0
    k1: int = 5
    k2: int = 5
    parallelism: int = 8
    retries: int = 2
    compile_retries: int = 3
    mode: str = "vote"
    backend: str = "mock"
    seed: int = 0
    optimize: bool = True
    diversify: bool = True
    prune_schema: bool = True
    date_formats: list[str] = field(default_factory=list)
    judge_examples: str | None = None
    # heuristic column-pruning thresholds (query-agnostic preprocessing)
    prune_null_fraction: float = 0.95
    prune_dominance: float = 0.95
    prune_noninformative: float = 0.50

    def __post_init__(self):
        if self.mode not in CONSOLIDATION_MODES:
            raise TandemError(
                f"unknown consolidation mode {self.mode!r}; pick one of {CONSOLIDATION_MODES}"
            )
        if self.K < 1:
            raise TandemError("K must be >= 1")

    def cost_params(self) -> CostModelParams:
        return CostModelParams(
            c_cpu=self.c_cpu,
            c_io=self.c_io,
            c_call=self.c_call,
            alpha=self.alpha,
            w_sys=self.w_sys,
            w_llm=self.w_llm,
            epsilon=self.epsilon,
            tau=self.tau,
            page_size=self.page_size,
            filter_selectivity=self.filter_selectivity,
        )

    def exec_settings(self) -> ExecutionSettings:
        return ExecutionSettings(
            b=self.b, B_max=self.B_max, parallelism=self.parallelism, retries=self.retries
        )


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    raw = p.read_bytes()
    if p.suffix.lower() == ".toml":
        return tomllib.loads(raw.decode("utf-8"))
    if p.suffix.lower() == ".json":
        return json.loads(raw)
    # sniff: TOML rarely starts with '{'
    text = raw.decode("utf-8").lstrip()
    if text.startswith("{"):
        return json.loads(text)
    return tomllib.loads(raw.decode("utf-8"))


def build_config(
    file_path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Defaults < config file < explicit overrides."""
    values: dict[str, Any] = {}
    if file_path is not None:
        loaded = load_config_file(file_path)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise TandemError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig(**values)
