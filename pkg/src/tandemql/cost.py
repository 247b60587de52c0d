"""Cardinality estimation and the hybrid cost model.

Plan cost is the weighted sum, over operators, of a relational term
(tuples * cpu unit + pages * io unit) and an inference term
(input rows * (per-call cost + per-token cost * expected row tokens)).
Relational operators carry no inference term.
"""

from __future__ import annotations

import math
import random
import statistics
import time
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

from .errors import CalibrationError, CostModelError
from .plan import OperatorTag, PlanDag, topo_schedule
from .relation import AttributeKind, Relation, estimate_row_bytes, estimate_row_tokens

DEFAULT_ROW_BYTES = 64.0


@dataclass
class CostModelParams:
    c_cpu: float = 0.001
    c_io: float = 0.1
    c_call: float = 1.0
    alpha: float = 0.001
    w_sys: float = 1.0
    w_llm: float = 1.0
    epsilon: float = 2.0
    tau: int = 6
    page_size: int = 8192
    filter_selectivity: float = 1.0 / 3.0  # non-equality and semantic filters

    def __post_init__(self):
        if self.epsilon < 1:
            raise CostModelError("epsilon must be >= 1")
        if self.tau < 2:
            raise CostModelError("tau must be >= 2")
        for name in ("c_cpu", "c_io", "c_call", "alpha", "w_sys", "w_llm"):
            if getattr(self, name) < 0:
                raise CostModelError(f"{name} must be nonnegative")
        if self.page_size <= 0:
            raise CostModelError("page_size must be positive")


class EstimateBasis(Enum):
    EXACT = "exact"
    FORMULA = "formula"


@dataclass
class CardinalityEstimate:
    gamma_in: int
    gamma_out: int
    basis: EstimateBasis
    input_bytes: float = 0.0
    expected_tokens: float = 0.0  # per input row; nonzero only for semantic steps

    def __post_init__(self):
        if self.gamma_out < 0 or self.gamma_in < 0:
            raise CostModelError("cardinalities must be nonnegative")


# -- the formulas --------------------------------------------------------


def estimate_join_card(size_a: int, size_b: int, distinct_a: int, distinct_b: int) -> int:
    """Join output cardinality: |A| * |B| / max(key distincts), floored."""
    if size_a == 0 or size_b == 0:
        return 0
    denom = max(distinct_a, distinct_b)
    if denom <= 0:
        raise CostModelError("degenerate statistics: no distinct key values for join inputs")
    return (size_a * size_b) // denom


def estimate_union_card(size_a: int, size_b: int) -> int:
    return size_a + size_b


def sys_cost(gamma_in: int, pages: int, p: CostModelParams) -> float:
    return gamma_in * p.c_cpu + pages * p.c_io


def llm_cost(gamma_in: int, expected_tokens: float, p: CostModelParams) -> float:
    return gamma_in * (p.c_call + p.alpha * expected_tokens)


def pages_for(total_bytes: float, page_size: int) -> int:
    return math.ceil(total_bytes / page_size) if total_bytes > 0 else 0


def step_cost(op: OperatorTag, est: CardinalityEstimate, p: CostModelParams) -> float:
    """Semantic operators are priced by inference, relational ones by
    cpu/io; each operator contributes the term of its engine."""
    if op.is_semantic:
        return p.w_llm * llm_cost(est.gamma_in, est.expected_tokens, p)
    pages = pages_for(est.input_bytes, p.page_size)
    return p.w_sys * sys_cost(est.gamma_in, pages, p)


def plan_cost(
    dag: PlanDag, stats: Mapping[str, CardinalityEstimate], p: CostModelParams
) -> float:
    """Sum of weighted per-operator costs; every step needs an estimate."""
    total = 0.0
    for step in dag.steps:
        est = stats.get(step.id)
        if est is None:
            raise CostModelError(f"no cardinality estimate for step {step.id!r}")
        total += step_cost(step.op, est, p)
    return total


# -- catalog and plan-wide estimation --------------------------------------


@dataclass
class TableStats:
    size: int
    row_bytes: float = DEFAULT_ROW_BYTES
    row_tokens: float = 1.3
    distincts: dict[str, int] = field(default_factory=dict)
    columns: tuple[str, ...] = ()


class Catalog:
    """Base-relation statistics backing cardinality propagation."""

    def __init__(self, tables: dict[str, TableStats] | None = None):
        self.tables = tables or {}

    @classmethod
    def from_relations(cls, relations: Mapping[str, Relation]) -> "Catalog":
        tables = {}
        for name, rel in relations.items():
            distincts = {
                c.name: rel.columns[i].profile.distinct_count
                for i, c in enumerate(rel.columns)
            }
            tables[name] = TableStats(
                size=len(rel.rows),
                row_bytes=estimate_row_bytes(rel),
                row_tokens=estimate_row_tokens(rel),
                distincts=distincts,
                columns=rel.column_names,
            )
        return cls(tables)

    def table(self, name: str) -> TableStats:
        if name not in self.tables:
            raise CostModelError(f"no statistics for relation {name!r}")
        return self.tables[name]


@dataclass
class StepState:
    """Propagated per-step statistics: estimated output size, widths, and
    surviving per-column distinct counts."""

    rows: int
    row_bytes: float
    row_tokens: float
    distincts: dict[str, int]
    width: int = 1  # column count


_State = StepState


def estimate_plan_detailed(
    dag: PlanDag, catalog: Catalog, p: CostModelParams
) -> tuple[dict[str, CardinalityEstimate], dict[str, StepState]]:
    """Propagate cardinalities bottom-up through the plan."""
    states: dict[str, StepState] = {}
    out: dict[str, CardinalityEstimate] = {}
    for layer in topo_schedule(dag):
        for step_id in layer:
            step = dag.step(step_id)
            inputs = [states[pid] for pid in step.parents]
            est, state = _estimate_step(step.op, step.params or {}, inputs, catalog, p, step.source)
            out[step_id] = est
            states[step_id] = state
    return out, states


def estimate_plan(
    dag: PlanDag, catalog: Catalog, p: CostModelParams
) -> dict[str, CardinalityEstimate]:
    return estimate_plan_detailed(dag, catalog, p)[0]


def _clamped(value: float, ceiling: int) -> int:
    if ceiling <= 0:
        return 0
    return min(ceiling, max(1, int(value)))


def _scale_distincts(distincts: dict[str, int], rows: int) -> dict[str, int]:
    return {c: min(d, rows) for c, d in distincts.items()}


def _estimate_step(
    op: OperatorTag,
    params: dict[str, Any],
    inputs: Sequence[_State],
    catalog: Catalog,
    p: CostModelParams,
    source: Optional[str],
) -> tuple[CardinalityEstimate, _State]:
    if op is OperatorTag.SCAN:
        table = params.get("table") or source
        ts = catalog.table(str(table))
        state = _State(ts.size, ts.row_bytes, ts.row_tokens, dict(ts.distincts), width=len(ts.columns) or 1)
        est = CardinalityEstimate(
            ts.size, ts.size, EstimateBasis.EXACT, input_bytes=ts.size * ts.row_bytes
        )
        return est, state

    if op in (OperatorTag.JOIN, OperatorTag.SEM_JOIN, OperatorTag.SET_OP):
        a, b = inputs
        gamma_in = a.rows + b.rows
        input_bytes = a.rows * a.row_bytes + b.rows * b.row_bytes
        if op is OperatorTag.SET_OP:
            kind = params.get("kind", "union")
            if kind == "union":
                gamma_out, basis = estimate_union_card(a.rows, b.rows), EstimateBasis.EXACT
            elif kind == "intersection":
                gamma_out, basis = min(a.rows, b.rows), EstimateBasis.FORMULA
            else:
                gamma_out, basis = a.rows, EstimateBasis.FORMULA
            state = _State(gamma_out, a.row_bytes, a.row_tokens, _scale_distincts(a.distincts, gamma_out), width=a.width)
            est = CardinalityEstimate(gamma_in, gamma_out, basis, input_bytes)
            return est, state
        if op is OperatorTag.JOIN:
            da = a.distincts.get(str(params.get("left")), a.rows)
            db = b.distincts.get(str(params.get("right")), b.rows)
        else:
            da, db = a.rows, b.rows
        if a.rows and b.rows and max(da, db) <= 0:
            da, db = a.rows, b.rows
        gamma_out = estimate_join_card(a.rows, b.rows, da, db)
        merged = {**_scale_distincts(a.distincts, gamma_out), **_scale_distincts(b.distincts, gamma_out)}
        state = _State(gamma_out, a.row_bytes + b.row_bytes, a.row_tokens + b.row_tokens, merged, width=a.width + b.width)
        tokens = (a.row_tokens + b.row_tokens) / 2 if op is OperatorTag.SEM_JOIN else 0.0
        est = CardinalityEstimate(
            gamma_in, gamma_out, EstimateBasis.FORMULA, input_bytes, expected_tokens=tokens
        )
        return est, state

    (src,) = inputs
    gamma_in = src.rows
    input_bytes = src.rows * src.row_bytes
    tokens = src.row_tokens if op.is_semantic else 0.0

    if op is OperatorTag.FILTER:
        col, cmp = str(params.get("column")), params.get("op", "=")
        if cmp == "=" and src.distincts.get(col):
            sel = 1.0 / src.distincts[col]
        else:
            sel = p.filter_selectivity
        gamma_out = _clamped(gamma_in * sel, gamma_in)
    elif op is OperatorTag.SEM_FILTER:
        gamma_out = _clamped(gamma_in * p.filter_selectivity, gamma_in)
    elif op is OperatorTag.LIMIT:
        gamma_out = min(gamma_in, int(params.get("n", gamma_in)))
    elif op in (OperatorTag.AGGREGATE, OperatorTag.SEM_AGGREGATE):
        group = params.get("group_by") or []
        if not group:
            gamma_out = 1
        else:
            known = [src.distincts[g] for g in group if g in src.distincts]
            gamma_out = (
                _clamped(max(known), gamma_in)
                if known
                else _clamped(gamma_in * p.filter_selectivity, gamma_in)
            )
    elif op is OperatorTag.DISTINCT:
        cols = params.get("columns") or []
        known = [src.distincts[c] for c in cols if c in src.distincts]
        gamma_out = _clamped(max(known), gamma_in) if known else gamma_in
    else:  # PROJECT, SORT, SEM_MAP
        gamma_out = gamma_in

    row_bytes, row_tokens, width = src.row_bytes, src.row_tokens, src.width
    if op is OperatorTag.PROJECT and params.get("columns"):
        width = len(params["columns"])
        keep = min(width / max(src.width, 1), 1.0)
        row_bytes = max(src.row_bytes * keep, 1.0)
        row_tokens = max(src.row_tokens * keep, 1.0)
    if op is OperatorTag.SEM_MAP:
        row_bytes += 8.0
        row_tokens += 1.3
        width += 1
    basis = EstimateBasis.EXACT if op in (OperatorTag.PROJECT, OperatorTag.SORT, OperatorTag.SEM_MAP) else EstimateBasis.FORMULA
    state = _State(gamma_out, row_bytes, row_tokens, _scale_distincts(src.distincts, gamma_out), width=width)
    est = CardinalityEstimate(gamma_in, gamma_out, basis, input_bytes, expected_tokens=tokens)
    return est, state


# -- calibration -----------------------------------------------------------


@dataclass
class WorkloadSpec:
    sizes: tuple[int, ...] = (1_000, 5_000, 20_000)
    columns: int = 5
    seed: int = 0

    def generate(self) -> list[Relation]:
        rng = random.Random(self.seed)
        tables = []
        for n in self.sizes:
            cols = [(f"c{i}", AttributeKind.NUMERIC) for i in range(self.columns)]
            rows = [
                tuple(rng.randint(0, 10_000) for _ in range(self.columns))
                for _ in range(n)
            ]
            tables.append(Relation.build(f"bench_{n}", cols, rows))
        return tables


@dataclass
class CalibrationResult:
    params: CostModelParams
    report: dict[str, Any]


def _scan_seconds(rel: Relation) -> float:
    best = math.inf
    for _ in range(3):
        t0 = time.perf_counter()
        acc = 0
        for row in rel.rows:
            for cell in row:
                if cell is not None:
                    acc += 1
        best = min(best, time.perf_counter() - t0)
    return best


def calibrate(
    workload: WorkloadSpec,
    backend_stats: Optional[Sequence[tuple[int, float]]] = None,
    measure: Callable[[Relation], float] | None = None,
    defaults: CostModelParams | None = None,
) -> CalibrationResult:
    """Fit unit costs from a synthetic workload.

    ``backend_stats`` is a sequence of (total_tokens, seconds) call
    measurements; without it the call/token costs keep their defaults.
    ``measure`` exists so tests can inject a deterministic timer.
    """
    if len(workload.sizes) < 3:
        raise CalibrationError("workload must produce at least 3 table sizes")
    if len(set(workload.sizes)) < 2:
        raise CalibrationError("degenerate fit: need at least 2 distinct sizes")

    base = defaults or CostModelParams()
    measure = measure or _scan_seconds
    tables = workload.generate()
    sizes = [float(len(t.rows)) for t in tables]
    timings = [measure(t) for t in tables]

    fit = statistics.linear_regression(sizes, timings)
    if fit.slope <= 0:
        raise CalibrationError("degenerate fit: scan time does not grow with rows")
    c_cpu = fit.slope
    residuals = [
        timings[i] - (fit.intercept + fit.slope * sizes[i]) for i in range(len(sizes))
    ]

    # io unit: serialize the largest table, time per page touched
    biggest = tables[-1]
    t0 = time.perf_counter()
    blob = "\n".join(",".join(str(c) for c in row) for row in biggest.rows).encode()
    io_seconds = time.perf_counter() - t0
    pages = max(pages_for(len(blob), base.page_size), 1)
    c_io = max(io_seconds / pages, 1e-12)

    c_call, alpha, backend_note = base.c_call, base.alpha, "defaults retained"
    if backend_stats:
        tokens = [float(t) for t, _ in backend_stats]
        lat = [s for _, s in backend_stats]
        if len(set(tokens)) >= 2:
            bfit = statistics.linear_regression(tokens, lat)
            c_call, alpha = max(bfit.intercept, 0.0), max(bfit.slope, 0.0)
            backend_note = f"fitted from {len(backend_stats)} calls"
        else:
            backend_note = "insufficient variation; defaults retained"

    params = CostModelParams(
        c_cpu=c_cpu,
        c_io=c_io,
        c_call=c_call,
        alpha=alpha,
        w_sys=base.w_sys,
        w_llm=base.w_llm,
        epsilon=base.epsilon,
        tau=base.tau,
        page_size=base.page_size,
        filter_selectivity=base.filter_selectivity,
    )
    report = {
        "params": asdict(params),
        "scan_fit": {
            "sizes": sizes,
            "timings": timings,
            "slope": fit.slope,
            "intercept": fit.intercept,
            "residuals": residuals,
        },
        "io": {"bytes": len(blob), "pages": pages, "seconds": io_seconds},
        "backend": {"note": backend_note, "samples": len(backend_stats or [])},
        "sample_counts": {"tables": len(tables)},
    }
    return CalibrationResult(params=params, report=report)
