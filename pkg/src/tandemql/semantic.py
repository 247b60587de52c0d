"""Batched execution of semantic operators over a pluggable backend.

Inputs are partitioned into chunks sized by a token budget; map and
filter chunks are independent, joins run as block nested loops over
chunk pairs, and aggregates reduce recursively through partial
summaries. Chunk dispatch may run concurrently; results and token
accounting are reassembled in chunk order, so output is deterministic
for a deterministic backend.
"""

from __future__ import annotations

import logging
import math
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

from .errors import BackendError, BudgetError, ContractViolation
from .relation import AttributeKind, Cell, Relation

log = logging.getLogger(__name__)

MAX_DEPTH = 8

RowDict = dict[str, Cell]


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass(frozen=True)
class CallRecord:
    operator: str
    chunk_sizes: tuple[int, ...]
    input_tokens: int
    output_tokens: int


class TokenAccounting:
    """Per-call token ledger; totals always equal the sum of records."""

    def __init__(self) -> None:
        self._records: list[CallRecord] = []
        self._lock = threading.Lock()

    def add(self, operator: str, chunk_sizes: Sequence[int], usage: Usage) -> None:
        record = CallRecord(operator, tuple(chunk_sizes), usage.input_tokens, usage.output_tokens)
        with self._lock:
            self._records.append(record)

    def merge(self, other: "TokenAccounting") -> None:
        with self._lock:
            self._records.extend(other.records)

    @property
    def records(self) -> list[CallRecord]:
        return list(self._records)

    def totals(self) -> tuple[int, int]:
        return (
            sum(r.input_tokens for r in self._records),
            sum(r.output_tokens for r in self._records),
        )

    def by_operator(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for r in self._records:
            ti, to = out.get(r.operator, (0, 0))
            out[r.operator] = (ti + r.input_tokens, to + r.output_tokens)
        return out

    def call_count(self) -> int:
        return len(self._records)

    def to_dict(self) -> dict[str, Any]:
        ti, to = self.totals()
        return {
            "calls": self.call_count(),
            "input_tokens": ti,
            "output_tokens": to,
            "by_operator": {
                op: {"input_tokens": a, "output_tokens": b}
                for op, (a, b) in sorted(self.by_operator().items())
            },
        }


@dataclass
class BatchConfig:
    b: int = 100
    B_max: float = 8192.0
    t_row: float = 1.0
    parallelism: int = 8
    retries: int = 2
    partial_cap: int = 1  # rows a partial aggregation may return per chunk

    def __post_init__(self):
        if self.b < 1:
            raise BudgetError("base batch size must be >= 1")
        if self.t_row <= 0:
            raise BudgetError("per-row token estimate must be positive")


def compute_batch_size(cfg: BatchConfig) -> int:
    """Rows per chunk: min(base size, floor(budget / per-row tokens))."""
    if cfg.B_max < cfg.t_row:
        raise BudgetError(
            f"token budget {cfg.B_max} cannot fit a single row of {cfg.t_row} tokens"
        )
    return min(cfg.b, math.floor(cfg.B_max / cfg.t_row))


class SemanticBackend(ABC):
    """Provider of chunk-level semantic operations plus planning support.

    Every method returns ``(result, Usage)`` so callers can account input
    and output tokens per call. Chunks travel as lists of row objects;
    filter responses are 0-based indices local to the chunk.
    """

    @abstractmethod
    def map(self, instruction: str, chunk: list[RowDict]) -> tuple[list[RowDict], Usage]:
        """Per-row derived columns, aligned to the chunk (one dict of new
        column values per input row)."""

    @abstractmethod
    def filter(self, instruction: str, chunk: list[RowDict]) -> tuple[list[int], Usage]:
        ...

    @abstractmethod
    def join(
        self, instruction: str, chunk_a: list[RowDict], chunk_b: list[RowDict]
    ) -> tuple[list[RowDict], Usage]:
        ...

    @abstractmethod
    def aggregate(
        self, instruction: str, chunk: list[RowDict], final: bool
    ) -> tuple[Any, Usage]:
        """Partial mode returns summary rows that can be merged again;
        final mode returns the result payload."""

    @abstractmethod
    def plan(self, question: str, context: str, k: int) -> tuple[str, Usage]:
        ...

    @abstractmethod
    def judge(self, question: str, candidates: list[dict[str, Any]]) -> tuple[int, Usage]:
        ...

    @abstractmethod
    def equal(self, answer_a: str, answer_b: str) -> tuple[bool, Usage]:
        ...

    @abstractmethod
    def embed(self, text: str) -> tuple[dict[str, float], Usage]:
        ...

    @abstractmethod
    def translate(
        self,
        instruction: str,
        operator: str,
        schema: list[dict[str, Any]],
        feedback: list[str],
    ) -> tuple[dict[str, Any], Usage]:
        """Compile one relational instruction into structured params;
        ``feedback`` carries validation errors from earlier attempts."""

    @abstractmethod
    def prune_schema(
        self, question: str, table: str, columns: list[dict[str, Any]]
    ) -> tuple[list[str], Usage]:
        ...


# -- dispatch helpers --------------------------------------------------------


def _run_tasks(tasks: list[Callable[[], Any]], parallelism: int) -> list[Any]:
    if len(tasks) <= 1 or parallelism <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(tasks))) as pool:
        return list(pool.map(lambda t: t(), tasks))


def _with_retry(
    call: Callable[[], tuple[Any, Usage]],
    check: Callable[[Any], None],
    retries: int,
    what: str,
) -> tuple[Any, list[Usage]]:
    usages: list[Usage] = []
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            result, usage = call()
            usages.append(usage)
            check(result)
            return result, usages
        except (BackendError, ContractViolation) as exc:
            last = exc
    raise BackendError(f"{what} failed after {retries} retries: {last}") from last


def _chunks(rows: Sequence[Any], beta: int) -> list[list[Any]]:
    return [list(rows[i : i + beta]) for i in range(0, len(rows), beta)]


def _record_all(
    accounting: Optional[TokenAccounting],
    operator: str,
    per_task: list[tuple[Sequence[int], list[Usage]]],
) -> None:
    if accounting is None:
        return
    for sizes, usages in per_task:
        for usage in usages:
            accounting.add(operator, sizes, usage)


def _infer_kind(values: list[Cell]) -> AttributeKind:
    present = [v for v in values if v is not None]
    if present and all(isinstance(v, bool) for v in present):
        return AttributeKind.BOOLEAN
    if present and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in present):
        return AttributeKind.NUMERIC
    return AttributeKind.TEXTUAL


# -- operators ---------------------------------------------------------------


def exec_map(
    instruction: str,
    relation: Relation,
    cfg: BatchConfig,
    backend: SemanticBackend,
    new_column: Optional[str] = None,
    accounting: Optional[TokenAccounting] = None,
) -> Relation:
    """Append backend-derived columns to every row, chunk by chunk."""
    existing = set(relation.column_names)
    if not relation.rows:
        if new_column is None:
            return relation
        if new_column in existing:
            raise ContractViolation(f"derived column {new_column!r} already exists")
        return Relation.build(
            relation.name,
            [(c.name, c.kind) for c in relation.columns] + [(new_column, AttributeKind.TEXTUAL)],
            [],
        )

    beta = compute_batch_size(cfg)
    chunks = _chunks(relation.row_dicts(), beta)

    def make_task(chunk: list[RowDict]) -> Callable[[], tuple[list[RowDict], list[Usage]]]:
        def check(result: Any) -> None:
            if not isinstance(result, list) or len(result) != len(chunk):
                raise ContractViolation(
                    f"map returned {len(result) if isinstance(result, list) else 'non-list'}"
                    f" entries for a {len(chunk)}-row chunk"
                )
            for entry in result:
                if not isinstance(entry, dict) or not entry:
                    raise ContractViolation("map entries must be non-empty objects")
                overlap = set(entry) & existing
                if overlap:
                    raise ContractViolation(f"map would overwrite existing columns {sorted(overlap)}")

        return lambda: _with_retry(lambda: backend.map(instruction, chunk), check, cfg.retries, "map")

    results = _run_tasks([make_task(c) for c in chunks], cfg.parallelism)
    _record_all(accounting, "LLM_DERIVE", [((len(c),), u) for c, (_, u) in zip(chunks, results)])

    derived: list[RowDict] = [entry for result, _ in results for entry in result]
    new_keys = sorted({k for entry in derived for k in entry})
    if new_column is not None and new_column not in new_keys:
        raise ContractViolation(f"backend never produced the declared column {new_column!r}")
    columns = [(c.name, c.kind) for c in relation.columns] + [
        (k, _infer_kind([d.get(k) for d in derived])) for k in new_keys
    ]
    rows = [
        row + tuple(entry.get(k) for k in new_keys)
        for row, entry in zip(relation.rows, derived)
    ]
    return Relation.build(relation.name, columns, rows)


def exec_filter(
    instruction: str,
    relation: Relation,
    cfg: BatchConfig,
    backend: SemanticBackend,
    accounting: Optional[TokenAccounting] = None,
) -> Relation:
    """Keep rows whose chunk-local index the backend returns; input order
    is preserved and only indices travel back."""
    if not relation.rows:
        return relation
    beta = compute_batch_size(cfg)
    chunks = _chunks(relation.row_dicts(), beta)

    def make_task(chunk: list[RowDict]) -> Callable[[], tuple[list[int], list[Usage]]]:
        def check(result: Any) -> None:
            if not isinstance(result, list):
                raise ContractViolation("filter must return an index array")
            seen: set[int] = set()
            for i in result:
                if not isinstance(i, int) or isinstance(i, bool) or not 0 <= i < len(chunk):
                    raise ContractViolation(f"filter index {i!r} out of range for chunk of {len(chunk)}")
                if i in seen:
                    raise ContractViolation(f"filter returned duplicate index {i}")
                seen.add(i)

        return lambda: _with_retry(lambda: backend.filter(instruction, chunk), check, cfg.retries, "filter")

    results = _run_tasks([make_task(c) for c in chunks], cfg.parallelism)
    _record_all(accounting, "LLM_FILTER", [((len(c),), u) for c, (_, u) in zip(chunks, results)])

    kept = []
    for chunk_no, (indices, _) in enumerate(results):
        base = chunk_no * beta
        kept.extend(relation.rows[base + i] for i in sorted(indices))
    return relation.with_rows(kept)


def exec_join(
    instruction: str,
    a: Relation,
    b: Relation,
    cfg: BatchConfig,
    backend: SemanticBackend,
    accounting: Optional[TokenAccounting] = None,
) -> Relation:
    """Block nested-loop join: every pair of row blocks is evaluated by the
    backend exactly once; results keep block order and are not deduplicated."""
    schema = [(c.name, c.kind) for c in a.columns]
    schema += [(c.name, c.kind) for c in b.columns if not a.has_column(c.name)]
    names = [n for n, _ in schema]
    aliases: dict[str, str] = {}
    for c in a.column_names:
        aliases[f"{a.name}_{c}"] = c
    for c in b.column_names:
        out = c if c in names else None
        if out:
            aliases.setdefault(f"{b.name}_{c}", out)

    if not a.rows or not b.rows:
        return Relation.build(a.name, schema, [])

    beta = compute_batch_size(cfg)
    blocks_a = _chunks(a.row_dicts(), beta)
    blocks_b = _chunks(b.row_dicts(), beta)
    allowed = set(names) | set(aliases)

    def make_task(block_a: list[RowDict], block_b: list[RowDict]):
        def check(result: Any) -> None:
            if not isinstance(result, list):
                raise ContractViolation("join must return a row list")
            for row in result:
                if not isinstance(row, dict):
                    raise ContractViolation("join rows must be objects")
                alien = set(row) - allowed
                if alien:
                    raise ContractViolation(f"join row carries unknown columns {sorted(alien)}")

        return lambda: _with_retry(
            lambda: backend.join(instruction, block_a, block_b), check, cfg.retries, "join"
        )

    pairs = [(ba, bb) for ba in blocks_a for bb in blocks_b]
    results = _run_tasks([make_task(ba, bb) for ba, bb in pairs], cfg.parallelism)
    _record_all(
        accounting,
        "LLM_JOIN",
        [((len(ba), len(bb)), u) for (ba, bb), (_, u) in zip(pairs, results)],
    )

    rows = []
    for merged, _ in results:
        for row in merged:
            normalized = {aliases.get(k, k): v for k, v in row.items()}
            rows.append(tuple(normalized.get(n) for n in names))
    return Relation.build(a.name, schema, rows)


def exec_aggregate(
    instruction: str,
    relation: Relation,
    cfg: BatchConfig,
    backend: SemanticBackend,
    accounting: Optional[TokenAccounting] = None,
) -> Relation:
    """Recursive map-reduce: partial summaries per chunk until one final
    aggregation fits a single call (or the depth cap forces one)."""
    if not relation.rows:
        log.warning("semantic aggregate over an empty relation; returning empty summary")
        return Relation.build(relation.name, [("result", AttributeKind.TEXTUAL)], [])

    beta = compute_batch_size(cfg)
    result = _reduce(instruction, relation.row_dicts(), beta, 0, cfg, backend, accounting)
    if isinstance(result, dict):
        columns = [(k, _infer_kind([result[k]])) for k in result]
        return Relation.build(relation.name, columns, [tuple(result.values())])
    return Relation.build(relation.name, [("result", _infer_kind([result]))], [(result,)])


def _reduce(
    instruction: str,
    rows: list[RowDict],
    beta: int,
    depth: int,
    cfg: BatchConfig,
    backend: SemanticBackend,
    accounting: Optional[TokenAccounting],
) -> Any:
    if len(rows) <= beta or depth > MAX_DEPTH:
        if depth > MAX_DEPTH:
            log.warning("aggregate recursion hit depth %d; forcing final aggregation", depth)
        result, usages = _with_retry(
            lambda: backend.aggregate(instruction, rows, True),
            lambda r: None,
            cfg.retries,
            "aggregate(final)",
        )
        _record_all(accounting, "LLM_AGGREGATE", [((len(rows),), usages)])
        return result

    chunks = _chunks(rows, beta)

    def make_task(chunk: list[RowDict]):
        def check(result: Any) -> None:
            if not isinstance(result, list) or not all(isinstance(r, dict) for r in result):
                raise ContractViolation("partial aggregate must return summary rows")
            if len(result) > cfg.partial_cap:
                raise ContractViolation(
                    f"partial aggregate returned {len(result)} rows, cap is {cfg.partial_cap}"
                )

        return lambda: _with_retry(
            lambda: backend.aggregate(instruction, chunk, False), check, cfg.retries, "aggregate(partial)"
        )

    results = _run_tasks([make_task(c) for c in chunks], cfg.parallelism)
    _record_all(
        accounting, "LLM_AGGREGATE", [((len(c),), u) for c, (_, u) in zip(chunks, results)]
    )
    partials = [row for result, _ in results for row in result]
    if len(partials) >= len(rows):
        result, usages = _with_retry(
            lambda: backend.aggregate(instruction, partials, True),
            lambda r: None,
            cfg.retries,
            "aggregate(final)",
        )
        _record_all(accounting, "LLM_AGGREGATE", [((len(partials),), usages)])
        return result
    return _reduce(instruction, partials, beta, depth + 1, cfg, backend, accounting)
