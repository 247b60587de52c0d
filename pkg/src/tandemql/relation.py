"""In-memory typed relations with per-column data profiles.

Relations are immutable after construction and safe to share across
threads; every operation here is a pure function of the stored rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

from .errors import SchemaError

# Cells are plain scalars; temporal cells are datetime instances.
Cell = Any
Row = tuple

TOKEN_FACTOR = 1.3  # whitespace tokens -> model tokens, coarse by design
TOP_K = 10
SNIPPET_COUNT = 3
SNIPPET_MAX_CHARS = 80


class AttributeKind(Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    TEXTUAL = "textual"
    TEMPORAL = "temporal"
    BOOLEAN = "boolean"

    @property
    def structured(self) -> bool:
        """Textual columns need semantic reasoning; everything else is structured."""
        return self is not AttributeKind.TEXTUAL


@dataclass(frozen=True)
class AttributeProfile:
    """Summary statistics for one column; populated fields depend on the kind."""

    null_fraction: float = 0.0
    distinct_count: int = 0
    # numeric
    min: Optional[float] = None
    max: Optional[float] = None
    avg: Optional[float] = None
    variance: Optional[float] = None
    # categorical / boolean
    cardinality: Optional[int] = None
    top_k_values: Optional[tuple[tuple[Any, int], ...]] = None
    # textual
    min_len: Optional[int] = None
    max_len: Optional[int] = None
    unique_count: Optional[int] = None
    sample_snippets: Optional[tuple[str, ...]] = None
    expected_token_len: Optional[float] = None
    # temporal
    range_start: Optional[datetime] = None
    range_end: Optional[datetime] = None
    granularity: Optional[str] = None


@dataclass(frozen=True)
class Column:
    name: str
    kind: AttributeKind
    profile: AttributeProfile = field(default_factory=AttributeProfile)


@dataclass(frozen=True)
class Relation:
    """A named, ordered-schema relation of typed-or-null cells.

    ``primary_key`` lists key column names; ``foreign_keys`` maps a local
    column to a ``(relation, column)`` target in the same database.
    """

    name: str
    columns: tuple[Column, ...]
    rows: tuple[Row, ...]
    primary_key: tuple[str, ...] = ()
    foreign_keys: dict[str, tuple[str, str]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arity = len(self.columns)
        for i, row in enumerate(self.rows):
            if len(row) != arity:
                raise SchemaError(
                    f"{self.name}: row {i} has {len(row)} cells, schema has {arity}"
                )

    @classmethod
    def build(
        cls,
        name: str,
        columns: Sequence[tuple[str, AttributeKind]],
        rows: Iterable[Sequence[Cell]],
        primary_key: Sequence[str] = (),
        foreign_keys: dict[str, tuple[str, str]] | None = None,
    ) -> "Relation":
        """Construct a relation and profile every column."""
        raw_rows = tuple(tuple(r) for r in rows)
        cols = tuple(Column(n, k) for n, k in columns)
        rel = cls(name, cols, raw_rows, tuple(primary_key), dict(foreign_keys or {}))
        return rel.reprofiled()

    # -- schema access -------------------------------------------------

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise SchemaError(f"{self.name}: unknown column {name!r}")

    def column(self, name: str) -> Column:
        return self.columns[self.column_index(name)]

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def key_columns(self) -> set[str]:
        return set(self.primary_key) | set(self.foreign_keys)

    def column_values(self, name: str) -> list[Cell]:
        idx = self.column_index(name)
        return [row[idx] for row in self.rows]

    # -- derivation ----------------------------------------------------

    def with_rows(self, rows: Iterable[Sequence[Cell]], name: str | None = None) -> "Relation":
        """Same schema, different rows; profiles recomputed."""
        rel = replace(
            self,
            name=name or self.name,
            rows=tuple(tuple(r) for r in rows),
        )
        return rel.reprofiled()

    def reprofiled(self) -> "Relation":
        cols = tuple(
            Column(c.name, c.kind, _profile_column(self.rows, i, c.kind))
            for i, c in enumerate(self.columns)
        )
        return replace(self, columns=cols)

    def row_dicts(self) -> list[dict[str, Cell]]:
        names = self.column_names
        return [dict(zip(names, row)) for row in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


# -- profiling ---------------------------------------------------------


def profile_attribute(relation: Relation, column: str) -> AttributeProfile:
    """Recompute the profile for one column from the stored rows."""
    idx = relation.column_index(column)
    return _profile_column(relation.rows, idx, relation.columns[idx].kind)


def distinct_count(relation: Relation, column: str) -> int:
    """Exact count of distinct non-null values in the column."""
    idx = relation.column_index(column)
    return len({row[idx] for row in relation.rows if row[idx] is not None})


def _profile_column(rows: Sequence[Row], idx: int, kind: AttributeKind) -> AttributeProfile:
    values = [row[idx] for row in rows]
    non_null = [v for v in values if v is not None]
    n = len(values)
    null_fraction = 1.0 if n == 0 else (n - len(non_null)) / n
    distinct = len(set(non_null))

    base = dict(null_fraction=null_fraction, distinct_count=distinct)
    if not non_null:
        return AttributeProfile(**base)

    if kind is AttributeKind.NUMERIC:
        nums = [float(v) for v in non_null]
        mean = sum(nums) / len(nums)
        var = sum((x - mean) ** 2 for x in nums) / len(nums)
        return AttributeProfile(min=min(nums), max=max(nums), avg=mean, variance=var, **base)

    if kind in (AttributeKind.CATEGORICAL, AttributeKind.BOOLEAN):
        counts: dict[Any, int] = {}
        for v in non_null:
            counts[v] = counts.get(v, 0) + 1
        top = sorted(counts.items(), key=lambda kv: (-kv[1], str(kv[0])))[:TOP_K]
        return AttributeProfile(cardinality=distinct, top_k_values=tuple(top), **base)

    if kind is AttributeKind.TEXTUAL:
        texts = [str(v) for v in non_null]
        lens = [len(t) for t in texts]
        token_avg = sum(len(t.split()) for t in texts) / len(texts)
        snippets = tuple(t[:SNIPPET_MAX_CHARS] for t in texts[:SNIPPET_COUNT])
        return AttributeProfile(
            min_len=min(lens),
            max_len=max(lens),
            unique_count=distinct,
            sample_snippets=snippets,
            expected_token_len=max(token_avg * TOKEN_FACTOR, TOKEN_FACTOR),
            **base,
        )

    if kind is AttributeKind.TEMPORAL:
        stamps = sorted(v for v in non_null if isinstance(v, datetime))
        if not stamps:
            return AttributeProfile(**base)
        return AttributeProfile(
            range_start=stamps[0],
            range_end=stamps[-1],
            granularity=_granularity(stamps),
            **base,
        )

    return AttributeProfile(**base)


def _granularity(stamps: Sequence[datetime]) -> str:
    if all(t.month == 1 and t.day == 1 and _midnight(t) for t in stamps):
        return "year"
    if all(t.day == 1 and _midnight(t) for t in stamps):
        return "month"
    if all(_midnight(t) for t in stamps):
        return "day"
    return "second"


def _midnight(t: datetime) -> bool:
    return t.hour == 0 and t.minute == 0 and t.second == 0 and t.microsecond == 0


# -- width and token estimates (feed the cost model) --------------------

_FIXED_WIDTH = {
    AttributeKind.NUMERIC: 8,
    AttributeKind.BOOLEAN: 1,
    AttributeKind.TEMPORAL: 8,
}


def estimate_column_bytes(col: Column) -> float:
    """Rough on-disk width of one cell, from the column profile."""
    if col.kind in _FIXED_WIDTH:
        return _FIXED_WIDTH[col.kind]
    p = col.profile
    if col.kind is AttributeKind.TEXTUAL and p.min_len is not None and p.max_len is not None:
        return (p.min_len + p.max_len) / 2
    if col.kind is AttributeKind.CATEGORICAL and p.top_k_values:
        vals = [str(v) for v, _ in p.top_k_values]
        return sum(len(v) for v in vals) / len(vals)
    return 8.0


def estimate_row_bytes(relation: Relation) -> float:
    return sum(estimate_column_bytes(c) for c in relation.columns) or 8.0


_ROW_OVERHEAD_TOKENS = 5.0
_COLUMN_OVERHEAD_TOKENS = 2.0


def estimate_column_tokens(col: Column) -> float:
    """Expected tokens one cell contributes to a serialized row."""
    p = col.profile
    if col.kind is AttributeKind.TEXTUAL and p.expected_token_len is not None:
        return p.expected_token_len
    if col.kind is AttributeKind.CATEGORICAL and p.top_k_values:
        vals = [str(v) for v, _ in p.top_k_values]
        words = sum(len(v.split()) for v in vals) / len(vals)
        return max(words * TOKEN_FACTOR, TOKEN_FACTOR)
    return TOKEN_FACTOR


def estimate_row_tokens(relation: Relation) -> float:
    """Per-row token footprint of the JSON row-object serialization."""
    per_cell = sum(estimate_column_tokens(c) + _COLUMN_OVERHEAD_TOKENS for c in relation.columns)
    return max(per_cell + _ROW_OVERHEAD_TOKENS, 1.0)
