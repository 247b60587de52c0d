"""Table ingestion (CSV / JSON-Lines), cleaning, and heuristic column pruning.

Ingestion infers a column kind from the raw cells, converts cells to the
inferred type, and profiles every column. Cleaning and pruning are the
query-agnostic preprocessing pass: they run once per database instance.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import IO, Any, Sequence

from .errors import IngestError
from .relation import AttributeKind, Relation

DEFAULT_DATE_FORMATS = [
    "%Y-%m-%d",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y/%m/%d",
    "%m/%d/%Y",
]

CATEGORICAL_DISTINCT_RATIO = 0.20
CATEGORICAL_MAX_LEN = 64

_TRUE_TOKENS = {"true", "t", "yes", "y"}
_FALSE_TOKENS = {"false", "f", "no", "n"}


class IngestFormat(Enum):
    CSV = "csv"
    JSONL = "jsonl"


def ingest_table(
    source: bytes | IO[bytes],
    format: IngestFormat,
    name: str,
    type_hints: dict[str, AttributeKind] | None = None,
    date_formats: Sequence[str] | None = None,
) -> Relation:
    """Parse a byte stream into a profiled Relation.

    Raises IngestError (with a line number) on malformed input or a row
    whose arity disagrees with the header.
    """
    data = source if isinstance(source, bytes) else source.read()
    text = data.decode("utf-8-sig")
    if format is IngestFormat.CSV:
        header, raw_rows = _read_csv(text)
    else:
        header, raw_rows = _read_jsonl(text)

    hints = {k: _coerce_kind(v) for k, v in (type_hints or {}).items()}
    formats = list(date_formats or DEFAULT_DATE_FORMATS)

    columns = []
    typed_cols = []
    for i, col_name in enumerate(header):
        raw = [row[i] for row in raw_rows]
        kind = hints.get(col_name) or _infer_kind(raw, formats)
        typed_cols.append(_convert(raw, kind, formats))
        columns.append((col_name, kind))

    rows = list(zip(*typed_cols)) if typed_cols and raw_rows else []
    return Relation.build(name, columns, rows)


def _coerce_kind(kind: AttributeKind | str) -> AttributeKind:
    return kind if isinstance(kind, AttributeKind) else AttributeKind(str(kind).lower())


def _read_csv(text: str) -> tuple[list[str], list[list[Any]]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader, None)
    except csv.Error as exc:
        raise IngestError(str(exc), line=1) from exc
    if not header:
        raise IngestError("empty document: no header row")
    rows: list[list[Any]] = []
    try:
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(
                    f"expected {len(header)} fields, found {len(row)}",
                    line=reader.line_num,
                )
            rows.append([cell if cell != "" else None for cell in row])
    except csv.Error as exc:
        raise IngestError(str(exc), line=reader.line_num) from exc
    return header, rows


def _read_jsonl(text: str) -> tuple[list[str], list[list[Any]]]:
    header: list[str] = []
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"invalid JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise IngestError("expected a JSON object per line", line=lineno)
        for key in obj:
            if key not in header:
                header.append(key)
        records.append(obj)
    if not header:
        raise IngestError("empty document: no records with field names")
    rows = [[rec.get(k) for k in header] for rec in records]
    return header, rows


# -- kind inference ------------------------------------------------------


def _infer_kind(raw: list[Any], formats: Sequence[str]) -> AttributeKind:
    non_null = [v for v in raw if v is not None]
    if not non_null:
        return AttributeKind.TEXTUAL
    if all(_as_number(v) is not None for v in non_null):
        return AttributeKind.NUMERIC
    if all(isinstance(v, bool) for v in non_null):
        return AttributeKind.BOOLEAN
    if all(isinstance(v, str) for v in non_null):
        if _parse_format(non_null, formats) is not None:
            return AttributeKind.TEMPORAL
        lowered = {v.strip().lower() for v in non_null}
        if len(lowered) <= 2 and lowered <= (_TRUE_TOKENS | _FALSE_TOKENS):
            return AttributeKind.BOOLEAN
        distinct = len(set(non_null))
        max_len = max(len(v) for v in non_null)
        if distinct <= CATEGORICAL_DISTINCT_RATIO * len(raw) and max_len <= CATEGORICAL_MAX_LEN:
            return AttributeKind.CATEGORICAL
    return AttributeKind.TEXTUAL


def _as_number(v: Any) -> float | None:
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            float(v)
        except ValueError:
            return None
        return float(v)
    return None


def _parse_format(values: list[str], formats: Sequence[str]) -> str | None:
    """First date format that parses every value, or None."""
    for fmt in formats:
        try:
            for v in values:
                datetime.strptime(v.strip(), fmt)
        except ValueError:
            continue
        return fmt
    return None


def _convert(raw: list[Any], kind: AttributeKind, formats: Sequence[str]) -> list[Any]:
    if kind is AttributeKind.NUMERIC:
        return [_to_number(v) for v in raw]
    if kind is AttributeKind.BOOLEAN:
        return [_to_bool(v) for v in raw]
    if kind is AttributeKind.TEMPORAL:
        strs = [v for v in raw if isinstance(v, str)]
        fmt = _parse_format(strs, formats) if strs else None
        return [_to_datetime(v, fmt) for v in raw]
    return [v if v is None or isinstance(v, str) else json.dumps(v) for v in raw]


def _to_number(v: Any) -> float | int | None:
    num = _as_number(v)
    if num is None:
        return None
    return int(num) if num.is_integer() else num


def _to_bool(v: Any) -> bool | None:
    if v is None:
        return None
    if isinstance(v, bool):
        return v
    token = str(v).strip().lower()
    if token in _TRUE_TOKENS:
        return True
    if token in _FALSE_TOKENS:
        return False
    return None


def _to_datetime(v: Any, fmt: str | None) -> datetime | None:
    if v is None or not isinstance(v, str) or fmt is None:
        return v if isinstance(v, datetime) else None
    try:
        return datetime.strptime(v.strip(), fmt)
    except ValueError:
        return None


# -- cleaning ------------------------------------------------------------


def clean_normalize(relation: Relation) -> Relation:
    """Identifier-safe column names, duplicate-name suffixes, blank cells to null."""
    names: list[str] = []
    for col in relation.columns:
        base = _safe_identifier(col.name)
        candidate, suffix = base, 2
        while candidate in names:
            candidate = f"{base}_{suffix}"
            suffix += 1
        names.append(candidate)

    rows = [
        tuple(None if isinstance(c, str) and not c.strip() else c for c in row)
        for row in relation.rows
    ]
    return Relation.build(
        relation.name,
        [(n, col.kind) for n, col in zip(names, relation.columns)],
        rows,
        primary_key=tuple(_safe_identifier(k) for k in relation.primary_key),
        foreign_keys={_safe_identifier(k): v for k, v in relation.foreign_keys.items()},
    )


def _safe_identifier(name: str) -> str:
    out = re.sub(r"[^a-z0-9]+", "_", name.strip().lower()).strip("_")
    if not out:
        return "col"
    if out[0].isdigit():
        out = f"c_{out}"
    return out


# -- heuristic pruning -----------------------------------------------------

_HEX_RE = re.compile(r"[0-9a-fA-F]{32,}")
_BASE64_RE = re.compile(r"[A-Za-z0-9+/]{32,}={0,2}")


@dataclass
class PruneThresholds:
    null_fraction: float = 0.95
    dominance: float = 0.95
    noninformative: float = 0.50
    sample_size: int = 100


@dataclass
class PruneReport:
    entries: list[tuple[str, str, str]] = field(default_factory=list)

    def add(self, column: str, rule: str, detail: str) -> None:
        self.entries.append((column, rule, detail))

    @property
    def dropped(self) -> list[str]:
        return [c for c, _, _ in self.entries]


def heuristic_prune(
    relation: Relation, thresholds: PruneThresholds | None = None
) -> tuple[Relation, PruneReport]:
    """Drop noise columns: null-dominated, constant-dominated, or non-informative.

    Primary/foreign key columns are always retained. Pruning a pruned
    relation drops nothing.
    """
    th = thresholds or PruneThresholds()
    report = PruneReport()
    if not relation.rows:
        return relation, report

    keys = relation.key_columns()
    keep: list[int] = []
    for i, col in enumerate(relation.columns):
        if col.name in keys:
            keep.append(i)
            continue
        values = [row[i] for row in relation.rows]
        non_null = [v for v in values if v is not None]
        null_frac = (len(values) - len(non_null)) / len(values)
        if null_frac > th.null_fraction:
            report.add(col.name, "null_fraction", f"{null_frac:.3f} null")
            continue
        if non_null:
            counts: dict[Any, int] = {}
            for v in non_null:
                counts[v] = counts.get(v, 0) + 1
            top_share = max(counts.values()) / len(non_null)
            if top_share > th.dominance:
                report.add(col.name, "dominant_value", f"top value covers {top_share:.3f}")
                continue
            sample = [str(v) for v in non_null[: th.sample_size] if isinstance(v, str)]
            if sample:
                hits = sum(1 for s in sample if _noninformative(s))
                if hits / len(sample) >= th.noninformative:
                    report.add(col.name, "noninformative", f"{hits}/{len(sample)} detector hits")
                    continue
        keep.append(i)

    if len(keep) == len(relation.columns):
        return relation, report

    kept_cols = [relation.columns[i] for i in keep]
    rows = [tuple(row[i] for i in keep) for row in relation.rows]
    pruned = Relation.build(
        relation.name,
        [(c.name, c.kind) for c in kept_cols],
        rows,
        primary_key=relation.primary_key,
        foreign_keys=relation.foreign_keys,
    )
    return pruned, report


def _noninformative(cell: str) -> bool:
    if "```" in cell:
        return True
    token = cell.strip()
    if _HEX_RE.fullmatch(token) or _BASE64_RE.fullmatch(token):
        return True
    return False
