"""Database bundle files: a deterministic JSON serialization of ingested,
cleaned, and profiled relations. Profiles are recomputed on load (they
are a pure function of the rows), so files stay small and stable."""

from __future__ import annotations

import json
from datetime import datetime
from pathlib import Path
from typing import Any

from .errors import IngestError
from .relation import AttributeKind, Relation

FORMAT_VERSION = 1


def _encode_cell(value: Any) -> Any:
    if isinstance(value, datetime):
        return value.isoformat()
    return value


def _decode_cell(value: Any, kind: AttributeKind) -> Any:
    if value is None:
        return None
    if kind is AttributeKind.TEMPORAL and isinstance(value, str):
        return datetime.fromisoformat(value)
    return value


def dumps(relations: dict[str, Relation]) -> bytes:
    payload = {
        "version": FORMAT_VERSION,
        "relations": [
            {
                "name": name,
                "columns": [{"name": c.name, "kind": c.kind.value} for c in rel.columns],
                "primary_key": list(rel.primary_key),
                "foreign_keys": {
                    col: list(target) for col, target in sorted(rel.foreign_keys.items())
                },
                "rows": [[_encode_cell(c) for c in row] for row in rel.rows],
            }
            for name, rel in sorted(relations.items())
        ],
    }
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=1).encode("utf-8")


def loads(data: bytes | str) -> dict[str, Relation]:
    try:
        payload = json.loads(data)
    except json.JSONDecodeError as exc:
        raise IngestError(f"bundle is not valid JSON: {exc.msg}") from exc
    if not isinstance(payload, dict) or payload.get("version") != FORMAT_VERSION:
        raise IngestError("unsupported bundle format")
    out: dict[str, Relation] = {}
    for entry in payload.get("relations", []):
        kinds = [AttributeKind(c["kind"]) for c in entry["columns"]]
        names = [str(c["name"]) for c in entry["columns"]]
        rows = [
            tuple(_decode_cell(cell, kinds[i]) for i, cell in enumerate(row))
            for row in entry["rows"]
        ]
        out[entry["name"]] = Relation.build(
            entry["name"],
            list(zip(names, kinds)),
            rows,
            primary_key=tuple(entry.get("primary_key", [])),
            foreign_keys={
                k: (v[0], v[1]) for k, v in (entry.get("foreign_keys") or {}).items()
            },
        )
    return out


def save(relations: dict[str, Relation], path: str | Path) -> None:
    Path(path).write_bytes(dumps(relations))


def load(path: str | Path) -> dict[str, Relation]:
    return loads(Path(path).read_bytes())
