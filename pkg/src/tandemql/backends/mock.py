"""Deterministic rulebook-driven backend.

The rulebook maps exact instruction strings to rules: regex or comparison
predicates for filters, extraction/classification templates for derived
columns, normalized key equality for joins, and arithmetic merge specs for
aggregates. An instruction without a rule is an explicit error, never a
guess, which makes this backend a usable test oracle.
"""

from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Any

from ..errors import BackendError
from ..plan import OperatorTag
from ..relational import compare
from ..semantic import RowDict, SemanticBackend, Usage
from .. import templates


def _tokens(payload: Any) -> int:
    return max(math.ceil(len(json.dumps(payload, default=str)) / 4), 1)


def _usage(request: Any, response: Any) -> Usage:
    return Usage(input_tokens=_tokens(request), output_tokens=_tokens(response))


def _norm(value: Any) -> str:
    return re.sub(r"\s+", " ", str(value)).strip().casefold()


class MockBackend(SemanticBackend):
    def __init__(self, rulebook: dict[str, Any] | None = None):
        self.rulebook = rulebook or {}

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def _rule(self, section: str, key: str) -> Any:
        rule = self.rulebook.get(section, {}).get(key)
        if rule is None:
            raise BackendError(f"mock backend has no {section} rule for {key!r}")
        return rule

    # -- chunk operators -------------------------------------------------

    def filter(self, instruction: str, chunk: list[RowDict]) -> tuple[list[int], Usage]:
        rule = self._rule("filter", instruction)
        indices = [i for i, row in enumerate(chunk) if _match(rule, row)]
        return indices, _usage([instruction, chunk], indices)

    def map(self, instruction: str, chunk: list[RowDict]) -> tuple[list[RowDict], Usage]:
        rule = self._rule("map", instruction)
        derived = [{str(rule["new_column"]): _derive(rule, row)} for row in chunk]
        return derived, _usage([instruction, chunk], derived)

    def join(
        self, instruction: str, chunk_a: list[RowDict], chunk_b: list[RowDict]
    ) -> tuple[list[RowDict], Usage]:
        rule = self._rule("join", instruction)
        left, right = str(rule["left"]), str(rule["right"])
        exact = rule.get("normalize") is False
        a_cols = set(chunk_a[0]) if chunk_a else set()
        rows = []
        for row_a in chunk_a:
            for row_b in chunk_b:
                va, vb = row_a.get(left), row_b.get(right)
                if va is None or vb is None:
                    continue
                if (va == vb) if exact else (_norm(va) == _norm(vb)):
                    merged = dict(row_a)
                    merged.update({k: v for k, v in row_b.items() if k not in a_cols})
                    rows.append(merged)
        return rows, _usage([instruction, chunk_a, chunk_b], rows)

    def aggregate(
        self, instruction: str, chunk: list[RowDict], final: bool
    ) -> tuple[Any, Usage]:
        rule = self._rule("aggregate", instruction)
        state = _merge_aggregate(rule, chunk)
        if not final:
            partial = [_partial_row(rule, state)]
            return partial, _usage([instruction, chunk], partial)
        result = _final_value(rule, state)
        return result, _usage([instruction, chunk], result)

    # -- planning and consolidation ---------------------------------------

    def plan(self, question: str, context: str, k: int) -> tuple[str, Usage]:
        doc = self._rule("plan", question)
        trimmed = {"plans": list(doc.get("plans", []))[: max(k, 0)]}
        text = json.dumps(trimmed)
        return text, _usage([question, context], text)

    def judge(self, question: str, candidates: list[dict[str, Any]]) -> tuple[int, Usage]:
        rule = self._rule("judge", question)
        if rule == "plurality":
            counts: dict[str, int] = {}
            for c in candidates:
                key = _norm(c.get("answer"))
                counts[key] = counts.get(key, 0) + 1
            best = max(counts.values())
            winners = {k for k, v in counts.items() if v == best}
            index = next(i for i, c in enumerate(candidates) if _norm(c.get("answer")) in winners)
        else:
            index = int(rule)
        return index, _usage([question, candidates], index)

    def equal(self, answer_a: str, answer_b: str) -> tuple[bool, Usage]:
        result = _norm(answer_a) == _norm(answer_b)
        return result, _usage([answer_a, answer_b], result)

    def embed(self, text: str) -> tuple[dict[str, float], Usage]:
        vector: dict[str, float] = {}
        for token in re.findall(r"\w+", text.casefold()):
            vector[token] = vector.get(token, 0.0) + 1.0
        return vector, _usage(text, sorted(vector))

    def translate(
        self,
        instruction: str,
        operator: str,
        schema: list[dict[str, Any]],
        feedback: list[str],
    ) -> tuple[dict[str, Any], Usage]:
        scripted = self.rulebook.get("translate", {}).get(instruction)
        if scripted is not None:
            params = scripted
        else:
            try:
                params = templates.parse_instruction(OperatorTag.from_wire(operator), instruction)
            except templates.TemplateParseError as exc:
                raise BackendError(f"cannot translate instruction: {exc}") from exc
        return dict(params), _usage([instruction, schema, feedback], params)

    def prune_schema(
        self, question: str, table: str, columns: list[dict[str, Any]]
    ) -> tuple[list[str], Usage]:
        scripted = self.rulebook.get("prune", {}).get(f"{question}::{table}")
        if scripted is not None:
            return list(scripted), _usage([question, table, columns], scripted)
        q_tokens = set(re.findall(r"\w+", question.casefold()))
        kept = [
            str(c["name"])
            for c in columns
            if set(re.split(r"[_\W]+", str(c["name"]).casefold())) & q_tokens
        ]
        return kept, _usage([question, table, columns], kept)


# -- rule evaluation -----------------------------------------------------


def _match(rule: dict[str, Any], row: RowDict) -> bool:
    kind = rule.get("kind", "regex")
    cell = row.get(str(rule["column"]))
    if kind == "compare":
        return compare(cell, str(rule["op"]), rule.get("value"))
    if cell is None:
        return False
    return re.search(str(rule["pattern"]), str(cell), re.IGNORECASE) is not None


def _derive(rule: dict[str, Any], row: RowDict) -> Any:
    kind = rule.get("kind", "extract")
    cell = row.get(str(rule["column"]))
    if kind == "classify":
        if cell is not None:
            for cls in rule.get("classes", []):
                if re.search(str(cls["pattern"]), str(cell), re.IGNORECASE):
                    return cls["value"]
        return rule.get("default")
    if cell is None:
        return rule.get("default")
    m = re.search(str(rule["pattern"]), str(cell))
    if not m:
        return rule.get("default")
    value = m.group(1) if m.groups() else m.group(0)
    cast = rule.get("cast")
    if cast == "int":
        return int(value)
    if cast == "float":
        return float(value)
    return value


_PARTIAL_KEYS = {"sum", "count", "min", "max"}


def _merge_aggregate(rule: dict[str, Any], rows: list[RowDict]) -> dict[str, Any]:
    """Fold raw rows and partial summary rows into one running state."""
    column = str(rule.get("column", ""))
    state: dict[str, Any] = {"sum": 0, "count": 0, "min": None, "max": None}

    def absorb(value: Any, count: int = 1) -> None:
        if value is None:
            return
        state["sum"] += value if isinstance(value, (int, float)) else 0
        state["count"] += count
        state["min"] = value if state["min"] is None else min(state["min"], value)
        state["max"] = value if state["max"] is None else max(state["max"], value)

    for row in rows:
        if column and column in row:
            absorb(row.get(column))
        elif set(row) <= _PARTIAL_KEYS:
            state["sum"] += row.get("sum", 0)
            state["count"] += row.get("count", 0)
            for key, pick in (("min", min), ("max", max)):
                if row.get(key) is not None:
                    state[key] = row[key] if state[key] is None else pick(state[key], row[key])
        else:
            raise BackendError(f"aggregate rule expects column {column!r} or partial rows")
    return state


def _partial_row(rule: dict[str, Any], state: dict[str, Any]) -> RowDict:
    kind = str(rule["kind"])
    if kind == "avg":
        return {"sum": state["sum"], "count": state["count"]}
    if kind in ("sum", "count"):
        return {kind: state[kind]}
    return {kind: state[kind]}


def _final_value(rule: dict[str, Any], state: dict[str, Any]) -> Any:
    kind = str(rule["kind"])
    if kind == "avg":
        return state["sum"] / state["count"] if state["count"] else None
    return state[kind]
