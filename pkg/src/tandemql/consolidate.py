"""Selecting a final answer among executed candidate plans: majority
voting over normalized results, a judging backend, or delegation (return
everything and let the caller decide)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Optional, Sequence

from .errors import BackendError
from .relation import Relation
from .semantic import SemanticBackend, TokenAccounting
from . import prompts

log = logging.getLogger(__name__)

AnswerForm = dict[str, Any]  # {"columns": [...], "rows": [[...]]} with string cells


@dataclass
class CandidateResult:
    plan_id: str
    result: Relation
    normalized: AnswerForm
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_relation(
        cls, plan_id: str, result: Relation, metadata: dict[str, Any] | None = None
    ) -> "CandidateResult":
        return cls(plan_id, result, normalize_answer(result), metadata or {})

    def answer_text(self) -> str:
        return render_answer(self.normalized)


# -- normalization -----------------------------------------------------------


def normalize_cell(value: Any) -> str:
    """Canonical string rendering: trimmed, case-folded, canonical numbers."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if value.is_integer():
            return str(int(value))
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, datetime):
        return value.isoformat()
    return " ".join(str(value).split()).casefold()


def normalize_answer(relation: Relation) -> AnswerForm:
    """Column order canonicalized by name, rows sorted, cells normalized."""
    order = sorted(range(len(relation.column_names)), key=lambda i: relation.column_names[i])
    columns = [relation.column_names[i] for i in order]
    rows = sorted(tuple(normalize_cell(row[i]) for i in order) for row in relation.rows)
    return {"columns": [normalize_cell(c) for c in columns], "rows": [list(r) for r in rows]}


def normalize_form(form: AnswerForm) -> AnswerForm:
    """Re-normalizing a normalized form is the identity."""
    columns = [normalize_cell(c) for c in form.get("columns", [])]
    order = sorted(range(len(columns)), key=lambda i: columns[i])
    rows = sorted(
        tuple(normalize_cell(row[i]) for i in order) for row in form.get("rows", [])
    )
    return {"columns": [columns[i] for i in order], "rows": [list(r) for r in rows]}


def _form_key(form: AnswerForm) -> str:
    return json.dumps(form, sort_keys=True)


def render_answer(form: AnswerForm) -> str:
    if not form["rows"]:
        return "(0 rows)"
    if len(form["rows"]) == 1 and len(form["columns"]) == 1:
        return form["rows"][0][0]
    header = ", ".join(form["columns"])
    body = "; ".join("(" + ", ".join(r) + ")" for r in form["rows"])
    return f"[{header}] {body}"


# -- majority voting -----------------------------------------------------------


def majority_vote(
    candidates: Sequence[CandidateResult],
    mode: str = "exact",
    backend: Optional[SemanticBackend] = None,
    accounting: Optional[TokenAccounting] = None,
) -> CandidateResult:
    """Group candidates by answer equality and return the modal group's
    first member by plan id; ties go to the group holding the lowest
    plan id."""
    if not candidates:
        raise ValueError("majority_vote needs at least one candidate")
    if mode == "semantic" and backend is not None and len(candidates) > 1:
        groups = _semantic_groups(candidates, backend, accounting)
    else:
        keyed: dict[str, list[CandidateResult]] = {}
        for c in candidates:
            keyed.setdefault(_form_key(c.normalized), []).append(c)
        groups = list(keyed.values())

    def group_rank(group: list[CandidateResult]) -> tuple[int, str]:
        return (-len(group), min(c.plan_id for c in group))

    best = min(groups, key=group_rank)
    return min(best, key=lambda c: c.plan_id)


def _semantic_groups(
    candidates: Sequence[CandidateResult],
    backend: SemanticBackend,
    accounting: Optional[TokenAccounting],
) -> list[list[CandidateResult]]:
    n = len(candidates)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            same, usage = backend.equal(
                candidates[i].answer_text(), candidates[j].answer_text()
            )
            if accounting is not None:
                accounting.add("EQUAL", (1, 1), usage)
            if same:
                parent[find(i)] = find(j)
    grouped: dict[int, list[CandidateResult]] = {}
    for i, c in enumerate(candidates):
        grouped.setdefault(find(i), []).append(c)
    return list(grouped.values())


# -- judge selection -------------------------------------------------------------


JUDGE_SAMPLE_ROWS = 10


def judge_select(
    question: str,
    candidates: Sequence[CandidateResult],
    backend: SemanticBackend,
    retries: int = 2,
    examples_path: str | None = None,
    accounting: Optional[TokenAccounting] = None,
) -> CandidateResult:
    """Ask the judging backend to pick a candidate index; fall back to
    majority voting on failure or an out-of-range index."""
    if not candidates:
        raise ValueError("judge_select needs at least one candidate")
    if len(candidates) == 1:
        return candidates[0]

    examples = prompts.judge_examples(examples_path)
    payload = [
        {
            "index": i,
            "plan": c.plan_id,
            "steps": c.metadata.get("steps", []),
            "sample_rows": c.normalized["rows"][:JUDGE_SAMPLE_ROWS],
            "columns": c.normalized["columns"],
            "answer": c.answer_text(),
        }
        for i, c in enumerate(candidates)
    ]
    payload.append({"few_shot_examples": examples})

    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            index, usage = backend.judge(question, payload)
        except BackendError as exc:
            last = exc
            continue
        if accounting is not None:
            accounting.add("JUDGE", (len(candidates),), usage)
        if 0 <= index < len(candidates):
            return candidates[index]
        log.warning("judge returned index %d of %d; falling back to majority vote",
                    index, len(candidates))
        return majority_vote(candidates)
    log.warning("judge backend failed (%s); falling back to majority vote", last)
    return majority_vote(candidates)


# -- delegation -------------------------------------------------------------------


def delegate(question: str, candidates: Sequence[CandidateResult]) -> dict[str, Any]:
    """No selection: report every candidate with its lineage and token
    totals for the user to inspect."""
    if not candidates:
        raise ValueError("delegate needs at least one candidate")
    blocks = []
    for c in candidates:
        blocks.append(
            {
                "plan": c.plan_id,
                "columns": c.normalized["columns"],
                "rows": c.normalized["rows"],
                "row_count": len(c.normalized["rows"]),
                "answer": c.answer_text(),
                "tokens": c.metadata.get("tokens", {}),
                "lineage": c.metadata.get("lineage", []),
            }
        )
    return {"question": question, "mode": "delegate", "candidates": blocks}


def delegate_text(report: dict[str, Any]) -> str:
    lines = [f"question: {report['question']}"]
    for block in report["candidates"]:
        lines.append(f"--- {block['plan']} ---")
        tokens = block.get("tokens", {})
        lines.append(
            f"tokens: in={tokens.get('input_tokens', 0)} out={tokens.get('output_tokens', 0)}"
        )
        if not block["rows"]:
            lines.append("(0 rows)")
        else:
            lines.append(", ".join(block["columns"]))
            lines.extend("  " + ", ".join(r) for r in block["rows"])
    return "\n".join(lines)
