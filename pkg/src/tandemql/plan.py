"""Plan DAG representation, the on-disk plan format, validation, scheduling.

A plan is a DAG of atomic steps. Each step carries the natural-language
instruction it was generated with and, once compiled, the structured
params the deterministic executor actually reads.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Optional

from .errors import PlanError

log = logging.getLogger(__name__)


class OpClass(Enum):
    RELATIONAL = "relational"
    SEMANTIC = "semantic"


class OperatorTag(Enum):
    """The operator universe. ``wire`` is the name used in plan documents."""

    SCAN = ("SCAN", OpClass.RELATIONAL)
    FILTER = ("FILTER", OpClass.RELATIONAL)
    PROJECT = ("PROJECT", OpClass.RELATIONAL)
    AGGREGATE = ("AGGREGATE", OpClass.RELATIONAL)
    JOIN = ("JOIN", OpClass.RELATIONAL)
    SORT = ("SORT", OpClass.RELATIONAL)
    LIMIT = ("LIMIT", OpClass.RELATIONAL)
    SET_OP = ("SET_OP", OpClass.RELATIONAL)
    DISTINCT = ("DISTINCT", OpClass.RELATIONAL)
    SEM_MAP = ("LLM_DERIVE", OpClass.SEMANTIC)
    SEM_FILTER = ("LLM_FILTER", OpClass.SEMANTIC)
    SEM_JOIN = ("LLM_JOIN", OpClass.SEMANTIC)
    SEM_AGGREGATE = ("LLM_AGGREGATE", OpClass.SEMANTIC)

    def __init__(self, wire: str, op_class: OpClass):
        self.wire = wire
        self.op_class = op_class

    @property
    def is_semantic(self) -> bool:
        return self.op_class is OpClass.SEMANTIC

    @classmethod
    def from_wire(cls, name: str) -> "OperatorTag":
        for tag in cls:
            if tag.wire == name.strip().upper():
                return tag
        raise PlanError(f"unknown operator {name!r}")


BINARY_OPS = {OperatorTag.JOIN, OperatorTag.SET_OP, OperatorTag.SEM_JOIN}


@dataclass(frozen=True)
class PlanStep:
    """One atomic step. ``source`` names a base relation for SCAN steps whose
    document-level parent entry was a table name rather than a step id."""

    id: str
    op: OperatorTag
    instruction: str
    parents: tuple[str, ...] = ()
    params: Optional[dict[str, Any]] = None
    source: Optional[str] = None

    def with_(self, **changes: Any) -> "PlanStep":
        return replace(self, **changes)


@dataclass(frozen=True)
class PlanDag:
    steps: tuple[PlanStep, ...]
    output: str

    @classmethod
    def from_steps(cls, steps: Iterable[PlanStep]) -> "PlanDag":
        """Build a dag, picking the unique sink; falls back to the last step
        when the sink is ambiguous (validate() will flag that)."""
        steps = tuple(steps)
        if not steps:
            raise PlanError("plan has no steps")
        referenced = {p for s in steps for p in s.parents}
        sinks = [s.id for s in steps if s.id not in referenced]
        output = sinks[0] if len(sinks) == 1 else steps[-1].id
        return cls(steps, output)

    def step(self, step_id: str) -> PlanStep:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise PlanError(f"no step {step_id!r} in plan")

    def has_step(self, step_id: str) -> bool:
        return any(s.id == step_id for s in self.steps)

    def consumers(self, step_id: str) -> list[PlanStep]:
        return [s for s in self.steps if step_id in s.parents]

    def replace_steps(self, steps: Iterable[PlanStep]) -> "PlanDag":
        return PlanDag.from_steps(steps)

    @property
    def sink(self) -> PlanStep:
        return self.step(self.output)

    def step_ids(self) -> list[str]:
        return [s.id for s in self.steps]


# -- validation ----------------------------------------------------------


@dataclass
class ValidationResult:
    issues: list[tuple[str, str, str]] = field(default_factory=list)

    def add(self, kind: str, step_id: str, message: str) -> None:
        self.issues.append((kind, step_id, message))

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> set[str]:
        return {k for k, _, _ in self.issues}


_CONNECTIVE_RE = re.compile(r"\b(AND|OR)\b")


def validate(dag: PlanDag) -> ValidationResult:
    """Report cycles, dangling parents, arity violations, multi-condition
    filters, and sink ambiguity. Diagnostics, never exceptions."""
    result = ValidationResult()
    ids = {s.id for s in dag.steps}
    if len(ids) != len(dag.steps):
        seen: set[str] = set()
        for s in dag.steps:
            if s.id in seen:
                result.add("duplicate_id", s.id, "step id reused")
            seen.add(s.id)

    for s in dag.steps:
        for p in s.parents:
            if p not in ids:
                result.add("dangling_parent", s.id, f"parent {p!r} does not exist")
        expected = 2 if s.op in BINARY_OPS else (0 if s.op is OperatorTag.SCAN else 1)
        if len(s.parents) != expected:
            result.add(
                "arity",
                s.id,
                f"{s.op.wire} takes {expected} parent(s), has {len(s.parents)}",
            )
        if s.op is OperatorTag.SCAN and not s.source and not (s.params or {}).get("table"):
            result.add("arity", s.id, "SCAN names no base relation")
        _check_atomicity(s, result)

    if _has_cycle(dag):
        result.add("cycle", dag.output, "plan contains a dependency cycle")
    else:
        referenced = {p for s in dag.steps for p in s.parents}
        sinks = [s.id for s in dag.steps if s.id not in referenced]
        if len(sinks) != 1:
            result.add("sink", dag.output, f"expected exactly one sink, found {len(sinks)}")
    return result


def _check_atomicity(step: PlanStep, result: ValidationResult) -> None:
    if step.op is not OperatorTag.FILTER:
        return
    if step.params:
        conditions = step.params.get("conditions")
        if isinstance(conditions, list) and len(conditions) > 1:
            result.add("atomicity", step.id, "filter carries more than one condition")
            return
        for value in step.params.values():
            if isinstance(value, str) and _CONNECTIVE_RE.search(value):
                result.add("atomicity", step.id, f"compound condition {value!r}")
                return
    elif _CONNECTIVE_RE.search(step.instruction):
        result.add("atomicity", step.id, "compound condition in instruction")


def _has_cycle(dag: PlanDag) -> bool:
    ids = {s.id for s in dag.steps}
    color: dict[str, int] = {}

    def visit(step_id: str) -> bool:
        state = color.get(step_id, 0)
        if state == 1:
            return True
        if state == 2:
            return False
        color[step_id] = 1
        step = dag.step(step_id)
        for p in step.parents:
            if p in ids and visit(p):
                return True
        color[step_id] = 2
        return False

    return any(visit(s.id) for s in dag.steps)


# -- scheduling ----------------------------------------------------------


def topo_schedule(dag: PlanDag) -> list[list[str]]:
    """Longest-path layering: steps in the same layer are independent and the
    concatenation of layers is a topological order."""
    if _has_cycle(dag):
        raise PlanError("cannot schedule a cyclic plan")
    level: dict[str, int] = {}

    def depth(step_id: str) -> int:
        if step_id in level:
            return level[step_id]
        step = dag.step(step_id)
        parents = [p for p in step.parents if dag.has_step(p)]
        level[step_id] = 0 if not parents else 1 + max(depth(p) for p in parents)
        return level[step_id]

    for s in dag.steps:
        depth(s.id)
    layers: list[list[str]] = [[] for _ in range(max(level.values()) + 1)] if level else []
    for step_id, lv in level.items():
        layers[lv].append(step_id)
    for layer in layers:
        layer.sort()
    return layers


# -- on-disk format --------------------------------------------------------


def parse_plan(
    document: bytes | str, diagnostics: list[str] | None = None
) -> list[PlanDag]:
    """Parse a plan document ({"plans": [...]}) into validated PlanDags.

    Individual plans that fail validation (unknown operators, dangling
    parents, cycles, ...) are dropped with a diagnostic; the rest are kept.
    Raises PlanError when the document itself is unusable or no plan entry
    exists.
    """
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanError(f"plan document is not valid JSON: {exc.msg}") from exc
    entries = payload.get("plans") if isinstance(payload, dict) else None
    if not entries:
        raise PlanError("plan document contains no plans")

    sink: list[str] = diagnostics if diagnostics is not None else []
    dags: list[PlanDag] = []
    for i, entry in enumerate(entries):
        try:
            dag = _parse_plan_entry(entry)
        except PlanError as exc:
            sink.append(f"plan {i}: {exc}")
            log.warning("dropping plan %d: %s", i, exc)
            continue
        check = validate(dag)
        if not check.ok:
            kind, step_id, message = check.issues[0]
            sink.append(f"plan {i}: {kind} at {step_id}: {message}")
            log.warning("dropping plan %d: %s at %s: %s", i, kind, step_id, message)
            continue
        dags.append(dag)
    return dags


def _parse_plan_entry(entry: Any) -> PlanDag:
    if not isinstance(entry, dict) or not isinstance(entry.get("steps"), list):
        raise PlanError("plan entry has no step list")
    raw_steps = entry["steps"]
    if not raw_steps:
        raise PlanError("plan entry has no steps")
    ids = {str(s.get("id")) for s in raw_steps if isinstance(s, dict)}

    steps = []
    for raw in raw_steps:
        if not isinstance(raw, dict):
            raise PlanError("step entry is not an object")
        step_id = str(raw.get("id") or "").strip()
        if not step_id:
            raise PlanError("step without an id")
        op = OperatorTag.from_wire(str(raw.get("operator") or ""))
        instruction = str(raw.get("action") or "").strip()
        parent_field = raw.get("parent") or raw.get("parents") or []
        if isinstance(parent_field, str):
            parent_field = [parent_field]
        parents, source = _split_parents(op, [str(p) for p in parent_field], ids)
        params = raw.get("params") if isinstance(raw.get("params"), dict) else None
        steps.append(
            PlanStep(step_id, op, instruction, tuple(parents), params, source)
        )
    return PlanDag.from_steps(steps)


def _split_parents(
    op: OperatorTag, entries: list[str], step_ids: set[str]
) -> tuple[list[str], Optional[str]]:
    """SCAN parent entries that are not step ids name the base relation."""
    if op is not OperatorTag.SCAN:
        return entries, None
    parents = [p for p in entries if p in step_ids]
    tables = [p for p in entries if p not in step_ids]
    return parents, (tables[0] if tables else None)


def serialize_plans(dags: Iterable[PlanDag]) -> bytes:
    """Emit the external plan document. Compiled steps additionally carry a
    "params" key so an optimized plan file round-trips losslessly."""
    plans = []
    for dag in dags:
        steps = []
        for s in dag.steps:
            entry: dict[str, Any] = {
                "id": s.id,
                "operator": s.op.wire,
                "action": s.instruction,
                "parent": list(s.parents) if s.parents else ([s.source] if s.source else []),
            }
            if s.params is not None:
                entry["params"] = s.params
            steps.append(entry)
        plans.append({"steps": steps})
    return json.dumps({"plans": plans}, indent=2, ensure_ascii=False).encode("utf-8")
