"""Query-aware preprocessing, plan generation, and instruction compilation.

The planner narrows each relation to question-relevant columns, builds a
data preview (semantically retrieved rows plus random samples), asks the
backend for up to K candidate plans, and compiles relational instructions
into structured params with a validation-feedback retry loop.
"""

from __future__ import annotations

import json
import logging
import math
import random
import zlib
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Mapping, Optional, Sequence

from .errors import BackendError, PlanError, PlanningError
from .plan import OperatorTag, PlanDag, PlanStep, parse_plan, validate
from .relation import AttributeKind, Relation
from .relational import join_output_columns
from .semantic import SemanticBackend, TokenAccounting
from . import prompts, templates

log = logging.getLogger(__name__)

DIMENSIONS = ("SchemaMapping", "RiskProfile", "OperatorSubstitution", "SemanticIntent")

_DIMENSION_LINE = {
    "SchemaMapping": 0,
    "RiskProfile": 1,
    "OperatorSubstitution": 2,
    "SemanticIntent": 3,
}


@dataclass
class DiversificationStrategy:
    """Which diversification axes go into the planning prompt. ``naive``
    empties the strategy text entirely (the ablation path) while keeping
    the dimension invariants intact."""

    dimensions: tuple[str, ...] = DIMENSIONS
    K: int = 6
    naive: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise PlanningError("plan count K must be >= 1")
        unknown = set(self.dimensions) - set(DIMENSIONS)
        if unknown:
            raise PlanningError(f"unknown diversification dimensions {sorted(unknown)}")
        if self.K > 1 and not self.dimensions and not self.naive:
            raise PlanningError("diversification needs at least one dimension for K > 1")

    def strategy_text(self) -> str:
        if self.naive or not self.dimensions:
            return ""
        lines = prompts.load("diversification.txt").strip().splitlines()
        picked = sorted(_DIMENSION_LINE[d] for d in self.dimensions)
        return "\n".join(lines[i] for i in picked)


@dataclass
class QueryContext:
    question: str
    pruned_schema: dict[str, list[str]] = field(default_factory=dict)
    preview: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    k1: int = 5
    k2: int = 5
    refined_db: dict[str, Relation] = field(default_factory=dict)


# -- semantic schema pruning ---------------------------------------------------


def _column_payload(rel: Relation) -> list[dict[str, Any]]:
    payload = []
    for col in rel.columns:
        p = col.profile
        if col.kind is AttributeKind.TEXTUAL and p.sample_snippets:
            samples: list[Any] = list(p.sample_snippets)
        elif p.top_k_values:
            samples = [v for v, _ in p.top_k_values[:3]]
        else:
            samples = [c for c in rel.column_values(col.name)[:3] if c is not None]
        payload.append({"name": col.name, "type": col.kind.value, "samples": samples})
    return payload


def _backend_call(fn, retries: int, what: str, accounting: Optional[TokenAccounting],
                  operator: str, size: int = 1):
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            result, usage = fn()
        except BackendError as exc:
            last = exc
            continue
        if accounting is not None:
            accounting.add(operator, (size,), usage)
        return result
    raise BackendError(f"{what} failed after {retries} retries: {last}") from last


def semantic_prune_schema(
    db: Mapping[str, Relation],
    question: str,
    backend: SemanticBackend,
    retries: int = 2,
    accounting: Optional[TokenAccounting] = None,
) -> dict[str, list[str]]:
    """Ask the backend which columns matter for the question, one call per
    relation. Key columns are always retained; hallucinated column names
    are dropped with a diagnostic."""
    kept: dict[str, list[str]] = {}
    for name in sorted(db):
        rel = db[name]
        columns = _column_payload(rel)
        chosen = _backend_call(
            lambda: backend.prune_schema(question, name, columns),
            retries,
            f"schema pruning for {name}",
            accounting,
            "PRUNE",
            len(columns),
        )
        valid = []
        for col in chosen:
            if rel.has_column(str(col)):
                valid.append(str(col))
            else:
                log.warning("pruning response named unknown column %r on %s; dropped", col, name)
        for key in sorted(rel.key_columns()):
            if key not in valid and rel.has_column(key):
                valid.append(key)
        ordered = [c.name for c in rel.columns if c.name in set(valid)]
        kept[name] = ordered or list(rel.column_names)
    return kept


def apply_pruned_schema(
    db: Mapping[str, Relation], pruned: Mapping[str, Sequence[str]]
) -> dict[str, Relation]:
    refined = {}
    for name, rel in db.items():
        keep = [c for c in rel.column_names if c in set(pruned.get(name, rel.column_names))]
        if set(keep) == set(rel.column_names):
            refined[name] = rel
            continue
        idx = [rel.column_index(c) for c in keep]
        refined[name] = Relation.build(
            name,
            [(rel.columns[i].name, rel.columns[i].kind) for i in idx],
            [tuple(row[i] for i in idx) for row in rel.rows],
            primary_key=tuple(k for k in rel.primary_key if k in set(keep)),
            foreign_keys={k: v for k, v in rel.foreign_keys.items() if k in set(keep)},
        )
    return refined


# -- query-aware preview -------------------------------------------------------


def _serialize_row(rel: Relation, row: tuple) -> str:
    return " | ".join(f"{c}: {v}" for c, v in zip(rel.column_names, row) if v is not None)


def _cosine(a: dict[str, float], b: dict[str, float]) -> float:
    if not a or not b:
        return 0.0
    dot = sum(v * b.get(k, 0.0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return dot / (na * nb) if na and nb else 0.0


def build_preview(
    rel: Relation,
    question: str,
    k1: int,
    k2: int,
    backend: SemanticBackend,
    seed: int = 0,
    retries: int = 2,
    accounting: Optional[TokenAccounting] = None,
) -> list[dict[str, Any]]:
    """Top-k1 rows by embedding similarity to the question plus k2 random
    rows (fixed seed); duplicates keep the semantic copy."""
    if not rel.rows:
        return []
    rng = random.Random(seed ^ zlib.crc32(rel.name.encode()))
    if len(rel.rows) <= k1 + k2:
        return rel.row_dicts()

    semantic_idx: list[int] = []
    if k1 > 0:
        try:
            q_vec = _backend_call(
                lambda: backend.embed(question), retries, "question embedding",
                accounting, "EMBED",
            )
            scored = []
            for i, row in enumerate(rel.rows):
                vec = _backend_call(
                    lambda r=row: backend.embed(_serialize_row(rel, r)),
                    retries,
                    "row embedding",
                    accounting,
                    "EMBED",
                )
                scored.append((-_cosine(q_vec, vec), i))
            scored.sort()
            semantic_idx = [i for _, i in scored[:k1]]
        except BackendError:
            log.warning(
                "embedding backend failed for %s; falling back to %d random rows",
                rel.name,
                2 * k2,
            )
            fallback = rng.sample(range(len(rel.rows)), min(2 * k2, len(rel.rows)))
            return [dict(zip(rel.column_names, rel.rows[i])) for i in fallback]

    taken = set(semantic_idx)
    random_idx = [i for i in rng.sample(range(len(rel.rows)), min(k2, len(rel.rows))) if i not in taken]
    picked = semantic_idx + random_idx
    return [dict(zip(rel.column_names, rel.rows[i])) for i in picked]


def build_query_context(
    db: Mapping[str, Relation],
    question: str,
    backend: SemanticBackend,
    k1: int = 5,
    k2: int = 5,
    seed: int = 0,
    retries: int = 2,
    accounting: Optional[TokenAccounting] = None,
    prune: bool = True,
) -> QueryContext:
    if prune:
        pruned = semantic_prune_schema(db, question, backend, retries, accounting)
    else:
        pruned = {name: list(rel.column_names) for name, rel in db.items()}
    refined = apply_pruned_schema(db, pruned)
    preview = {
        name: build_preview(refined[name], question, k1, k2, backend, seed, retries, accounting)
        for name in sorted(refined)
    }
    return QueryContext(
        question=question,
        pruned_schema={k: list(v) for k, v in pruned.items()},
        preview=preview,
        k1=k1,
        k2=k2,
        refined_db=refined,
    )


# -- decomposition ---------------------------------------------------------------


def _preview_text(ctx: QueryContext) -> str:
    blocks = []
    for name in sorted(ctx.refined_db):
        rel = ctx.refined_db[name]
        header = f"table {name} ({', '.join(rel.column_names)})"
        rows = [json.dumps(r, default=str) for r in ctx.preview.get(name, [])]
        blocks.append("\n".join([header] + rows))
    return "\n\n".join(blocks)


def ground_and_decompose(
    ctx: QueryContext,
    strategy: DiversificationStrategy,
    backend: SemanticBackend,
    retries: int = 2,
    accounting: Optional[TokenAccounting] = None,
) -> list[PlanDag]:
    """One backend planning call; invalid plans are dropped and whatever
    validates survives, up to K."""
    system = prompts.render(
        "decompose_system.txt",
        k=strategy.K,
        diversification_strategy=strategy.strategy_text() or "(none: produce your single best plan)",
    )
    user = prompts.render(
        "decompose_user.txt", data_preview=_preview_text(ctx), question=ctx.question
    )
    context = f"{system}\n\n{user}"
    document = _backend_call(
        lambda: backend.plan(ctx.question, context, strategy.K),
        retries,
        "plan decomposition",
        accounting,
        "PLAN",
    )
    diagnostics: list[str] = []
    try:
        plans = parse_plan(document, diagnostics)
    except PlanError as exc:
        raise PlanningError(f"planning produced no usable document: {exc}") from exc
    for note in diagnostics:
        log.warning("dropped candidate plan: %s", note)
    if not plans:
        raise PlanningError("no valid plan survived decomposition")
    return plans[: strategy.K]


# -- instruction compilation ------------------------------------------------------


def _kinds_of(schema: Sequence[tuple[str, AttributeKind]]) -> dict[str, AttributeKind]:
    return {name: kind for name, kind in schema}


def _literal_ok(kind: AttributeKind, value: Any) -> bool:
    if value is None:
        return True
    if kind is AttributeKind.NUMERIC:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is AttributeKind.BOOLEAN:
        return isinstance(value, bool)
    if kind is AttributeKind.TEMPORAL:
        if isinstance(value, datetime):
            return True
        if isinstance(value, str):
            try:
                datetime.fromisoformat(value)
                return True
            except ValueError:
                return False
        return False
    return isinstance(value, str)


def validate_params(
    op: OperatorTag,
    params: dict[str, Any],
    input_schemas: Sequence[Sequence[tuple[str, AttributeKind]]],
) -> list[str]:
    """Structural and type checks for compiled params; returns problems."""
    errors: list[str] = []
    first = _kinds_of(input_schemas[0]) if input_schemas else {}

    def need_column(col: Any, where: dict[str, AttributeKind], label: str) -> None:
        if str(col) not in where:
            errors.append(f"{label} {col!r} does not exist; available: {sorted(where)}")

    if op is OperatorTag.FILTER:
        if "column" not in params or "op" not in params:
            errors.append("filter params need 'column' and 'op'")
            return errors
        if isinstance(params.get("conditions"), list) and len(params["conditions"]) > 1:
            errors.append("filter must carry exactly one condition")
        cmp = str(params["op"])
        if cmp not in templates.COMPARISON_OPS:
            errors.append(f"unknown comparison operator {cmp!r}")
        need_column(params["column"], first, "filter column")
        if not errors:
            kind = first[str(params["column"])]
            value = params.get("value")
            if cmp in ("in", "not in"):
                if not isinstance(value, list):
                    errors.append("'in' conditions need a list value")
                elif not all(_literal_ok(kind, v) for v in value):
                    errors.append(f"list values do not match the {kind.value} column")
            elif cmp in ("is null", "is not null"):
                pass
            elif cmp == "contains":
                if not isinstance(value, str):
                    errors.append("'contains' needs a string literal")
            elif isinstance(value, str) and _CONNECTIVE(value):
                errors.append(f"compound condition {value!r}: one condition per step")
            elif not _literal_ok(kind, value):
                errors.append(f"literal {value!r} does not match the {kind.value} column")
    elif op is OperatorTag.PROJECT:
        specs = params.get("columns")
        if not specs:
            errors.append("project params need a 'columns' list")
        else:
            for spec in specs:
                expr = str(spec.get("expr", spec.get("name")))
                if expr not in first and not _expr_columns_exist(expr, first):
                    errors.append(f"projection expression {expr!r} references unknown columns")
    elif op is OperatorTag.AGGREGATE:
        if str(params.get("func", "")).lower() not in templates.AGG_FUNCS:
            errors.append(f"unknown aggregate function {params.get('func')!r}")
        column = str(params.get("column", "*"))
        if column != "*":
            need_column(column, first, "aggregate column")
        for g in params.get("group_by") or []:
            need_column(g, first, "grouping column")
    elif op is OperatorTag.SORT:
        need_column(params.get("column"), first, "sort column")
        if str(params.get("direction", "asc")).lower() not in ("asc", "desc"):
            errors.append("sort direction must be asc or desc")
    elif op is OperatorTag.LIMIT:
        n = params.get("n")
        if not isinstance(n, int) or isinstance(n, bool) or n < 0:
            errors.append("limit needs a nonnegative integer n")
    elif op is OperatorTag.JOIN:
        if len(input_schemas) != 2:
            errors.append("join needs two input schemas")
        else:
            second = _kinds_of(input_schemas[1])
            need_column(params.get("left"), first, "left join column")
            need_column(params.get("right"), second, "right join column")
    elif op is OperatorTag.SET_OP:
        if str(params.get("kind", "")).lower() not in templates.SET_KINDS:
            errors.append(f"unknown set operation {params.get('kind')!r}")
    elif op is OperatorTag.DISTINCT:
        for c in params.get("columns") or []:
            need_column(c, first, "distinct column")
    elif op is OperatorTag.SCAN:
        if not params.get("table"):
            errors.append("scan params need a 'table'")
    return errors


def _CONNECTIVE(text: str) -> bool:
    import re

    return re.search(r"\b(AND|OR)\b", text) is not None


def _expr_columns_exist(expr: str, kinds: dict[str, AttributeKind]) -> bool:
    import re

    names = re.findall(r"[A-Za-z_]\w*", expr)
    return bool(names) and all(n in kinds for n in names)


def compile_instruction(
    step: PlanStep,
    schemas: Sequence[Sequence[tuple[str, AttributeKind]]],
    previews: Sequence[Sequence[dict[str, Any]]],
    backend: SemanticBackend,
    max_retries: int = 3,
    accounting: Optional[TokenAccounting] = None,
) -> PlanStep:
    """Translate one relational instruction to structured params, feeding
    validation errors back to the backend until they clear or retries run
    out."""
    if step.op.is_semantic:
        raise PlanningError(f"{step.id}: semantic steps are not compiled")
    if step.params is not None:
        return step
    schema_payload = [
        [{"name": n, "type": k.value} for n, k in schema] for schema in schemas
    ]
    feedback: list[str] = []
    for _ in range(max_retries):
        try:
            params, usage = backend.translate(
                step.instruction, step.op.wire, schema_payload, list(feedback)
            )
        except BackendError as exc:
            feedback.append(str(exc))
            continue
        if accounting is not None:
            accounting.add("TRANSLATE", (1,), usage)
        problems = validate_params(step.op, params, schemas)
        if not problems:
            return step.with_(params=params)
        feedback.extend(problems)
    raise PlanningError(
        f"{step.id}: could not compile {step.instruction!r} after {max_retries} attempts; "
        f"errors: {feedback}"
    )


def compile_plan(
    dag: PlanDag,
    base: Mapping[str, Relation],
    backend: SemanticBackend,
    previews: Mapping[str, list[dict[str, Any]]] | None = None,
    max_retries: int = 3,
    accounting: Optional[TokenAccounting] = None,
) -> PlanDag:
    """Compile every relational step of a plan, propagating output schemas
    (names and kinds) so downstream steps validate against real columns."""
    from .plan import topo_schedule

    previews = previews or {}
    schemas: dict[str, list[tuple[str, AttributeKind]]] = {}
    compiled: dict[str, PlanStep] = {}
    for layer in topo_schedule(dag):
        for sid in layer:
            step = dag.step(sid)
            if step.op is OperatorTag.SCAN and step.params is None:
                table = step.source or _scan_table(step)
                step = step.with_(params={"table": table})
            if step.op.is_semantic:
                from .pipeline import ensure_semantic_params

                step = ensure_semantic_params(step)
            elif step.params is None:
                parent_schemas = [schemas[p] for p in step.parents]
                parent_previews = [list(previews.get(p, [])) for p in step.parents]
                step = compile_instruction(
                    step, parent_schemas, parent_previews, backend, max_retries, accounting
                )
            elif step.op is not OperatorTag.SCAN:
                problems = validate_params(step.op, step.params, [schemas[p] for p in step.parents])
                if problems:
                    raise PlanningError(f"{sid}: invalid params: {problems}")
            compiled[sid] = step
            schemas[sid] = _output_schema(step, schemas, base)
    return dag.replace_steps([compiled[s.id] for s in dag.steps])


def _scan_table(step: PlanStep) -> str:
    try:
        return str(templates.parse_instruction(OperatorTag.SCAN, step.instruction)["table"])
    except templates.TemplateParseError as exc:
        raise PlanningError(f"{step.id}: SCAN names no base relation") from exc


def _output_schema(
    step: PlanStep,
    schemas: Mapping[str, list[tuple[str, AttributeKind]]],
    base: Mapping[str, Relation],
) -> list[tuple[str, AttributeKind]]:
    params = step.params or {}
    op = step.op
    if op is OperatorTag.SCAN:
        table = str(params.get("table") or step.source)
        if table not in base:
            raise PlanningError(f"{step.id}: unknown base relation {table!r}")
        rel = base[table]
        return [(c.name, c.kind) for c in rel.columns]
    parents = [schemas[p] for p in step.parents]
    first = parents[0]
    if op in (OperatorTag.FILTER, OperatorTag.SORT, OperatorTag.LIMIT,
              OperatorTag.DISTINCT, OperatorTag.SEM_FILTER, OperatorTag.SET_OP):
        return list(first)
    if op is OperatorTag.PROJECT:
        kinds = _kinds_of(first)
        out = []
        for spec in params.get("columns", []):
            expr = str(spec.get("expr", spec["name"]))
            out.append((str(spec["name"]), kinds.get(expr, AttributeKind.NUMERIC)))
        return out
    if op is OperatorTag.AGGREGATE:
        kinds = _kinds_of(first)
        column = str(params.get("column", "*"))
        func = str(params.get("func"))
        out_name = "count" if column == "*" else f"{func}_{column}"
        out_kind = kinds.get(column, AttributeKind.NUMERIC) if func in ("min", "max") else AttributeKind.NUMERIC
        return [(g, kinds[g]) for g in (params.get("group_by") or []) if g in kinds] + [
            (out_name, out_kind)
        ]
    if op is OperatorTag.JOIN:
        left, right = parents
        collapse = (
            str(params.get("right"))
            if params.get("op", "=") == "=" and params.get("left") == params.get("right")
            else None
        )
        layout = join_output_columns(
            [n for n, _ in left], [n for n, _ in right], step.parents[1], collapse
        )
        left_k, right_k = _kinds_of(left), _kinds_of(right)
        return [
            (name, left_k[src] if side == "left" else right_k[src])
            for name, side, src in layout
        ]
    if op is OperatorTag.SEM_MAP:
        new = params.get("new_column")
        out = list(first)
        if new and str(new) not in {n for n, _ in out}:
            out.append((str(new), AttributeKind.TEXTUAL))
        return out
    if op is OperatorTag.SEM_JOIN:
        left, right = parents
        names = {n for n, _ in left}
        return list(left) + [(n, k) for n, k in right if n not in names]
    if op is OperatorTag.SEM_AGGREGATE:
        kinds = _kinds_of(first)
        return [(g, kinds[g]) for g in (params.get("group_by") or []) if g in kinds] + [
            ("result", AttributeKind.TEXTUAL)
        ]
    raise PlanningError(f"{step.id}: cannot derive output schema")
