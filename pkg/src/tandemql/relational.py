"""Deterministic in-memory evaluation of the relational operator set.

Comparison semantics follow SQL's three-valued logic reduced to booleans:
any comparison against a null cell is false, except the explicit null
checks. Values only compare within their own type category (numbers,
strings, booleans, timestamps); cross-category comparisons are false.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Optional, Sequence

from .errors import ExecutionError, SchemaError
from .plan import OperatorTag, PlanStep
from .relation import AttributeKind, Cell, Column, Relation
from . import templates


@dataclass
class ExecEnv:
    """Base relations plus per-step materialized intermediates."""

    base: dict[str, Relation] = field(default_factory=dict)
    materialized: dict[str, Relation] = field(default_factory=dict)

    def resolve(self, ref: str) -> Relation:
        if ref in self.materialized:
            return self.materialized[ref]
        if ref in self.base:
            return self.base[ref]
        raise ExecutionError(f"no relation or step result named {ref!r}")


def materialize(step_id: str, relation: Relation, env: ExecEnv) -> ExecEnv:
    """Store a step result under its id; the stored copy is re-profiled so
    downstream cost and preview logic can read fresh statistics."""
    if step_id in env.materialized:
        raise ExecutionError(f"step {step_id!r} already materialized")
    env.materialized[step_id] = relation.with_rows(relation.rows, name=step_id)
    return env


# -- cell comparison -------------------------------------------------------


def _category(v: Cell) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "num"
    if isinstance(v, datetime):
        return "time"
    if isinstance(v, str):
        return "str"
    return type(v).__name__


def _coerce_pair(cell: Cell, value: Any) -> tuple[Any, Any] | None:
    """Align a literal with the cell's category; None when incomparable."""
    if isinstance(cell, datetime) and isinstance(value, str):
        try:
            value = datetime.fromisoformat(value)
        except ValueError:
            return None
    if _category(cell) != _category(value):
        return None
    return cell, value


def compare(cell: Cell, op: str, value: Any = None) -> bool:
    if op == "is null":
        return cell is None
    if op == "is not null":
        return cell is not None
    if cell is None:
        return False
    if op == "in":
        return any(compare(cell, "=", v) for v in (value or []))
    if op == "not in":
        return not any(compare(cell, "=", v) for v in (value or []))
    if op == "contains":
        return isinstance(cell, str) and str(value) in cell
    pair = _coerce_pair(cell, value)
    if pair is None:
        return False
    a, b = pair
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == ">":
        return a > b
    if op == "<=":
        return a <= b
    if op == ">=":
        return a >= b
    raise ExecutionError(f"unknown comparison operator {op!r}")


# -- arithmetic projection expressions --------------------------------------

_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.USub,
    ast.Name,
    ast.Constant,
    ast.Load,
)


def _compile_expr(expr: str) -> ast.Expression:
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ExecutionError(f"bad projection expression {expr!r}") from exc
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ExecutionError(f"unsupported construct in expression {expr!r}")
    return tree


def _eval_expr(tree: ast.Expression, scope: dict[str, Cell]) -> Cell:
    def run(node: ast.AST) -> Any:
        if isinstance(node, ast.Expression):
            return run(node.body)
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in scope:
                raise SchemaError(f"unknown column {node.id!r} in expression")
            return scope[node.id]
        if isinstance(node, ast.UnaryOp):
            v = run(node.operand)
            return None if v is None else -v
        if isinstance(node, ast.BinOp):
            left, right = run(node.left), run(node.right)
            if left is None or right is None:
                return None
            try:
                if isinstance(node.op, ast.Add):
                    return left + right
                if isinstance(node.op, ast.Sub):
                    return left - right
                if isinstance(node.op, ast.Mult):
                    return left * right
                return left / right
            except ZeroDivisionError:
                return None
        raise ExecutionError("unexpected expression node")

    return run(tree)


# -- join schema convention --------------------------------------------------


def join_output_columns(
    left: Sequence[str],
    right: Sequence[str],
    right_name: str,
    collapse: Optional[str] = None,
) -> list[tuple[str, str, str]]:
    """Output columns of a join as (out_name, side, source_column).

    Left columns keep their names. A same-named equi-join key (``collapse``)
    appears once, from the left side. Other right-side conflicts get the
    right input's name as a prefix.
    """
    out: list[tuple[str, str, str]] = [(c, "left", c) for c in left]
    taken = set(left)
    for c in right:
        if collapse is not None and c == collapse:
            continue
        name = c
        if name in taken:
            name = f"{right_name}_{c}"
        suffix = 2
        while name in taken:
            name = f"{right_name}_{c}_{suffix}"
            suffix += 1
        taken.add(name)
        out.append((name, "right", c))
    return out


# -- operator evaluation -----------------------------------------------------


def eval_relational(step: PlanStep, env: ExecEnv) -> Relation:
    """Evaluate one compiled relational step against materialized inputs."""
    if step.op.is_semantic:
        raise ExecutionError(f"{step.id}: semantic step routed to the relational engine")
    params = step.params
    if params is None:
        raise ExecutionError(f"{step.id}: step has no compiled params")

    if step.op is OperatorTag.SCAN:
        table = params.get("table") or step.source
        if not table:
            raise ExecutionError(f"{step.id}: SCAN names no base relation")
        if table not in env.base:
            raise ExecutionError(f"{step.id}: unknown base relation {table!r}")
        return env.base[str(table)]

    inputs = [env.resolve(p) for p in step.parents]
    if step.op is OperatorTag.FILTER:
        return _eval_filter(inputs[0], params)
    if step.op is OperatorTag.PROJECT:
        return _eval_project(inputs[0], params)
    if step.op is OperatorTag.AGGREGATE:
        return _eval_aggregate(inputs[0], params)
    if step.op is OperatorTag.JOIN:
        return _eval_join(inputs[0], inputs[1], params)
    if step.op is OperatorTag.SORT:
        return _eval_sort(inputs[0], params)
    if step.op is OperatorTag.LIMIT:
        return inputs[0].with_rows(inputs[0].rows[: max(int(params.get("n", 0)), 0)])
    if step.op is OperatorTag.SET_OP:
        return _eval_set_op(inputs[0], inputs[1], params)
    if step.op is OperatorTag.DISTINCT:
        return _eval_distinct(inputs[0], params)
    raise ExecutionError(f"{step.id}: unsupported operator {step.op.wire}")


def _eval_filter(rel: Relation, params: dict[str, Any]) -> Relation:
    idx = rel.column_index(str(params["column"]))
    op, value = str(params["op"]), params.get("value")
    return rel.with_rows(row for row in rel.rows if compare(row[idx], op, value))


def _eval_project(rel: Relation, params: dict[str, Any]) -> Relation:
    specs = params.get("columns") or []
    if not specs:
        raise ExecutionError("PROJECT with no columns")
    names = rel.column_names
    plan: list[tuple[str, AttributeKind, Any]] = []
    for spec in specs:
        out_name, expr = str(spec["name"]), str(spec.get("expr", spec["name"]))
        if expr in names:
            plan.append((out_name, rel.column(expr).kind, rel.column_index(expr)))
        else:
            plan.append((out_name, AttributeKind.NUMERIC, _compile_expr(expr)))
    rows = []
    for row in rel.rows:
        scope = dict(zip(names, row))
        cells = []
        for _, _, how in plan:
            cells.append(row[how] if isinstance(how, int) else _eval_expr(how, scope))
        rows.append(tuple(cells))
    return Relation.build(rel.name, [(n, k) for n, k, _ in plan], rows,
                          primary_key=tuple(k for k in rel.primary_key
                                            if k in {n for n, _, _ in plan}))


_NUMERIC_ONLY = {"sum", "avg"}


def _eval_aggregate(rel: Relation, params: dict[str, Any]) -> Relation:
    func = str(params["func"]).lower()
    column = str(params.get("column", "*"))
    group_by = [str(g) for g in params.get("group_by") or []]
    if func not in templates.AGG_FUNCS:
        raise ExecutionError(f"unknown aggregate function {func!r}")

    if column != "*":
        col_idx = rel.column_index(column)
        kind = rel.column(column).kind
        if func in _NUMERIC_ONLY and kind not in (AttributeKind.NUMERIC, AttributeKind.BOOLEAN):
            raise ExecutionError(f"{func} over non-numeric column {column!r}")
    else:
        if func != "count":
            raise ExecutionError(f"{func} requires a column")
        col_idx = None

    group_idx = [rel.column_index(g) for g in group_by]
    groups: dict[tuple, list] = {}
    order: list[tuple] = []
    for row in rel.rows:
        key = tuple(row[i] for i in group_idx)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)

    out_name = "count" if column == "*" else f"{func}_{column}"
    out_kind = (
        rel.column(column).kind
        if func in ("min", "max") and column != "*"
        else AttributeKind.NUMERIC
    )
    columns = [(g, rel.column(g).kind) for g in group_by] + [(out_name, out_kind)]

    def reduce_rows(rows: list) -> Cell:
        if col_idx is None:
            return len(rows)
        vals = [r[col_idx] for r in rows if r[col_idx] is not None]
        if func == "count":
            return len(vals)
        if not vals:
            return None
        if func == "sum":
            return sum(vals)
        if func == "avg":
            return sum(vals) / len(vals)
        return min(vals) if func == "min" else max(vals)

    if not group_by:
        return Relation.build(rel.name, columns, [(reduce_rows(list(rel.rows)),)])
    out_rows = [key + (reduce_rows(groups[key]),) for key in order]
    return Relation.build(rel.name, columns, out_rows)


def _eval_join(a: Relation, b: Relation, params: dict[str, Any]) -> Relation:
    left_key, right_key = str(params["left"]), str(params["right"])
    theta = str(params.get("op", "="))
    li, ri = a.column_index(left_key), b.column_index(right_key)

    collapse = right_key if theta == "=" and left_key == right_key else None
    layout = join_output_columns(a.column_names, b.column_names, b.name, collapse)
    right_src = [b.column_index(src) for _, side, src in layout if side == "right"]
    columns = [
        (name, (a.column(src).kind if side == "left" else b.column(src).kind))
        for name, side, src in layout
    ]

    rows = []
    if theta == "=":
        index: dict[Any, list[int]] = {}
        for j, row in enumerate(b.rows):
            key = row[ri]
            if key is None:
                continue
            index.setdefault(_hash_key(key), []).append(j)
        for row_a in a.rows:
            key = row_a[li]
            if key is None:
                continue
            for j in index.get(_hash_key(key), []):
                if compare(key, "=", b.rows[j][ri]):
                    rows.append(row_a + tuple(b.rows[j][k] for k in right_src))
    else:
        for row_a in a.rows:
            for row_b in b.rows:
                if compare(row_a[li], theta, row_b[ri]):
                    rows.append(row_a + tuple(row_b[k] for k in right_src))
    return Relation.build(a.name, columns, rows)


def _hash_key(v: Cell) -> Any:
    # 1 and 1.0 hash together in Python, matching numeric equality
    return (_category(v), v)


def _eval_sort(rel: Relation, params: dict[str, Any]) -> Relation:
    idx = rel.column_index(str(params["column"]))
    desc = str(params.get("direction", "asc")).lower() == "desc"
    non_null = [r for r in rel.rows if r[idx] is not None]
    nulls = [r for r in rel.rows if r[idx] is None]
    ordered = sorted(non_null, key=lambda r: r[idx], reverse=desc)
    return rel.with_rows(ordered + nulls)


def _eval_set_op(a: Relation, b: Relation, params: dict[str, Any]) -> Relation:
    if a.column_names != b.column_names:
        raise SchemaError(
            f"set operation over incompatible schemas {a.column_names} vs {b.column_names}"
        )
    kind = str(params.get("kind", "union")).lower()
    if kind == "union":
        return a.with_rows(list(a.rows) + list(b.rows))
    b_set = set(b.rows)
    seen: set = set()
    rows = []
    for row in a.rows:
        if row in seen:
            continue
        seen.add(row)
        if (kind == "intersection") == (row in b_set):
            rows.append(row)
    if kind not in ("intersection", "difference"):
        raise ExecutionError(f"unknown set operation {kind!r}")
    return a.with_rows(rows)


def _eval_distinct(rel: Relation, params: dict[str, Any]) -> Relation:
    cols = [str(c) for c in params.get("columns") or []] or list(rel.column_names)
    idx = [rel.column_index(c) for c in cols]
    seen: set = set()
    rows = []
    for row in rel.rows:
        key = tuple(row[i] for i in idx)
        if key not in seen:
            seen.add(key)
            rows.append(row)
    return rel.with_rows(rows)


# -- schema inference (shared with the optimizer) ----------------------------


def infer_output_columns(
    step: PlanStep, parent_columns: list[tuple[str, list[str]]]
) -> list[str]:
    """Column names a step will emit, given (input_name, columns) per parent.

    Mirrors the executor's naming rules without touching data, so plan
    rewrites can reason about column provenance.
    """
    op, params = step.op, step.params or {}
    if op is OperatorTag.SCAN:
        return list(parent_columns[0][1]) if parent_columns else []
    if op in (OperatorTag.FILTER, OperatorTag.SORT, OperatorTag.LIMIT,
              OperatorTag.DISTINCT, OperatorTag.SEM_FILTER):
        return list(parent_columns[0][1])
    if op is OperatorTag.PROJECT:
        return [str(c["name"]) for c in params.get("columns") or []]
    if op is OperatorTag.AGGREGATE:
        column = str(params.get("column", "*"))
        out = "count" if column == "*" else f"{params.get('func')}_{column}"
        return [str(g) for g in params.get("group_by") or []] + [out]
    if op is OperatorTag.JOIN:
        (_, left), (right_name, right) = parent_columns
        left_key, right_key = str(params.get("left")), str(params.get("right"))
        collapse = right_key if params.get("op", "=") == "=" and left_key == right_key else None
        return [name for name, _, _ in join_output_columns(left, right, right_name, collapse)]
    if op is OperatorTag.SET_OP:
        return list(parent_columns[0][1])
    if op is OperatorTag.SEM_MAP:
        new = _map_new_column(step)
        cols = list(parent_columns[0][1])
        return cols + ([new] if new and new not in cols else [])
    if op is OperatorTag.SEM_JOIN:
        (_, left), (_, right) = parent_columns
        return list(left) + [c for c in right if c not in left]
    if op is OperatorTag.SEM_AGGREGATE:
        return [str(g) for g in params.get("group_by") or []] + ["result"]
    raise ExecutionError(f"cannot infer schema for {op}")


def _map_new_column(step: PlanStep) -> Optional[str]:
    if step.params and step.params.get("new_column"):
        return str(step.params["new_column"])
    try:
        return str(templates.parse_instruction(OperatorTag.SEM_MAP, step.instruction)["new_column"])
    except Exception:
        return None
