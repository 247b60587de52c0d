"""Instruction templates: render structured params to the operator's
instruction phrasing and parse instructions back into params.

The parser is deliberately strict; an instruction that strays from the
template raises TemplateParseError so compilation can ask the backend to
retry with error feedback.
"""

from __future__ import annotations

import re
from typing import Any

from .errors import PlanError
from .plan import OperatorTag

COMPARISON_OPS = [
    "is not null",
    "is null",
    "not in",
    "in",
    ">=",
    "<=",
    "!=",
    "=",
    ">",
    "<",
    "contains",
]

AGG_FUNCS = {"max", "min", "count", "sum", "avg"}
SET_KINDS = {"union", "intersection", "difference"}


class TemplateParseError(PlanError):
    pass


# -- value helpers -------------------------------------------------------


def render_value(value: Any) -> str:
    if isinstance(value, str):
        return f"'{value}'"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "(" + ", ".join(render_value(v) for v in value) + ")"
    return str(value)


def parse_value(text: str) -> Any:
    token = text.strip()
    if token.startswith("(") and token.endswith(")"):
        inner = token[1:-1].strip()
        return [parse_value(t) for t in _split_commas(inner)] if inner else []
    if len(token) >= 2 and token[0] == token[-1] and token[0] in ("'", '"'):
        return token[1:-1]
    if token.lower() == "true":
        return True
    if token.lower() == "false":
        return False
    if token.lower() in ("null", "none"):
        return None
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def _split_commas(text: str) -> list[str]:
    parts, depth, quote, start = [], 0, "", 0
    for i, ch in enumerate(text):
        if quote:
            if ch == quote:
                quote = ""
            continue
        if ch in ("'", '"'):
            quote = ch
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    parts.append(text[start:])
    return [p for p in (s.strip() for s in parts) if p]


def parse_condition(text: str) -> dict[str, Any]:
    """Split "col OP value" into filter params; null checks carry no value."""
    body = text.strip().rstrip(".")
    for op in COMPARISON_OPS:
        pattern = re.compile(
            rf"^(?P<col>\S+)\s+{re.escape(op)}(?:\s+(?P<value>.+))?$", re.IGNORECASE
        )
        m = pattern.match(body)
        if not m:
            continue
        params: dict[str, Any] = {"column": m.group("col"), "op": op}
        value_text = m.group("value")
        if op in ("is null", "is not null"):
            if value_text:
                continue
            return params
        if value_text is None:
            continue
        params["value"] = parse_value(value_text)
        return params
    raise TemplateParseError(f"cannot parse condition {text!r}")


def render_condition(params: dict[str, Any]) -> str:
    op = params["op"]
    if op in ("is null", "is not null"):
        return f"{params['column']} {op}"
    return f"{params['column']} {op} {render_value(params.get('value'))}"


# -- rendering -----------------------------------------------------------


def render_instruction(
    op: OperatorTag,
    params: dict[str, Any],
    parents: tuple[str, ...] = (),
    source: str | None = None,
) -> str:
    p0 = parents[0] if parents else (source or params.get("table", ""))
    p1 = parents[1] if len(parents) > 1 else ""
    if op is OperatorTag.SCAN:
        return f"Return rows from {params.get('table', source or p0)}"
    if op is OperatorTag.FILTER:
        return f"Return rows from {p0} where {render_condition(params)}"
    if op is OperatorTag.PROJECT:
        cols = ", ".join(
            c["name"] if c["name"] == c.get("expr", c["name"]) else f"{c['expr']} AS {c['name']}"
            for c in params["columns"]
        )
        return f"Return {cols} of {p0}"
    if op is OperatorTag.AGGREGATE:
        base = f"Return {params['func']} of {params.get('column', '*')}"
        group = params.get("group_by") or []
        if group:
            base += f" grouped by {', '.join(group)}"
        return f"{base} from {p0}"
    if op is OperatorTag.SORT:
        return f"Return {p0} sorted by {params['column']} {params.get('direction', 'asc').upper()}"
    if op is OperatorTag.LIMIT:
        return f"Return the top {params['n']} rows from {p0}"
    if op is OperatorTag.JOIN:
        cond = f"{params['left']} {params.get('op', '=')} {params['right']}"
        return f"Return combined rows from {p0} and {p1} where {cond} matches"
    if op is OperatorTag.SET_OP:
        return f"Return the {params['kind']} of {p0} and {p1}"
    if op is OperatorTag.DISTINCT:
        cols = params.get("columns") or []
        suffix = f" based on {', '.join(cols)}" if cols else ""
        return f"Return unique rows from {p0}{suffix}"
    if op is OperatorTag.SEM_MAP:
        return (
            f"Return {p0} with new column {params['new_column']} derived from "
            f"{params.get('inputs', 'the text')} by {params['condition']}"
        )
    if op is OperatorTag.SEM_FILTER:
        return f"Return rows from {p0} satisfying the semantic condition: {params['condition']}"
    if op is OperatorTag.SEM_JOIN:
        return (
            f"Return combined rows from {p0} and {p1} using semantic matching "
            f"logic: {params['condition']}"
        )
    if op is OperatorTag.SEM_AGGREGATE:
        group = params.get("group_by") or []
        grouped = f" grouped by {', '.join(group)}" if group else ""
        return (
            f"Return a summary of {params.get('column', 'the rows')}{grouped} "
            f"from {p0} using instruction: {params['condition']}"
        )
    raise TemplateParseError(f"no template for {op}")


# -- parsing -------------------------------------------------------------

_SCAN_RE = re.compile(r"^Return rows from (\S+?)\.?$", re.IGNORECASE)
_FILTER_RE = re.compile(r"^Return rows from (\S+) where (.+)$", re.IGNORECASE)
_PROJECT_RE = re.compile(r"^Return (.+?) of (\S+?)(?:, calculating (.+?) if needed)?\.?$", re.IGNORECASE)
_AGG_RE = re.compile(
    r"^Return (\w+) of (\S+?)(?: grouped by (.+?))? from (\S+?)\.?$", re.IGNORECASE
)
_SORT_RE = re.compile(r"^Return (\S+) sorted by (\S+?)(?:\s+(ASC|DESC))?\.?$", re.IGNORECASE)
_LIMIT_RE = re.compile(r"^Return the top (\d+) rows from (\S+?)\.?$", re.IGNORECASE)
_JOIN_RE = re.compile(
    r"^Return combined rows from (\S+) and (\S+) where (.+?)(?: matches)?\.?$", re.IGNORECASE
)
_SET_RE = re.compile(r"^Return the (\w+) of (\S+) and (\S+?)\.?$", re.IGNORECASE)
_DISTINCT_RE = re.compile(
    r"^Return unique rows from (\S+?)(?: based on (.+?))?\.?$", re.IGNORECASE
)
_DERIVE_RE = re.compile(
    r"^Return (\S+) with new column (\S+) derived from (.+?) by (.+)$", re.IGNORECASE
)
_SEM_FILTER_RE = re.compile(
    r"^Return rows from (\S+) satisfying the semantic condition:\s*(.+)$", re.IGNORECASE
)
_SEM_JOIN_RE = re.compile(
    r"^Return combined rows from (\S+) and (\S+) using semantic matching logic:\s*(.+)$",
    re.IGNORECASE,
)
_SEM_AGG_RE = re.compile(
    r"^Return a summary of (\S+?)(?: grouped by (.+?))? from (\S+) using instruction:\s*(.+)$",
    re.IGNORECASE,
)


def parse_instruction(op: OperatorTag, instruction: str) -> dict[str, Any]:
    """Parse a templated instruction into structured params.

    Raises TemplateParseError when the instruction does not follow the
    operator's template.
    """
    text = instruction.strip()
    if op is OperatorTag.SCAN:
        m = _require(_SCAN_RE, text)
        return {"table": m.group(1)}
    if op is OperatorTag.FILTER:
        m = _require(_FILTER_RE, text)
        return parse_condition(m.group(2))
    if op is OperatorTag.PROJECT:
        m = _require(_PROJECT_RE, text)
        columns = []
        for item in _split_commas(m.group(1)):
            expr, _, alias = item.partition(" AS ")
            expr = expr.strip()
            columns.append({"name": (alias.strip() or expr), "expr": expr})
        if m.group(3):
            expr, _, alias = m.group(3).partition(" AS ")
            columns.append({"name": alias.strip() or expr.strip(), "expr": expr.strip()})
        return {"columns": columns}
    if op is OperatorTag.AGGREGATE:
        m = _require(_AGG_RE, text)
        func = m.group(1).lower()
        if func not in AGG_FUNCS:
            raise TemplateParseError(f"unknown aggregate function {func!r}")
        group = _split_commas(m.group(3)) if m.group(3) else []
        return {"func": func, "column": m.group(2), "group_by": group}
    if op is OperatorTag.SORT:
        m = _require(_SORT_RE, text)
        return {"column": m.group(2), "direction": (m.group(3) or "asc").lower()}
    if op is OperatorTag.LIMIT:
        m = _require(_LIMIT_RE, text)
        return {"n": int(m.group(1))}
    if op is OperatorTag.JOIN:
        m = _require(_JOIN_RE, text)
        return _parse_join_condition(m.group(3))
    if op is OperatorTag.SET_OP:
        m = _require(_SET_RE, text)
        kind = m.group(1).lower()
        if kind not in SET_KINDS:
            raise TemplateParseError(f"unknown set operation {kind!r}")
        return {"kind": kind}
    if op is OperatorTag.DISTINCT:
        m = _require(_DISTINCT_RE, text)
        return {"columns": _split_commas(m.group(2)) if m.group(2) else []}
    if op is OperatorTag.SEM_MAP:
        m = _require(_DERIVE_RE, text)
        return {"new_column": m.group(2), "inputs": m.group(3), "condition": m.group(4)}
    if op is OperatorTag.SEM_FILTER:
        m = _require(_SEM_FILTER_RE, text)
        return {"condition": m.group(2)}
    if op is OperatorTag.SEM_JOIN:
        m = _require(_SEM_JOIN_RE, text)
        return {"condition": m.group(3)}
    if op is OperatorTag.SEM_AGGREGATE:
        m = _require(_SEM_AGG_RE, text)
        group = _split_commas(m.group(2)) if m.group(2) else []
        return {"column": m.group(1), "group_by": group, "condition": m.group(4)}
    raise TemplateParseError(f"no parser for {op}")


def _require(pattern: re.Pattern, text: str) -> re.Match:
    m = pattern.match(text)
    if not m:
        raise TemplateParseError(f"instruction does not follow the template: {text!r}")
    return m


def _parse_join_condition(text: str) -> dict[str, Any]:
    body = text.strip()
    for op in (">=", "<=", "!=", "=", ">", "<"):
        m = re.match(rf"^(\S+)\s*{re.escape(op)}\s*(\S+)$", body)
        if m:
            return {"left": m.group(1), "right": m.group(2), "op": op}
    if re.match(r"^\S+$", body):
        return {"left": body, "right": body, "op": "="}
    raise TemplateParseError(f"cannot parse join condition {text!r}")
