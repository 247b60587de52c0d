"""Heuristic plan optimization: selection pushdown, projection pruning,
hybrid join reordering, and cost-aware semantic placement.

Every phase is a pure plan-to-plan rewrite guarded by the cost model: a
phase whose estimated cost comes out higher than its input is reverted,
so the optimized plan never costs more than the original. Rewrites are
conservative about semantics; anything they cannot prove safe (renamed
columns, shared sub-steps, order-sensitive truncation downstream) is
left in place with a trace note.
"""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from .cost import (
    Catalog,
    CostModelParams,
    estimate_plan,
    estimate_plan_detailed,
    pages_for,
    plan_cost,
)
from .errors import CostModelError, TandemError
from .plan import OperatorTag, PlanDag, PlanStep, topo_schedule
from .relational import infer_output_columns, join_output_columns
from . import templates

log = logging.getLogger(__name__)

_COST_SLACK = 1e-9


@dataclass(frozen=True)
class TraceEntry:
    rule: str
    steps: tuple[str, ...]
    cost_before: float
    cost_after: float


@dataclass
class RewriteTrace:
    applied: list[TraceEntry] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def record(self, rule: str, steps: Sequence[str], before: float, after: float) -> None:
        self.applied.append(TraceEntry(rule, tuple(steps), before, after))

    def note(self, message: str) -> None:
        self.notes.append(message)

    def to_dict(self) -> dict[str, Any]:
        return {
            "applied": [
                {
                    "rule": e.rule,
                    "steps": list(e.steps),
                    "cost_before": e.cost_before,
                    "cost_after": e.cost_after,
                }
                for e in self.applied
            ],
            "notes": list(self.notes),
        }


# -- shared plan inspection ---------------------------------------------------


def compute_schemas(dag: PlanDag, catalog: Catalog) -> dict[str, list[str]]:
    """Output column names per step, honoring the executor's naming rules."""
    schemas: dict[str, list[str]] = {}
    for layer in topo_schedule(dag):
        for step_id in layer:
            step = dag.step(step_id)
            if step.op is OperatorTag.SCAN:
                table = str((step.params or {}).get("table") or step.source)
                parents = [(table, list(catalog.table(table).columns))]
            else:
                parents = [(pid, schemas[pid]) for pid in step.parents]
            schemas[step_id] = infer_output_columns(step, parents)
    return schemas


def mentioned_columns(text: str, candidates: Sequence[str]) -> set[str]:
    found = set()
    for col in candidates:
        if re.search(rf"\b{re.escape(col)}\b", text, re.IGNORECASE):
            found.add(col)
    return found


def _consumers(dag: PlanDag) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {s.id: [] for s in dag.steps}
    for s in dag.steps:
        for p in s.parents:
            out[p].append(s.id)
    return out


def _steps_by_id(dag: PlanDag) -> dict[str, PlanStep]:
    return {s.id: s for s in dag.steps}


def _rebuild(steps: dict[str, PlanStep], order_hint: PlanDag) -> PlanDag:
    """Reassemble a dag keeping a stable topological step order."""
    remaining = dict(steps)
    ordered: list[PlanStep] = []
    for s in order_hint.steps:
        if s.id in remaining:
            ordered.append(remaining.pop(s.id))
    ordered.extend(remaining[k] for k in sorted(remaining))
    dag = PlanDag.from_steps(ordered)
    layers = topo_schedule(dag)  # raises on accidental cycles
    flat = [sid for layer in layers for sid in layer]
    index = {sid: i for i, sid in enumerate(flat)}
    return PlanDag.from_steps(sorted(dag.steps, key=lambda s: (index[s.id], s.id)))


def _rerendered(step: PlanStep) -> PlanStep:
    """Refresh the instruction after rewiring so text and params agree."""
    if step.params is None:
        return step
    try:
        text = templates.render_instruction(step.op, step.params, step.parents, step.source)
    except TandemError:
        return step
    return step.with_(instruction=text)


def _filter_column(step: PlanStep) -> Optional[str]:
    if step.op is OperatorTag.FILTER and step.params and "column" in step.params:
        return str(step.params["column"])
    return None


def _join_layout(dag: PlanDag, schemas: dict[str, list[str]], join: PlanStep):
    left_id, right_id = join.parents
    params = join.params or {}
    left_key, right_key = str(params.get("left")), str(params.get("right"))
    collapse = (
        right_key if params.get("op", "=") == "=" and left_key == right_key else None
    )
    return join_output_columns(schemas[left_id], schemas[right_id], right_id, collapse)


def _order_sensitive_downstream(dag: PlanDag, start: str) -> bool:
    """True when a LIMIT or column-subset DISTINCT consumes this step's
    output (directly or transitively); row order then affects results."""
    consumers = _consumers(dag)
    frontier = list(consumers.get(start, []))
    seen = set()
    while frontier:
        sid = frontier.pop()
        if sid in seen:
            continue
        seen.add(sid)
        step = dag.step(sid)
        if step.op is OperatorTag.LIMIT:
            return True
        if step.op is OperatorTag.DISTINCT:
            cols = (step.params or {}).get("columns") or []
            if cols:
                return True
        frontier.extend(consumers.get(sid, []))
    return False


# -- selection pushdown -------------------------------------------------------


def push_selections(dag: PlanDag, catalog: Catalog) -> tuple[PlanDag, list[str]]:
    """Relocate relational filters below joins and set operations onto the
    branch their column originates from; set operations get the filter
    duplicated onto both inputs."""
    touched: list[str] = []
    changed = True
    while changed:
        changed = False
        steps = _steps_by_id(dag)
        consumers = _consumers(dag)
        schemas = compute_schemas(dag, catalog)
        for f in list(dag.steps):
            column = _filter_column(f)
            if column is None or len(f.parents) != 1:
                continue
            parent = steps[f.parents[0]]
            if consumers[parent.id] != [f.id]:
                continue
            if parent.op is OperatorTag.JOIN and parent.params:
                moved = _push_below_join(dag, f, parent, schemas, column)
            elif parent.op is OperatorTag.SET_OP:
                moved = _push_below_set_op(dag, f, parent, schemas, column)
            else:
                moved = None
            if moved is not None:
                dag = moved
                touched.append(f.id)
                changed = True
                break
    return dag, sorted(set(touched))


def _push_below_join(
    dag: PlanDag,
    f: PlanStep,
    join: PlanStep,
    schemas: dict[str, list[str]],
    column: str,
) -> Optional[PlanDag]:
    layout = _join_layout(dag, schemas, join)
    sources = [(side, src) for name, side, src in layout if name == column]
    if len(sources) != 1:
        return None
    side, src = sources[0]
    branch = join.parents[0] if side == "left" else join.parents[1]

    steps = _steps_by_id(dag)
    new_filter = f.with_(parents=(branch,), params={**(f.params or {}), "column": src})
    new_join_parents = tuple(f.id if p == branch else p for p in join.parents)
    # relocate: branch -> filter -> join -> (filter's old consumers)
    steps[f.id] = _rerendered(new_filter)
    steps[join.id] = join.with_(parents=new_join_parents)
    for c in dag.consumers(f.id):
        steps[c.id] = c.with_(parents=tuple(join.id if p == f.id else p for p in c.parents))
    return _rebuild(steps, dag)


def _push_below_set_op(
    dag: PlanDag,
    f: PlanStep,
    set_op: PlanStep,
    schemas: dict[str, list[str]],
    column: str,
) -> Optional[PlanDag]:
    if column not in schemas[set_op.parents[0]] or column not in schemas[set_op.parents[1]]:
        return None
    steps = _steps_by_id(dag)
    existing = set(steps)
    copies = []
    for suffix, branch in zip(("a", "b"), set_op.parents):
        new_id = f"{f.id}_{suffix}"
        while new_id in existing:
            new_id += "_"
        existing.add(new_id)
        copy = _rerendered(f.with_(id=new_id, parents=(branch,)))
        steps[new_id] = copy
        copies.append(new_id)
    del steps[f.id]
    steps[set_op.id] = set_op.with_(parents=tuple(copies))
    for c in dag.consumers(f.id):
        steps[c.id] = c.with_(parents=tuple(set_op.id if p == f.id else p for p in c.parents))
    return _rebuild(steps, dag)


# -- projection pruning -------------------------------------------------------


def prune_projections(dag: PlanDag, catalog: Catalog) -> tuple[PlanDag, list[str]]:
    """Insert or narrow projections so intermediates only carry columns some
    downstream step still reads. Columns a semantic instruction mentions
    count as read (conservative)."""
    schemas = compute_schemas(dag, catalog)
    consumers = _consumers(dag)
    required: dict[str, set[str]] = {dag.output: set(schemas[dag.output])}

    order = [sid for layer in topo_schedule(dag) for sid in layer]
    for sid in reversed(order):
        step = dag.step(sid)
        req_out = required.setdefault(sid, set())
        if sid == dag.output:
            req_out = required[sid]
        for idx, pid in enumerate(step.parents):
            need = _required_input(step, idx, req_out, schemas, dag)
            required.setdefault(pid, set()).update(need & set(schemas[pid]))

    steps = _steps_by_id(dag)
    touched: list[str] = []
    for sid in order:
        if sid == dag.output:
            continue
        step = steps[sid]
        schema = schemas[sid]
        need = [c for c in schema if c in required.get(sid, set())]
        if not need:
            need = schema[:1]
        if len(need) >= len(schema):
            continue
        if _narrowing_breaks_renames(dag, schemas, sid):
            continue
        if step.op is OperatorTag.PROJECT and len(consumers[sid]) >= 1:
            cols = [c for c in (step.params or {}).get("columns", []) if c["name"] in need]
            if cols and len(cols) < len(step.params["columns"]):
                steps[sid] = _rerendered(step.with_(params={"columns": cols}))
                touched.append(sid)
            continue
        if all(dag.step(cid).op is OperatorTag.PROJECT for cid in consumers[sid]):
            continue  # the consumer already narrows; an extra projection is noise
        if _semantic_adjacency(step, [dag.step(cid) for cid in consumers[sid]]):
            continue  # placement decisions need the expander adjacency intact
        new_id = f"{sid}_narrow"
        while new_id in steps:
            new_id += "_"
        project = PlanStep(
            id=new_id,
            op=OperatorTag.PROJECT,
            instruction="",
            parents=(sid,),
            params={"columns": [{"name": c, "expr": c} for c in need]},
        )
        steps[new_id] = _rerendered(project)
        for cid in consumers[sid]:
            consumer = steps[cid]
            steps[cid] = consumer.with_(
                parents=tuple(new_id if p == sid else p for p in consumer.parents)
            )
        touched.append(new_id)
    if not touched:
        return dag, []
    return _rebuild(steps, dag), sorted(set(touched))


def _required_input(
    step: PlanStep,
    parent_index: int,
    req_out: set[str],
    schemas: dict[str, list[str]],
    dag: PlanDag,
) -> set[str]:
    params = step.params or {}
    parent_schema = schemas[step.parents[parent_index]]
    op = step.op

    if op is OperatorTag.FILTER:
        return req_out | ({str(params["column"])} if "column" in params else set(parent_schema))
    if op is OperatorTag.SEM_FILTER:
        hit = mentioned_columns(step.instruction, parent_schema)
        return req_out | (hit if hit else set(parent_schema))
    if op is OperatorTag.PROJECT:
        out: set[str] = set()
        for spec in params.get("columns", []):
            expr = str(spec.get("expr", spec["name"]))
            if expr in parent_schema:
                out.add(expr)
            else:
                out.update(mentioned_columns(expr, parent_schema))
        return out or set(parent_schema)
    if op is OperatorTag.AGGREGATE:
        need = {str(g) for g in params.get("group_by") or []}
        column = str(params.get("column", "*"))
        if column != "*":
            need.add(column)
        return need or set(parent_schema[:1])
    if op is OperatorTag.SEM_AGGREGATE:
        need = mentioned_columns(step.instruction, parent_schema)
        need.update(str(g) for g in params.get("group_by") or [])
        if params.get("column") in parent_schema:
            need.add(str(params["column"]))
        return need or set(parent_schema)
    if op is OperatorTag.JOIN:
        layout = _join_layout(dag, schemas, step)
        want_side = "left" if parent_index == 0 else "right"
        need = {src for name, side, src in layout if side == want_side and name in req_out}
        key = params.get("left") if parent_index == 0 else params.get("right")
        if key is not None:
            need.add(str(key))
        return need
    if op is OperatorTag.SEM_JOIN:
        need = req_out & set(parent_schema)
        need |= mentioned_columns(step.instruction, parent_schema)
        return need or set(parent_schema)
    if op is OperatorTag.SET_OP:
        if str(params.get("kind", "union")) == "union":
            return set(req_out)
        return set(parent_schema)  # row-identity semantics need every column
    if op is OperatorTag.SORT:
        return req_out | {str(params["column"])}
    if op is OperatorTag.LIMIT:
        return set(req_out)
    if op is OperatorTag.DISTINCT:
        cols = [str(c) for c in params.get("columns") or []]
        return (req_out | set(cols)) if cols else set(parent_schema)
    if op is OperatorTag.SEM_MAP:
        new = (params or {}).get("new_column")
        need = {c for c in req_out if c != new}
        hit = mentioned_columns(step.instruction, parent_schema)
        return need | (hit if hit else set(parent_schema))
    return set(parent_schema)


_EXPANDERS = (OperatorTag.JOIN, OperatorTag.SET_OP)


def _semantic_adjacency(step: PlanStep, consumers: list[PlanStep]) -> bool:
    """True when the edge below ``step`` connects a semantic step with a
    join or set operation (in either direction)."""
    if step.op in _EXPANDERS and any(c.op.is_semantic for c in consumers):
        return True
    if step.op.is_semantic and any(c.op in _EXPANDERS for c in consumers):
        return True
    return False


def _narrowing_breaks_renames(
    dag: PlanDag, schemas: dict[str, list[str]], sid: str
) -> bool:
    """Narrowing a join's right input changes the rename prefix source id,
    so skip branches whose join output depends on renamed columns."""
    for consumer in dag.consumers(sid):
        if consumer.op is not OperatorTag.JOIN or not consumer.params:
            continue
        if len(consumer.parents) > 1 and consumer.parents[1] == sid:
            layout = _join_layout(dag, schemas, consumer)
            if any(side == "right" and name != src for name, side, src in layout):
                return True
    return False


# -- join ordering -------------------------------------------------------------


@dataclass(frozen=True)
class JoinInput:
    name: str
    size: int
    distincts: dict[str, int] = field(default_factory=dict, compare=False)
    row_bytes: float = 64.0


@dataclass(frozen=True)
class JoinPredicate:
    left_name: str
    left_col: str
    right_name: str
    right_col: str


@dataclass
class JoinTree:
    """A left-deep order plus the predicate consumed at each internal node."""

    order: tuple[str, ...]
    predicates: tuple[JoinPredicate, ...]
    cost: float


class _OrderingSpace:
    """Canonical per-subset statistics for join ordering.

    A member set's cardinality is the product of the members' sizes divided
    by, for every predicate inside the set, the larger of the two key
    distinct counts (base catalog statistics). Being a pure function of the
    subset, it makes dynamic programming over subsets exact.
    """

    def __init__(
        self,
        relations: Sequence[JoinInput],
        predicates: Sequence[JoinPredicate],
        p: CostModelParams,
    ):
        self.by_name = {r.name: r for r in relations}
        self.predicates = list(predicates)
        self.p = p
        self._rows: dict[frozenset, int] = {}

    def connecting(self, members: frozenset, candidate: str) -> Optional[JoinPredicate]:
        for pr in self.predicates:
            if pr.left_name in members and pr.right_name == candidate:
                return pr
            if pr.right_name in members and pr.left_name == candidate:
                return pr
        return None

    def rows(self, members: frozenset) -> int:
        if members in self._rows:
            return self._rows[members]
        product = 1
        for m in members:
            product *= self.by_name[m].size
        denominator = 1
        for pr in self.predicates:
            if pr.left_name in members and pr.right_name in members:
                left = self.by_name[pr.left_name]
                right = self.by_name[pr.right_name]
                dl = left.distincts.get(pr.left_col) or left.size
                dr = right.distincts.get(pr.right_col) or right.size
                denominator *= max(dl, dr, 1)
        out = product // denominator
        self._rows[members] = out
        return out

    def row_bytes(self, members: frozenset) -> float:
        return sum(self.by_name[m].row_bytes for m in members)

    def extend_cost(self, members: frozenset, nxt: str) -> float:
        rows = self.rows(members)
        b = self.by_name[nxt]
        gamma_in = rows + b.size
        pages = pages_for(
            rows * self.row_bytes(members) + b.size * b.row_bytes, self.p.page_size
        )
        return gamma_in * self.p.c_cpu + pages * self.p.c_io


def _order_predicates(space: _OrderingSpace, order: Sequence[str]) -> tuple[JoinPredicate, ...]:
    preds = []
    members = frozenset([order[0]])
    for nxt in order[1:]:
        preds.append(space.connecting(members, nxt) or JoinPredicate("", "", "", ""))
        members |= {nxt}
    return tuple(preds)


def dp_join_order(
    relations: Sequence[JoinInput],
    join_graph: Sequence[JoinPredicate],
    p: CostModelParams,
    allow_cross_products: bool = False,
) -> JoinTree:
    """Exact left-deep ordering by dynamic programming over subsets; ties go
    to the lexicographically smaller order."""
    if len(relations) < 2:
        raise CostModelError("join ordering needs at least 2 relations")
    space = _OrderingSpace(relations, join_graph, p)
    names = sorted(space.by_name)

    table: dict[frozenset, tuple[float, tuple[str, ...]]] = {
        frozenset([n]): (0.0, (n,)) for n in names
    }
    for size in range(2, len(names) + 1):
        for subset in itertools.combinations(names, size):
            fs = frozenset(subset)
            best: Optional[tuple[float, tuple[str, ...]]] = None
            for last in subset:
                rest = fs - {last}
                prev = table.get(rest)
                if prev is None:
                    continue
                if space.connecting(rest, last) is None and not allow_cross_products:
                    continue
                candidate = (prev[0] + space.extend_cost(rest, last), prev[1] + (last,))
                if best is None or candidate < best:
                    best = candidate
            if best is not None:
                table[fs] = best

    final = table.get(frozenset(names))
    if final is None:
        raise CostModelError("disconnected join graph (cross products are rejected)")
    return JoinTree(
        order=final[1], predicates=_order_predicates(space, final[1]), cost=final[0]
    )


def greedy_join_order(
    relations: Sequence[JoinInput],
    join_graph: Sequence[JoinPredicate],
    p: CostModelParams,
    allow_cross_products: bool = False,
) -> JoinTree:
    """Cheapest connected pair first, then always append the relation with
    the lowest incremental join cost."""
    if len(relations) < 2:
        raise CostModelError("join ordering needs at least 2 relations")
    space = _OrderingSpace(relations, join_graph, p)
    names = sorted(space.by_name)

    seed: Optional[tuple[float, tuple[str, str]]] = None
    for a, b in itertools.combinations(names, 2):
        if space.connecting(frozenset([a]), b) is None and not allow_cross_products:
            continue
        cost = space.extend_cost(frozenset([a]), b)
        if seed is None or (cost, (a, b)) < seed:
            seed = (cost, (a, b))
    if seed is None:
        raise CostModelError("disconnected join graph (cross products are rejected)")

    total, order = seed[0], list(seed[1])
    members = frozenset(order)
    remaining = [n for n in names if n not in members]
    while remaining:
        best: Optional[tuple[float, str]] = None
        for cand in remaining:
            if space.connecting(members, cand) is None and not allow_cross_products:
                continue
            cost = space.extend_cost(members, cand)
            if best is None or (cost, cand) < best:
                best = (cost, cand)
        if best is None:
            raise CostModelError("disconnected join graph (cross products are rejected)")
        total += best[0]
        order.append(best[1])
        members |= {best[1]}
        remaining.remove(best[1])

    return JoinTree(
        order=tuple(order), predicates=_order_predicates(space, order), cost=total
    )


def reorder_joins(
    dag: PlanDag, catalog: Catalog, p: CostModelParams,
    trace: RewriteTrace | None = None,
) -> tuple[PlanDag, list[str]]:
    """Re-shape maximal chains of relational equi-joins: exact DP when the
    chain touches at most tau inputs, greedy beyond that."""
    trace = trace if trace is not None else RewriteTrace()
    touched: list[str] = []
    consumers = _consumers(dag)
    chains = _find_join_chains(dag, consumers)
    for chain in chains:
        new_dag = _reorder_chain(dag, catalog, p, chain, trace)
        if new_dag is not None:
            dag = new_dag
            touched.extend(chain)
            consumers = _consumers(dag)
    return dag, sorted(set(touched))


def _find_join_chains(dag: PlanDag, consumers: dict[str, list[str]]) -> list[list[str]]:
    steps = _steps_by_id(dag)

    def chain_join(sid: str) -> bool:
        st = steps[sid]
        return (
            st.op is OperatorTag.JOIN
            and st.params is not None
            and str(st.params.get("op", "=")) == "="
        )

    chains = []
    for s in dag.steps:
        if not chain_join(s.id):
            continue
        cons = consumers[s.id]
        if len(cons) == 1 and chain_join(cons[0]):
            continue  # absorbed into the chain rooted higher up
        members: list[str] = []
        frontier = [s.id]
        while frontier:
            sid = frontier.pop()
            members.append(sid)
            frontier.extend(
                pid
                for pid in steps[sid].parents
                if chain_join(pid) and consumers[pid] == [sid]
            )
        if len(members) >= 2:
            chains.append(members)
    return chains


def _reorder_chain(
    dag: PlanDag, catalog: Catalog, p: CostModelParams, chain: list[str],
    trace: RewriteTrace,
) -> Optional[PlanDag]:
    steps = _steps_by_id(dag)
    root = chain[0]
    if _order_sensitive_downstream(dag, root):
        log.debug("chain at %s feeds order-sensitive steps; not reordered", root)
        return None
    member_set = set(chain)
    leaves: list[str] = []
    for sid in chain:
        for pid in steps[sid].parents:
            if pid not in member_set:
                leaves.append(pid)
    if len(leaves) != len(chain) + 1 or len(set(leaves)) != len(leaves):
        return None

    schemas = compute_schemas(dag, catalog)
    owner: dict[str, str] = {}
    for leaf in leaves:
        for col in schemas[leaf]:
            if col in owner:
                return None  # ambiguous column provenance
            owner[col] = leaf

    predicates: list[JoinPredicate] = []
    for sid in chain:
        params = steps[sid].params or {}
        lc, rc = str(params.get("left")), str(params.get("right"))
        if lc not in owner or rc not in owner or owner[lc] == owner[rc]:
            return None
        predicates.append(JoinPredicate(owner[lc], lc, owner[rc], rc))
    if len({frozenset((pr.left_name, pr.right_name)) for pr in predicates}) != len(chain):
        return None  # parallel predicates between the same pair

    try:
        _, states = estimate_plan_detailed(dag, catalog, p)
    except TandemError:
        return None
    inputs = [
        JoinInput(
            name=leaf,
            size=states[leaf].rows,
            distincts=dict(states[leaf].distincts),
            row_bytes=states[leaf].row_bytes,
        )
        for leaf in leaves
    ]
    try:
        if len(inputs) <= p.tau:
            tree = dp_join_order(inputs, predicates, p)
            trace.note(f"{root}: join chain of {len(inputs)} inputs ordered via DP")
        else:
            tree = greedy_join_order(inputs, predicates, p)
            trace.note(f"{root}: join chain of {len(inputs)} inputs ordered via greedy")
    except CostModelError:
        return None

    # reassign original join ids bottom-up; the root keeps its id so
    # consumers above the chain stay untouched
    spare = sorted(member_set - {root})
    new_ids = spare + [root]
    new_steps = dict(steps)
    current = tree.order[0]
    for i, nxt in enumerate(tree.order[1:]):
        pred = tree.predicates[i]
        left_in_plan = pred.right_name == nxt
        left_col = pred.left_col if left_in_plan else pred.right_col
        right_col = pred.right_col if left_in_plan else pred.left_col
        jid = new_ids[i]
        join = steps[jid].with_(
            id=jid,
            parents=(current, nxt),
            params={"left": left_col, "right": right_col, "op": "="},
        )
        new_steps[jid] = _rerendered(join)
        current = jid

    candidate = _rebuild(new_steps, dag)
    if [ (s.id, s.parents, tuple(sorted((s.params or {}).items(), key=str))) for s in candidate.steps ] == [
        (s.id, s.parents, tuple(sorted((s.params or {}).items(), key=str))) for s in dag.steps
    ]:
        return None
    return candidate


# -- semantic placement ---------------------------------------------------------


def deferral_decision(gamma_out: float, gamma_in: float, epsilon: float) -> str:
    """The placement rule: run the semantic step before the expander only
    when the expansion ratio strictly exceeds epsilon."""
    if gamma_in <= 0:
        return "defer"
    return "elevate" if (gamma_out / gamma_in) > epsilon else "defer"


def place_semantic(
    dag: PlanDag, catalog: Catalog, p: CostModelParams, trace: RewriteTrace | None = None
) -> tuple[PlanDag, list[str]]:
    """Adaptive semantic placement: defer semantic steps past relational
    filters, then make one expansion-ratio decision per step against an
    adjacent join or set operation."""
    trace = trace if trace is not None else RewriteTrace()
    touched: list[str] = []
    for sem_id in [s.id for s in dag.steps if s.op.is_semantic]:
        if not dag.has_step(sem_id):
            continue
        step = dag.step(sem_id)
        if step.op in (OperatorTag.SEM_JOIN, OperatorTag.SEM_AGGREGATE):
            if _adjacent_expander(dag, sem_id) is not None:
                trace.note(f"{sem_id}: pinned (operator does not commute with joins)")
            continue
        dag, moved = _place_one(dag, catalog, p, sem_id, trace)
        touched.extend(moved)
    return dag, sorted(set(touched))


def _adjacent_expander(dag: PlanDag, sem_id: str) -> Optional[str]:
    step = dag.step(sem_id)
    consumers = dag.consumers(sem_id)
    if len(consumers) == 1 and consumers[0].op in (OperatorTag.JOIN, OperatorTag.SET_OP):
        return consumers[0].id
    for pid in step.parents:
        if dag.step(pid).op in (OperatorTag.JOIN, OperatorTag.SET_OP):
            return pid
    return None


def _sem_read_columns(dag: PlanDag, catalog: Catalog, step: PlanStep) -> set[str]:
    schemas = compute_schemas(dag, catalog)
    input_schema = schemas[step.parents[0]] if step.parents else []
    text = step.instruction + " " + str((step.params or {}).get("condition", ""))
    hit = mentioned_columns(text, input_schema)
    new_col = (step.params or {}).get("new_column")
    hit.discard(str(new_col))
    return hit


def _place_one(
    dag: PlanDag,
    catalog: Catalog,
    p: CostModelParams,
    sem_id: str,
    trace: RewriteTrace,
) -> tuple[PlanDag, list[str]]:
    touched: list[str] = []

    # defer past relational filters first: prune rows before paying tokens
    while True:
        moved = _defer_past_filter(dag, catalog, p, sem_id, trace)
        if moved is None:
            break
        dag = moved
        touched.append(sem_id)

    step = dag.step(sem_id)
    consumers = dag.consumers(sem_id)
    decided = False
    if len(consumers) == 1 and consumers[0].op in (OperatorTag.JOIN, OperatorTag.SET_OP):
        dag, entry = _decide_below(dag, catalog, p, step, consumers[0], trace)
        decided = True
        if entry:
            touched.append(sem_id)
    if not decided and step.parents:
        parent = dag.step(step.parents[0])
        if parent.op is OperatorTag.JOIN:
            dag, entry = _decide_above(dag, catalog, p, step, parent, trace)
            if entry:
                touched.append(sem_id)

    if touched:
        # a moved step may now sit under fresh relational filters
        while True:
            moved = _defer_past_filter(dag, catalog, p, sem_id, trace)
            if moved is None:
                break
            dag = moved
    return dag, touched


def _defer_past_filter(
    dag: PlanDag,
    catalog: Catalog,
    p: CostModelParams,
    sem_id: str,
    trace: RewriteTrace,
) -> Optional[PlanDag]:
    step = dag.step(sem_id)
    consumers = dag.consumers(sem_id)
    if len(consumers) != 1:
        return None
    f = consumers[0]
    column = _filter_column(f)
    if column is None or f.parents != (sem_id,):
        return None
    new_col = (step.params or {}).get("new_column")
    if new_col and column == str(new_col):
        return None  # the filter reads the derived column
    before = _cost_of(dag, catalog, p)
    steps = _steps_by_id(dag)
    steps[f.id] = f.with_(parents=step.parents)
    steps[sem_id] = step.with_(parents=(f.id,))
    for c in dag.consumers(f.id):
        if c.id != sem_id:
            steps[c.id] = c.with_(parents=tuple(sem_id if x == f.id else x for x in c.parents))
    candidate = _rebuild(steps, dag)
    after = _cost_of(candidate, catalog, p)
    trace.record("Defer", (sem_id, f.id), before, after)
    return candidate


def _cost_of(dag: PlanDag, catalog: Catalog, p: CostModelParams) -> float:
    return plan_cost(dag, estimate_plan(dag, catalog, p), p)


def _decide_below(
    dag: PlanDag,
    catalog: Catalog,
    p: CostModelParams,
    step: PlanStep,
    expander: PlanStep,
    trace: RewriteTrace,
) -> tuple[PlanDag, bool]:
    """The semantic step currently feeds the expander. Elevate keeps it
    there; defer moves it above."""
    estimates = estimate_plan(dag, catalog, p)
    gamma_in = estimates[step.id].gamma_in
    kind = str((expander.params or {}).get("kind", "union"))
    if expander.op is OperatorTag.SET_OP and kind != "union":
        decision = "defer"  # intersections and differences never expand
    else:
        gamma_out = estimates[expander.id].gamma_out
        decision = deferral_decision(gamma_out, gamma_in, p.epsilon)
    if decision == "elevate":
        trace.note(f"{step.id}: elevate (kept before {expander.id})")
        return dag, False

    if expander.op is OperatorTag.SET_OP:
        # moving a single-branch semantic step above a set operation would
        # apply it to the other branch too; only a both-branch move is sound
        trace.note(f"{step.id}: pinned (single-branch move across {expander.id})")
        return dag, False
    schemas = compute_schemas(dag, catalog)
    read = _sem_read_columns(dag, catalog, step)
    layout = _join_layout(dag, schemas, expander)
    surviving = {src: name for name, side, src in layout}
    if any(surviving.get(c) != c for c in read):
        trace.note(f"{step.id}: pinned (column renamed by {expander.id})")
        return dag, False
    new_col = (step.params or {}).get("new_column")
    if new_col:
        jp = expander.params or {}
        other = expander.parents[1] if expander.parents[0] == step.id else expander.parents[0]
        if str(new_col) in (str(jp.get("left")), str(jp.get("right"))):
            trace.note(f"{step.id}: pinned ({expander.id} joins on the derived column)")
            return dag, False
        if str(new_col) in schemas[other]:
            trace.note(f"{step.id}: pinned (derived column collides across {expander.id})")
            return dag, False

    before = _cost_of(dag, catalog, p)
    steps = _steps_by_id(dag)
    branch = step.parents[0]
    steps[expander.id] = expander.with_(
        parents=tuple(branch if x == step.id else x for x in expander.parents)
    )
    steps[step.id] = step.with_(parents=(expander.id,))
    for c in dag.consumers(expander.id):
        if c.id != step.id:
            steps[c.id] = c.with_(
                parents=tuple(step.id if x == expander.id else x for x in c.parents)
            )
    candidate = _rebuild(steps, dag)
    after = _cost_of(candidate, catalog, p)
    trace.record("Defer", (step.id, expander.id), before, after)
    return candidate, True


def _decide_above(
    dag: PlanDag,
    catalog: Catalog,
    p: CostModelParams,
    step: PlanStep,
    join: PlanStep,
    trace: RewriteTrace,
) -> tuple[PlanDag, bool]:
    """The semantic step consumes the join's output. Elevate moves it below
    onto the branch that owns its columns when the join expands."""
    if [c.id for c in dag.consumers(join.id)] != [step.id]:
        return dag, False
    read = _sem_read_columns(dag, catalog, step)
    if not read:
        trace.note(f"{step.id}: pinned (cannot attribute its columns to one join input)")
        return dag, False
    schemas = compute_schemas(dag, catalog)
    layout = _join_layout(dag, schemas, join)
    by_name = {name: (side, src) for name, side, src in layout}
    sides = set()
    for col in read:
        if col not in by_name:
            return dag, False
        side, src = by_name[col]
        if src != col:
            trace.note(f"{step.id}: pinned (reads a renamed column)")
            return dag, False
        sides.add(side)
    if len(sides) != 1:
        trace.note(f"{step.id}: pinned (reads columns from both join inputs)")
        return dag, False

    side = sides.pop()
    branch = join.parents[0] if side == "left" else join.parents[1]
    estimates = estimate_plan(dag, catalog, p)
    _, states = estimate_plan_detailed(dag, catalog, p)
    gamma_out = estimates[join.id].gamma_out
    gamma_in_below = states[branch].rows
    if deferral_decision(gamma_out, gamma_in_below, p.epsilon) != "elevate":
        trace.note(f"{step.id}: defer (kept after {join.id})")
        return dag, False

    new_col = (step.params or {}).get("new_column")
    if new_col:
        jp = join.params or {}
        if str(new_col) in (str(jp.get("left")), str(jp.get("right"))):
            trace.note(f"{step.id}: pinned ({join.id} joins on the derived column)")
            return dag, False
        if str(new_col) in schemas[branch]:
            trace.note(f"{step.id}: pinned (derived column collides on the join input)")
            return dag, False

    before = _cost_of(dag, catalog, p)
    steps = _steps_by_id(dag)
    steps[step.id] = step.with_(parents=(branch,))
    steps[join.id] = join.with_(
        parents=tuple(step.id if x == branch else x for x in join.parents)
    )
    for c in dag.consumers(step.id):
        steps[c.id] = c.with_(parents=tuple(join.id if x == step.id else x for x in c.parents))
    candidate = _rebuild(steps, dag)
    after = _cost_of(candidate, catalog, p)
    trace.record("Elevate", (step.id, join.id), before, after)
    return candidate, True


# -- the full pass ---------------------------------------------------------------


def optimize(
    dag: PlanDag, catalog: Catalog, p: CostModelParams
) -> tuple[PlanDag, RewriteTrace]:
    """Full optimization pass. Each phase must not increase estimated cost;
    a phase that does (or fails) is reverted with a note, so the result
    never costs more than the input plan."""
    trace = RewriteTrace()
    current = dag
    original_cost = _try_cost(dag, catalog, p)

    phases = (
        ("PushSelections", lambda d, t: push_selections(d, catalog)),
        ("PruneProjections", lambda d, t: prune_projections(d, catalog)),
        ("ReorderJoins", lambda d, t: reorder_joins(d, catalog, p, t)),
        ("PlaceSemantic", lambda d, t: place_semantic(d, catalog, p, t)),
    )
    for name, fn in phases:
        before = _try_cost(current, catalog, p)
        pending = RewriteTrace()
        try:
            candidate, touched = fn(current, pending)
        except TandemError as exc:
            trace.note(f"{name} skipped: {exc}")
            continue
        if not touched:
            trace.notes.extend(pending.notes)
            continue
        after = _try_cost(candidate, catalog, p)
        if before is not None and after is not None and after > before + _COST_SLACK:
            trace.note(f"{name} reverted: estimated cost {after:.6g} > {before:.6g}")
            continue
        current = candidate
        trace.notes.extend(pending.notes)
        if name == "PlaceSemantic":
            trace.applied.extend(pending.applied)
        else:
            trace.record(name, touched, before if before is not None else 0.0,
                         after if after is not None else 0.0)

    final_cost = _try_cost(current, catalog, p)
    if (
        original_cost is not None
        and final_cost is not None
        and final_cost > original_cost + _COST_SLACK
    ):
        trace.note("optimization reverted entirely: estimated cost increased")
        return dag, trace
    return current, trace


def _try_cost(dag: PlanDag, catalog: Catalog, p: CostModelParams) -> Optional[float]:
    try:
        return _cost_of(dag, catalog, p)
    except TandemError:
        return None
