"""Plan execution over the dual engine: relational steps run in-process,
semantic steps go through the batched backend. One call executes one plan;
the runner above it handles multiple candidate plans.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ExecutionError
from .plan import OperatorTag, PlanDag, PlanStep, topo_schedule
from .relation import Relation, estimate_row_tokens
from .relational import ExecEnv, eval_relational, materialize
from .semantic import (
    BatchConfig,
    SemanticBackend,
    TokenAccounting,
    exec_aggregate,
    exec_filter,
    exec_join,
    exec_map,
)
from . import templates

log = logging.getLogger(__name__)


@dataclass
class ExecutionSettings:
    b: int = 100
    B_max: float = 8192.0
    parallelism: int = 8
    retries: int = 2


@dataclass
class ExecutionReport:
    plan_id: str
    result: Relation
    accounting: TokenAccounting
    lineage: list[dict[str, Any]] = field(default_factory=list)


def ensure_semantic_params(step: PlanStep) -> PlanStep:
    """Semantic steps carry their condition (and derived-column name) as
    params parsed from the instruction template; relational compilation is
    the planner's job."""
    if not step.op.is_semantic or step.params is not None:
        return step
    try:
        params = templates.parse_instruction(step.op, step.instruction)
    except templates.TemplateParseError:
        params = {"condition": step.instruction}
    return step.with_(params=params)


def _batch_config(settings: ExecutionSettings, t_row: float) -> BatchConfig:
    return BatchConfig(
        b=settings.b,
        B_max=settings.B_max,
        t_row=max(t_row, 1.0),
        parallelism=settings.parallelism,
        retries=settings.retries,
    )


def _eval_semantic(
    step: PlanStep,
    env: ExecEnv,
    backend: SemanticBackend,
    settings: ExecutionSettings,
    accounting: TokenAccounting,
) -> Relation:
    step = ensure_semantic_params(step)
    params = step.params or {}
    condition = str(params.get("condition") or step.instruction)
    inputs = [env.resolve(p) for p in step.parents]

    if step.op is OperatorTag.SEM_FILTER:
        cfg = _batch_config(settings, estimate_row_tokens(inputs[0]))
        return exec_filter(condition, inputs[0], cfg, backend, accounting=accounting)
    if step.op is OperatorTag.SEM_MAP:
        cfg = _batch_config(settings, estimate_row_tokens(inputs[0]))
        new_column = params.get("new_column")
        return exec_map(
            condition,
            inputs[0],
            cfg,
            backend,
            new_column=str(new_column) if new_column else None,
            accounting=accounting,
        )
    if step.op is OperatorTag.SEM_JOIN:
        t_row = max(estimate_row_tokens(inputs[0]), estimate_row_tokens(inputs[1]))
        cfg = _batch_config(settings, t_row)
        return exec_join(condition, inputs[0], inputs[1], cfg, backend, accounting=accounting)
    if step.op is OperatorTag.SEM_AGGREGATE:
        cfg = _batch_config(settings, estimate_row_tokens(inputs[0]))
        return exec_aggregate(condition, inputs[0], cfg, backend, accounting=accounting)
    raise ExecutionError(f"{step.id}: unsupported semantic operator")


def execute_plan(
    dag: PlanDag,
    base: Mapping[str, Relation],
    backend: SemanticBackend,
    settings: ExecutionSettings | None = None,
    plan_id: str = "plan_0",
    trace_dir: str | Path | None = None,
) -> ExecutionReport:
    """Run every step in topological order and return the sink relation with
    lineage and token accounting."""
    settings = settings or ExecutionSettings()
    env = ExecEnv(base=dict(base))
    accounting = TokenAccounting()
    lineage: list[dict[str, Any]] = []

    for layer in topo_schedule(dag):
        for step_id in layer:
            step = dag.step(step_id)
            if step.op.is_semantic:
                result = _eval_semantic(step, env, backend, settings, accounting)
            else:
                result = eval_relational(_ensure_relational_params(step), env)
            materialize(step_id, result, env)
            lineage.append(
                {
                    "step": step_id,
                    "operator": step.op.wire,
                    "rows": len(result.rows),
                    "columns": list(result.column_names),
                }
            )
            if trace_dir is not None:
                _dump_csv(env.materialized[step_id], Path(trace_dir), plan_id)

    return ExecutionReport(
        plan_id=plan_id,
        result=env.materialized[dag.output],
        accounting=accounting,
        lineage=lineage,
    )


def _ensure_relational_params(step: PlanStep) -> PlanStep:
    if step.params is not None:
        return step
    if step.op is OperatorTag.SCAN and step.source:
        return step.with_(params={"table": step.source})
    try:
        return step.with_(params=templates.parse_instruction(step.op, step.instruction))
    except templates.TemplateParseError as exc:
        raise ExecutionError(f"{step.id}: step has no compiled params ({exc})") from exc


def _dump_csv(relation: Relation, trace_dir: Path, plan_id: str) -> None:
    target = trace_dir / plan_id
    target.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(relation.column_names)
    for row in relation.rows:
        writer.writerow(["" if c is None else c for c in row])
    (target / f"{relation.name}.csv").write_text(buf.getvalue(), encoding="utf-8")
