"""End-to-end query runs: preprocessing, planning, per-plan optimization,
concurrent execution, and consolidation, producing one deterministic
report object."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .backends import HttpBackend, MockBackend
from .config import RunConfig
from .consolidate import (
    CandidateResult,
    delegate,
    judge_select,
    majority_vote,
)
from .cost import Catalog
from .errors import ExecutionError, PlanningError, TandemError
from .optimizer import RewriteTrace, optimize
from .pipeline import execute_plan
from .plan import PlanDag
from .planner import (
    DIMENSIONS,
    DiversificationStrategy,
    build_query_context,
    compile_plan,
    ground_and_decompose,
)
from .relation import Relation
from .semantic import SemanticBackend, TokenAccounting

log = logging.getLogger(__name__)


def make_backend(spec: str) -> SemanticBackend:
    """Backend selection string: "mock", "mock:<rulebook.json>", or an
    http(s) endpoint URL."""
    if spec == "mock":
        return MockBackend()
    if spec.startswith("mock:"):
        return MockBackend.from_file(spec.split(":", 1)[1])
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpBackend(spec)
    raise TandemError(f"unknown backend spec {spec!r}; use mock[:rulebook] or an http URL")


@dataclass
class PlanOutcome:
    plan_id: str
    dag: Optional[PlanDag] = None
    trace: Optional[RewriteTrace] = None
    candidate: Optional[CandidateResult] = None
    error: Optional[str] = None


@dataclass
class RunResult:
    report: dict[str, Any]
    candidates: list[CandidateResult] = field(default_factory=list)
    selected: Optional[CandidateResult] = None

    @property
    def answer(self) -> str:
        return self.report.get("answer", "")


def run_query(
    db: Mapping[str, Relation],
    question: str,
    cfg: RunConfig,
    backend: SemanticBackend | None = None,
    trace_dir: str | Path | None = None,
) -> RunResult:
    backend = backend or make_backend(cfg.backend)
    planner_accounting = TokenAccounting()

    try:
        ctx = build_query_context(
            db,
            question,
            backend,
            k1=cfg.k1,
            k2=cfg.k2,
            seed=cfg.seed,
            retries=cfg.retries,
            accounting=planner_accounting,
            prune=cfg.prune_schema,
        )
        strategy = DiversificationStrategy(
            dimensions=DIMENSIONS, K=cfg.K, naive=not cfg.diversify
        )
        plans = ground_and_decompose(
            ctx, strategy, backend, retries=cfg.retries, accounting=planner_accounting
        )
    except PlanningError:
        raise
    except TandemError as exc:
        raise PlanningError(f"planning stage failed: {exc}") from exc

    catalog = Catalog.from_relations(ctx.refined_db)
    params = cfg.cost_params()
    outcomes: list[PlanOutcome] = []
    prepared: list[PlanOutcome] = []
    for i, dag in enumerate(plans):
        outcome = PlanOutcome(plan_id=f"plan_{i}")
        try:
            compiled = compile_plan(
                dag, ctx.refined_db, backend,
                max_retries=cfg.compile_retries, accounting=planner_accounting,
            )
            if cfg.optimize:
                optimized, trace = optimize(compiled, catalog, params)
            else:
                optimized, trace = compiled, RewriteTrace()
            outcome.dag, outcome.trace = optimized, trace
            prepared.append(outcome)
        except TandemError as exc:
            outcome.error = f"compile/optimize failed: {exc}"
            log.warning("%s dropped: %s", outcome.plan_id, exc)
        outcomes.append(outcome)

    def run_one(outcome: PlanOutcome) -> PlanOutcome:
        try:
            report = execute_plan(
                outcome.dag,
                ctx.refined_db,
                backend,
                settings=cfg.exec_settings(),
                plan_id=outcome.plan_id,
                trace_dir=trace_dir,
            )
            ti, to = report.accounting.totals()
            outcome.candidate = CandidateResult.from_relation(
                outcome.plan_id,
                report.result,
                metadata={
                    "tokens": {
                        "input_tokens": ti,
                        "output_tokens": to,
                        "calls": report.accounting.call_count(),
                    },
                    "lineage": report.lineage,
                    "steps": [
                        f"{s.id}: {s.op.wire} {s.instruction}".strip()
                        for s in outcome.dag.steps
                    ],
                    "accounting": report.accounting,
                },
            )
        except TandemError as exc:
            outcome.error = f"execution failed: {exc}"
            log.warning("%s failed: %s", outcome.plan_id, exc)
        return outcome

    workers = max(1, min(cfg.parallelism, len(prepared) or 1))
    if prepared:
        if workers == 1 or len(prepared) == 1:
            for o in prepared:
                run_one(o)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run_one, prepared))

    candidates = [o.candidate for o in outcomes if o.candidate is not None]
    if not candidates:
        raise ExecutionError(
            "all candidate plans failed: " + "; ".join(o.error or "?" for o in outcomes)
        )

    total = TokenAccounting()
    total.merge(planner_accounting)
    for c in candidates:
        total.merge(c.metadata["accounting"])

    consolidation_accounting = TokenAccounting()
    selected: Optional[CandidateResult] = None
    extra: dict[str, Any] = {}
    if cfg.mode == "vote":
        selected = majority_vote(candidates, accounting=consolidation_accounting)
    elif cfg.mode == "judge":
        selected = judge_select(
            question,
            candidates,
            backend,
            retries=cfg.retries,
            examples_path=cfg.judge_examples,
            accounting=consolidation_accounting,
        )
    elif cfg.mode == "delegate":
        extra["delegation"] = delegate(question, candidates)
    elif cfg.mode == "acc-at-k":
        extra["answers"] = [
            {"plan": c.plan_id, "answer": c.answer_text()} for c in candidates
        ]
    total.merge(consolidation_accounting)

    ti, to = total.totals()
    report: dict[str, Any] = {
        "question": question,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "k_requested": cfg.K,
        "k_planned": len(plans),
        "pruned_schema": ctx.pruned_schema,
        "plans": [
            {
                "plan": o.plan_id,
                "error": o.error,
                "steps": [
                    {
                        "id": s.id,
                        "operator": s.op.wire,
                        "action": s.instruction,
                        "parent": list(s.parents) or ([s.source] if s.source else []),
                    }
                    for s in (o.dag.steps if o.dag is not None else [])
                ],
                "rewrites": o.trace.to_dict() if o.trace is not None else None,
                "tokens": (o.candidate.metadata["tokens"] if o.candidate else None),
                "rows": (len(o.candidate.normalized["rows"]) if o.candidate else None),
                "answer": (o.candidate.answer_text() if o.candidate else None),
                "lineage": (o.candidate.metadata["lineage"] if o.candidate else None),
            }
            for o in outcomes
        ],
        "tokens": {"input_tokens": ti, "output_tokens": to, "calls": total.call_count()},
        **extra,
    }
    if selected is not None:
        report["selected_plan"] = selected.plan_id
        report["answer"] = selected.answer_text()
        report["result"] = selected.normalized
    elif cfg.mode == "acc-at-k" and candidates:
        report["answer"] = "; ".join(f"{c.plan_id}: {c.answer_text()}" for c in candidates)
    elif cfg.mode == "delegate":
        report["answer"] = f"(delegated: {len(candidates)} candidate results)"

    return RunResult(report=report, candidates=candidates, selected=selected)
