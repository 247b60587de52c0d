"""tandemql: hybrid query processing over semi-structured tables.

Plans are DAGs of atomic relational and semantic operators. Relational
steps run on a deterministic in-memory evaluator; semantic steps are
batched against a pluggable backend (deterministic mock or HTTP). A cost
model that prices backend inference drives plan optimization, and
multiple candidate plans are consolidated into one answer.
"""

from .relation import AttributeKind, AttributeProfile, Column, Relation
from .ingest import IngestFormat, clean_normalize, heuristic_prune, ingest_table
from .plan import OperatorTag, PlanDag, PlanStep, parse_plan, serialize_plans, topo_schedule, validate
from .cost import (
    CardinalityEstimate,
    Catalog,
    CostModelParams,
    calibrate,
    estimate_join_card,
    estimate_plan,
    estimate_union_card,
    llm_cost,
    plan_cost,
    sys_cost,
)
from .optimizer import RewriteTrace, dp_join_order, greedy_join_order, optimize
from .relational import ExecEnv, eval_relational, materialize
from .semantic import (
    BatchConfig,
    SemanticBackend,
    TokenAccounting,
    compute_batch_size,
    exec_aggregate,
    exec_filter,
    exec_join,
    exec_map,
)
from .backends import HttpBackend, MockBackend
from .planner import DiversificationStrategy, QueryContext, build_preview, compile_instruction, ground_and_decompose, semantic_prune_schema
from .consolidate import CandidateResult, delegate, judge_select, majority_vote, normalize_answer
from .pipeline import ExecutionReport, ExecutionSettings, execute_plan
from .runner import RunConfig, RunResult, make_backend, run_query

__version__ = "0.1.0"

__all__ = [
    "AttributeKind",
    "AttributeProfile",
    "BatchConfig",
    "CandidateResult",
    "CardinalityEstimate",
    "Catalog",
    "Column",
    "CostModelParams",
    "DiversificationStrategy",
    "ExecEnv",
    "ExecutionReport",
    "ExecutionSettings",
    "HttpBackend",
    "IngestFormat",
    "MockBackend",
    "OperatorTag",
    "PlanDag",
    "PlanStep",
    "QueryContext",
    "Relation",
    "RewriteTrace",
    "RunConfig",
    "RunResult",
    "SemanticBackend",
    "TokenAccounting",
    "calibrate",
    "clean_normalize",
    "compile_instruction",
    "compute_batch_size",
    "delegate",
    "dp_join_order",
    "estimate_join_card",
    "estimate_plan",
    "estimate_union_card",
    "eval_relational",
    "exec_aggregate",
    "exec_filter",
    "exec_join",
    "exec_map",
    "execute_plan",
    "greedy_join_order",
    "ground_and_decompose",
    "heuristic_prune",
    "ingest_table",
    "judge_select",
    "llm_cost",
    "majority_vote",
    "make_backend",
    "materialize",
    "normalize_answer",
    "optimize",
    "parse_plan",
    "plan_cost",
    "run_query",
    "semantic_prune_schema",
    "serialize_plans",
    "sys_cost",
    "topo_schedule",
    "validate",
]
