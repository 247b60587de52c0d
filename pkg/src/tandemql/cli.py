"""Command-line entry point: ingest, run, optimize, calibrate.

Exit codes: 0 success; 2 ingest failure; 3 planning failure; 4 execution
failure; 5 consolidation failure; 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bundle
from .config import build_config
from .cost import Catalog, WorkloadSpec, calibrate, estimate_plan, plan_cost
from .errors import (
    BackendError,
    CalibrationError,
    ExecutionError,
    IngestError,
    PlanError,
    PlanningError,
    TandemError,
)
from .ingest import IngestFormat, PruneThresholds, clean_normalize, heuristic_prune, ingest_table
from .optimizer import optimize
from .plan import parse_plan, serialize_plans
from .planner import compile_plan
from .runner import make_backend, run_query

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_INGEST = 2
EXIT_PLAN = 3
EXIT_EXECUTE = 4
EXIT_CONSOLIDATE = 5


def _dump_json(payload, path: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False, default=str)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _config_overrides(args: argparse.Namespace) -> dict:
    mapping = {
        "k": "K",
        "beta": "b",
        "bmax": "B_max",
        "epsilon": "epsilon",
        "tau": "tau",
        "mode": "mode",
        "backend": "backend",
        "seed": "seed",
        "w_sys": "w_sys",
        "w_llm": "w_llm",
        "k1": "k1",
        "k2": "k2",
        "parallelism": "parallelism",
    }
    overrides = {
        cfg_key: getattr(args, arg_key)
        for arg_key, cfg_key in mapping.items()
        if hasattr(args, arg_key) and getattr(args, arg_key) is not None
    }
    if getattr(args, "no_opt", False):
        overrides["optimize"] = False
    if getattr(args, "no_diversify", False):
        overrides["diversify"] = False
    if getattr(args, "no_prune", False):
        overrides["prune_schema"] = False
    return overrides


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--k", type=int, help="number of candidate plans")
    p.add_argument("--beta", type=int, help="base batch size b")
    p.add_argument("--bmax", type=float, help="token budget per backend call")
    p.add_argument("--epsilon", type=float, help="semantic deferral threshold")
    p.add_argument("--tau", type=int, help="DP/greedy join-reordering switch")
    p.add_argument("--w-sys", dest="w_sys", type=float, help="relational cost weight")
    p.add_argument("--w-llm", dest="w_llm", type=float, help="inference cost weight")
    p.add_argument("--k1", type=int, help="semantically retrieved preview rows")
    p.add_argument("--k2", type=int, help="random preview rows")
    p.add_argument("--parallelism", type=int, help="max concurrent backend calls/plans")
    p.add_argument("--mode", choices=["vote", "judge", "delegate", "acc-at-k"])
    p.add_argument("--backend", help="mock, mock:<rulebook.json>, or http(s) endpoint")
    p.add_argument("--seed", type=int, help="seed for every random choice")
    p.add_argument("--no-opt", action="store_true", help="skip plan optimization")
    p.add_argument("--no-diversify", action="store_true", help="strategy-free planning prompt")
    p.add_argument("--no-prune", action="store_true", help="skip semantic schema pruning")


def cmd_ingest(args: argparse.Namespace) -> int:
    relations = {}
    try:
        cfg = build_config(args.config, {})
        thresholds = PruneThresholds(
            null_fraction=cfg.prune_null_fraction,
            dominance=cfg.prune_dominance,
            noninformative=cfg.prune_noninformative,
        )
        for path in args.inputs:
            p = Path(path)
            fmt = (
                IngestFormat(args.format)
                if args.format
                else (IngestFormat.JSONL if p.suffix.lower() in (".jsonl", ".ndjson") else IngestFormat.CSV)
            )
            name = p.stem.lower()
            rel = ingest_table(
                p.read_bytes(), fmt, name, date_formats=cfg.date_formats or None
            )
            rel = clean_normalize(rel)
            rel = _apply_keys(rel, args.key or [], args.foreign_key or [])
            if not args.keep_noise:
                rel, report = heuristic_prune(rel, thresholds)
                for column, rule, detail in report.entries:
                    log.info("pruned %s.%s (%s: %s)", name, column, rule, detail)
            relations[rel.name] = rel
        bundle.save(relations, args.out)
    except (IngestError, OSError, TandemError) as exc:
        print(f"ingest failed: {exc}", file=sys.stderr)
        return EXIT_INGEST
    print(f"wrote {len(relations)} relation(s) to {args.out}")
    return EXIT_OK


def _apply_keys(rel, primary_specs: list[str], foreign_specs: list[str]):
    primary = []
    for spec in primary_specs:
        table, _, col = spec.partition(".")
        if table == rel.name:
            primary.append(col)
    foreign = {}
    for spec in foreign_specs:
        left, _, right = spec.partition("=")
        table, _, col = left.strip().partition(".")
        r_table, _, r_col = right.strip().partition(".")
        if table == rel.name:
            foreign[col] = (r_table, r_col)
    if not primary and not foreign:
        return rel
    return dataclasses.replace(
        rel, primary_key=tuple(primary), foreign_keys=foreign
    )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = build_config(args.config, _config_overrides(args))
        db = bundle.load(args.db)
    except (TandemError, OSError) as exc:
        print(f"cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_INGEST
    try:
        backend = make_backend(cfg.backend)
    except TandemError as exc:
        print(f"backend: {exc}", file=sys.stderr)
        return EXIT_GENERIC
    try:
        result = run_query(db, args.question, cfg, backend=backend, trace_dir=args.trace_dir)
    except (PlanningError, PlanError) as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except (ExecutionError, BackendError) as exc:
        print(f"execution failed: {exc}", file=sys.stderr)
        return EXIT_EXECUTE
    except TandemError as exc:
        print(f"consolidation failed: {exc}", file=sys.stderr)
        return EXIT_CONSOLIDATE
    _dump_json(result.report, args.out)
    if args.out:
        print(f"answer: {result.answer}")
    return EXIT_OK


def cmd_optimize(args: argparse.Namespace) -> int:
    try:
        cfg = build_config(args.config, _config_overrides(args))
        db = bundle.load(args.db)
        document = Path(args.plans_file).read_bytes()
        plans = parse_plan(document)
    except (TandemError, OSError) as exc:
        print(f"cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_INGEST
    if not plans:
        print("no valid plans in the plan file", file=sys.stderr)
        return EXIT_PLAN

    backend = make_backend(cfg.backend)
    params = cfg.cost_params()
    catalog = Catalog.from_relations(db)
    optimized = []
    traces = []
    try:
        for i, dag in enumerate(plans):
            compiled = compile_plan(dag, db, backend, max_retries=cfg.compile_retries)
            cost_in = plan_cost(compiled, estimate_plan(compiled, catalog, params), params)
            if cfg.optimize:
                better, trace = optimize(compiled, catalog, params)
            else:
                from .optimizer import RewriteTrace

                better, trace = compiled, RewriteTrace()
            cost_out = plan_cost(better, estimate_plan(better, catalog, params), params)
            print(f"plan_{i}: cost {cost_in:.6g} -> {cost_out:.6g}")
            optimized.append(better)
            traces.append(trace.to_dict())
    except (PlanningError, PlanError) as exc:
        print(f"compilation failed: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except TandemError as exc:
        print(f"optimization failed: {exc}", file=sys.stderr)
        return EXIT_GENERIC

    Path(args.out).write_bytes(serialize_plans(optimized))
    if args.explain:
        _dump_json(traces, None)
    if args.trace_out:
        _dump_json(traces, args.trace_out)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    try:
        cfg = build_config(args.config, _config_overrides(args))
        sizes = tuple(int(s) for s in (args.sizes.split(",") if args.sizes else (1000, 5000, 20000)))
        backend_stats = None
        if args.backend_stats and not args.no_backend:
            backend_stats = [
                (int(t), float(s))
                for t, s in json.loads(Path(args.backend_stats).read_text())
            ]
        result = calibrate(
            WorkloadSpec(sizes=sizes, seed=cfg.seed),
            backend_stats=backend_stats,
            defaults=cfg.cost_params(),
        )
    except (CalibrationError, TandemError, OSError, ValueError) as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_GENERIC
    payload = {"params": dataclasses.asdict(result.params), "report": result.report}
    _dump_json(payload, args.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tandemql",
        description="Hybrid query processing over semi-structured tables",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="build a database bundle from CSV/JSONL files")
    p_ingest.add_argument("inputs", nargs="+", help="input table files")
    p_ingest.add_argument("--out", required=True, help="bundle file to write")
    p_ingest.add_argument("--format", choices=["csv", "jsonl"], help="force input format")
    p_ingest.add_argument("--key", action="append", help="primary key, as table.column")
    p_ingest.add_argument(
        "--foreign-key", action="append", help="foreign key, as table.column=table2.column"
    )
    p_ingest.add_argument("--keep-noise", action="store_true", help="skip heuristic pruning")
    p_ingest.add_argument("--config", help="TOML or JSON config (date formats, prune thresholds)")
    p_ingest.set_defaults(fn=cmd_ingest)

    p_run = sub.add_parser("run", help="answer a question over a bundle")
    p_run.add_argument("--db", required=True, help="database bundle")
    p_run.add_argument("--question", required=True)
    p_run.add_argument("--out", help="report file (stdout when omitted)")
    p_run.add_argument("--trace-dir", help="dump intermediate relations as CSV here")
    _add_config_flags(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_opt = sub.add_parser("optimize", help="optimize a plan file against a bundle")
    p_opt.add_argument("--plans-file", required=True)
    p_opt.add_argument("--db", required=True)
    p_opt.add_argument("--out", required=True, help="optimized plan file")
    p_opt.add_argument("--trace-out", help="rewrite trace JSON file")
    p_opt.add_argument("--explain", action="store_true", help="print the rewrite trace")
    _add_config_flags(p_opt)
    p_opt.set_defaults(fn=cmd_optimize)

    p_cal = sub.add_parser("calibrate", help="fit cost-model constants on a synthetic workload")
    p_cal.add_argument("--out", help="params file (stdout when omitted)")
    p_cal.add_argument("--sizes", help="comma-separated synthetic table sizes")
    p_cal.add_argument("--backend-stats", help="JSON file of [tokens, seconds] call samples")
    p_cal.add_argument("--no-backend", action="store_true", help="keep call/token defaults")
    _add_config_flags(p_cal)
    p_cal.set_defaults(fn=cmd_calibrate)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
