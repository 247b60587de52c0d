import pytest

from tandemql.backends import MockBackend
from tandemql.errors import BackendError, PlanningError
from tandemql.plan import OperatorTag, PlanStep
from tandemql.planner import (
    DIMENSIONS,
    DiversificationStrategy,
    build_preview,
    build_query_context,
    compile_instruction,
    compile_plan,
    ground_and_decompose,
    semantic_prune_schema,
    validate_params,
)
from tandemql.relation import AttributeKind, Relation
from tandemql.semantic import Usage


def catalog_db():
    tryouts = Relation.build(
        "tryout",
        [("tryout_id", AttributeKind.CATEGORICAL), ("position", AttributeKind.CATEGORICAL),
         ("notes", AttributeKind.TEXTUAL)],
        [(f"T{i}", "goalie" if i % 2 else "striker", f"note row {i}") for i in range(8)],
        primary_key=("tryout_id",),
    )
    return {"tryout": tryouts}


def test_prune_keeps_token_overlap_and_keys():
    db = catalog_db()
    kept = semantic_prune_schema(db, "which position had a tryout?", MockBackend())
    # "position" overlaps; "tryout_id" shares the token "tryout"; pk retained anyway
    assert "position" in kept["tryout"]
    assert "tryout_id" in kept["tryout"]
    assert "notes" not in kept["tryout"]


def test_prune_drops_hallucinated_column_and_readds_pk():
    class Hallucinating(MockBackend):
        def prune_schema(self, question, table, columns):
            return ["position", "ghost_column"], Usage(1, 1)

    kept = semantic_prune_schema(catalog_db(), "q", Hallucinating())
    assert kept["tryout"] == ["tryout_id", "position"]  # ghost dropped, pk re-added


def test_preview_subset_and_clamp():
    db = catalog_db()
    rel = db["tryout"]
    rows = build_preview(rel, "anything", k1=4, k2=10, backend=MockBackend(), seed=3)
    assert len(rows) == len(rel.rows)  # smaller than k1+k2 -> whole relation
    member_set = {tuple(r.values()) for r in rows}
    assert member_set <= {tuple(r) for r in rel.rows}


def test_preview_pure_random_when_k1_zero():
    rel = Relation.build(
        "t", [("x", AttributeKind.NUMERIC)], [(i,) for i in range(100)]
    )
    rows = build_preview(rel, "q", k1=0, k2=5, backend=MockBackend(), seed=3)
    assert len(rows) == 5
    again = build_preview(rel, "q", k1=0, k2=5, backend=MockBackend(), seed=3)
    assert rows == again  # seeded


def test_preview_semantic_ranking_rare_term():
    rel = Relation.build(
        "docs", [("text", AttributeKind.TEXTUAL)],
        [("common words here",), ("more common words",), ("the zyzzyva appears",),
         ("common again",), ("words words",)],
    )
    rows = build_preview(rel, "where is the zyzzyva?", k1=1, k2=0,
                         backend=MockBackend(), seed=0)
    assert rows[0]["text"] == "the zyzzyva appears"


def test_preview_embedding_failure_falls_back_to_random():
    class NoEmbed(MockBackend):
        def embed(self, text):
            raise BackendError("down")

    rel = Relation.build("t", [("x", AttributeKind.NUMERIC)], [(i,) for i in range(50)])
    rows = build_preview(rel, "q", k1=3, k2=4, backend=NoEmbed(), seed=1, retries=0)
    assert len(rows) == 8  # 2 * k2


def test_strategy_invariants():
    with pytest.raises(PlanningError):
        DiversificationStrategy(K=0)
    with pytest.raises(PlanningError):
        DiversificationStrategy(dimensions=("Nope",))
    with pytest.raises(PlanningError):
        DiversificationStrategy(dimensions=(), K=3)
    naive = DiversificationStrategy(dimensions=DIMENSIONS, K=3, naive=True)
    assert naive.strategy_text() == ""
    assert DiversificationStrategy().strategy_text().count("\n") == 3


PLAN_DOC = {
    "plans": [
        {"steps": [
            {"id": "step_1", "operator": "SCAN", "action": "Return rows from tryout",
             "parent": ["tryout"]},
            {"id": "step_2", "operator": "FILTER",
             "action": "Return rows from step_1 where position = 'goalie'",
             "parent": ["step_1"]},
        ]},
        {"steps": [  # cyclic: dropped
            {"id": "a", "operator": "FILTER", "action": "Return rows from b where x = 1",
             "parent": ["b"]},
            {"id": "b", "operator": "FILTER", "action": "Return rows from a where x = 2",
             "parent": ["a"]},
        ]},
        {"steps": [
            {"id": "s", "operator": "SCAN", "action": "Return rows from tryout",
             "parent": ["tryout"]},
        ]},
    ]
}


def context_for(question, db=None):
    backend = MockBackend({"plan": {question: PLAN_DOC}})
    ctx = build_query_context(db or catalog_db(), question, backend, k1=2, k2=2, seed=0)
    return ctx, backend


def test_decompose_drops_invalid_plans():
    ctx, backend = context_for("which position?")
    plans = ground_and_decompose(ctx, DiversificationStrategy(K=6), backend)
    assert len(plans) == 2  # cyclic plan dropped
    assert plans[0].output == "step_2"


def test_decompose_k_limits_plans():
    ctx, backend = context_for("which position?")
    plans = ground_and_decompose(ctx, DiversificationStrategy(K=1), backend)
    assert len(plans) == 1


def test_decompose_no_valid_plans_raises():
    question = "impossible"
    backend = MockBackend({"plan": {question: {"plans": [{"steps": [
        {"id": "x", "operator": "WAT", "action": "?", "parent": []}
    ]}]}}})
    ctx = build_query_context(catalog_db(), question, backend, seed=0)
    with pytest.raises(PlanningError):
        ground_and_decompose(ctx, DiversificationStrategy(K=2), backend)


# -- compilation -----------------------------------------------------------------


SCHEMA = [[("price", AttributeKind.NUMERIC), ("name", AttributeKind.TEXTUAL)]]


def test_compile_simple_filter():
    step = PlanStep("s2", OperatorTag.FILTER,
                    "Return rows from step_1 where price > 100", ("step_1",))
    compiled = compile_instruction(step, SCHEMA, [[]], MockBackend())
    assert compiled.params == {"column": "price", "op": ">", "value": 100}


def test_compile_retry_fixes_bad_column():
    script = [
        {"column": "prc", "op": ">", "value": 100},
        {"column": "price", "op": ">", "value": 100},
    ]
    attempts = []

    class Scripted(MockBackend):
        def translate(self, instruction, operator, schema, feedback):
            attempts.append(list(feedback))
            return script[len(attempts) - 1], Usage(1, 1)

    step = PlanStep("s2", OperatorTag.FILTER, "price above 100", ("step_1",))
    compiled = compile_instruction(step, SCHEMA, [[]], Scripted(), max_retries=3)
    assert compiled.params["column"] == "price"
    assert len(attempts) == 2
    assert any("prc" in err for err in attempts[1])  # the error was fed back


def test_compile_atomicity_rejected_every_round():
    step = PlanStep(
        "s2", OperatorTag.FILTER,
        "Return rows from step_1 where price > 1 AND name contains 'x'", ("step_1",),
    )
    with pytest.raises(PlanningError) as err:
        compile_instruction(step, SCHEMA, [[]], MockBackend(), max_retries=3)
    assert "3 attempts" in str(err.value)


def test_validate_params_type_checks():
    assert validate_params(
        OperatorTag.FILTER, {"column": "price", "op": ">", "value": "expensive"}, SCHEMA
    )
    assert not validate_params(
        OperatorTag.FILTER, {"column": "price", "op": ">", "value": 10}, SCHEMA
    )
    assert validate_params(OperatorTag.LIMIT, {"n": -1}, SCHEMA)
    assert validate_params(OperatorTag.AGGREGATE, {"func": "median", "column": "price"}, SCHEMA)
    assert not validate_params(
        OperatorTag.AGGREGATE, {"func": "avg", "column": "price", "group_by": []}, SCHEMA
    )


def test_compile_plan_end_to_end():
    ctx, backend = context_for("which position?")
    plans = ground_and_decompose(ctx, DiversificationStrategy(K=2), backend)
    compiled = compile_plan(plans[0], ctx.refined_db, backend)
    assert all(s.params is not None for s in compiled.steps)
    assert compiled.step("step_2").params["column"] == "position"


def test_planner_deterministic():
    q = "which position?"
    ctx1, b1 = context_for(q)
    ctx2, b2 = context_for(q)
    p1 = ground_and_decompose(ctx1, DiversificationStrategy(K=3), b1)
    p2 = ground_and_decompose(ctx2, DiversificationStrategy(K=3), b2)
    from tandemql.plan import serialize_plans
    assert serialize_plans(p1) == serialize_plans(p2)
    assert ctx1.preview == ctx2.preview


def test_prune_never_removes_key_columns_random_schemas():
    import random

    rng = random.Random(77)
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    for trial in range(25):
        cols = rng.sample(words, rng.randint(2, 5))
        pk = rng.choice(cols)
        fk = rng.choice(cols)
        rel = Relation.build(
            "t",
            [(c, AttributeKind.CATEGORICAL) for c in cols],
            [tuple(f"{c}{i}" for c in cols) for i in range(4)],
            primary_key=(pk,),
            foreign_keys={fk: ("other", "x")},
        )
        question = " ".join(rng.sample(words, 2))
        kept = semantic_prune_schema({"t": rel}, question, MockBackend())
        assert pk in kept["t"] and fk in kept["t"], f"trial {trial}"
