import json

import pytest

from tandemql.errors import PlanError
from tandemql.plan import (
    OperatorTag,
    PlanDag,
    PlanStep,
    parse_plan,
    serialize_plans,
    topo_schedule,
    validate,
)


def doc(*plans):
    return json.dumps({"plans": list(plans)}).encode()


def steps(*entries):
    return {"steps": list(entries)}


SCAN = {"id": "step_1", "operator": "SCAN", "action": "Return rows from products",
        "parent": ["products"]}
FILTER = {"id": "step_2", "operator": "FILTER",
          "action": "Return rows from step_1 where name contains 'Apple'",
          "parent": ["step_1"]}


def test_parse_two_step_plan():
    plans = parse_plan(doc(steps(SCAN, FILTER)))
    assert len(plans) == 1
    dag = plans[0]
    assert dag.output == "step_2"
    assert dag.step("step_1").source == "products"
    assert dag.step("step_2").parents == ("step_1",)


def test_unknown_operator_drops_plan_keeps_others():
    bad = steps({**SCAN, "operator": "FROBNICATE"})
    diagnostics = []
    plans = parse_plan(doc(bad, steps(SCAN, FILTER)), diagnostics)
    assert len(plans) == 1
    assert "plan 0" in diagnostics[0]


def test_dangling_parent_drops_plan():
    broken = steps(SCAN, {**FILTER, "parent": ["step_9"]})
    diagnostics = []
    assert parse_plan(doc(broken), diagnostics) == []
    assert "dangling" in diagnostics[0]


def test_cycle_drops_plan():
    a = {"id": "step_1", "operator": "FILTER", "action": "Return rows from step_2 where x = 1",
         "parent": ["step_2"]}
    b = {"id": "step_2", "operator": "FILTER", "action": "Return rows from step_1 where x = 2",
         "parent": ["step_1"]}
    diagnostics = []
    assert parse_plan(doc(steps(a, b)), diagnostics) == []
    assert diagnostics


def test_document_level_errors():
    with pytest.raises(PlanError):
        parse_plan(b"not json")
    with pytest.raises(PlanError):
        parse_plan(b'{"plans": []}')


def test_validate_ok_chain():
    dag = parse_plan(doc(steps(SCAN, FILTER)))[0]
    assert validate(dag).ok


def test_validate_atomicity_violation():
    step = PlanStep("f", OperatorTag.FILTER, "",
                    parents=("s",), params={"condition": "a > 1 AND b < 2"})
    scan = PlanStep("s", OperatorTag.SCAN, "", source="t")
    result = validate(PlanDag.from_steps([scan, step]))
    assert "atomicity" in result.kinds()


def test_validate_join_arity():
    scan = PlanStep("s", OperatorTag.SCAN, "", source="t")
    join = PlanStep("j", OperatorTag.JOIN, "", parents=("s",))
    result = validate(PlanDag.from_steps([scan, join]))
    assert "arity" in result.kinds()


def test_validate_multiple_sinks():
    scan = PlanStep("s", OperatorTag.SCAN, "", source="t")
    f1 = PlanStep("f1", OperatorTag.FILTER, "", parents=("s",), params={"column": "x", "op": "="})
    f2 = PlanStep("f2", OperatorTag.FILTER, "", parents=("s",), params={"column": "x", "op": "="})
    result = validate(PlanDag.from_steps([scan, f1, f2]))
    assert "sink" in result.kinds()


def test_topo_schedule_chain_and_diamond():
    scan = PlanStep("a", OperatorTag.SCAN, "", source="t")
    b = PlanStep("b", OperatorTag.FILTER, "", parents=("a",), params={"column": "x", "op": "="})
    c = PlanStep("c", OperatorTag.FILTER, "", parents=("b",), params={"column": "x", "op": "="})
    assert topo_schedule(PlanDag.from_steps([scan, b, c])) == [["a"], ["b"], ["c"]]

    d1 = PlanStep("b", OperatorTag.FILTER, "", parents=("a",), params={"column": "x", "op": "="})
    d2 = PlanStep("c", OperatorTag.DISTINCT, "", parents=("a",), params={"columns": []})
    top = PlanStep("d", OperatorTag.JOIN, "", parents=("b", "c"),
                   params={"left": "x", "right": "x"})
    layers = topo_schedule(PlanDag.from_steps([scan, d1, d2, top]))
    assert layers == [["a"], ["b", "c"], ["d"]]


def test_topo_schedule_single_scan():
    dag = PlanDag.from_steps([PlanStep("scan", OperatorTag.SCAN, "", source="t")])
    assert topo_schedule(dag) == [["scan"]]


def test_layer_assignment_is_longest_path():
    scan = PlanStep("a", OperatorTag.SCAN, "", source="t")
    mid = PlanStep("b", OperatorTag.FILTER, "", parents=("a",), params={"column": "x", "op": "="})
    join = PlanStep("j", OperatorTag.JOIN, "", parents=("a", "b"),
                    params={"left": "x", "right": "x"})
    layers = topo_schedule(PlanDag.from_steps([scan, mid, join]))
    assert layers == [["a"], ["b"], ["j"]]  # join waits for the longer path


def test_round_trip_identity():
    original = parse_plan(doc(steps(SCAN, FILTER)))
    blob = serialize_plans(original)
    again = parse_plan(blob)
    assert again == original


def test_round_trip_preserves_params():
    dag = parse_plan(doc(steps(SCAN, FILTER)))[0]
    compiled = dag.replace_steps(
        [s.with_(params={"table": "products"}) if s.op is OperatorTag.SCAN else
         s.with_(params={"column": "name", "op": "contains", "value": "Apple"})
         for s in dag.steps]
    )
    again = parse_plan(serialize_plans([compiled]))[0]
    assert again == compiled


def test_semantic_wire_names():
    assert OperatorTag.from_wire("LLM_DERIVE") is OperatorTag.SEM_MAP
    assert OperatorTag.from_wire("llm_filter") is OperatorTag.SEM_FILTER
    assert OperatorTag.SEM_JOIN.wire == "LLM_JOIN"
    assert OperatorTag.SEM_MAP.is_semantic and not OperatorTag.FILTER.is_semantic


def test_any_schedule_consistent_order_same_results():
    from itertools import permutations

    from tandemql.backends import MockBackend
    from tandemql.pipeline import execute_plan
    from tandemql.relation import AttributeKind, Relation

    base = Relation.build(
        "t", [("x", AttributeKind.NUMERIC), ("y", AttributeKind.NUMERIC)],
        [(i, i * 3) for i in range(20)],
    )
    scan = PlanStep("a", OperatorTag.SCAN, "", (), {"table": "t"}, "t")
    left = PlanStep("b", OperatorTag.FILTER, "", ("a",),
                    {"column": "x", "op": "<", "value": 15})
    right = PlanStep("c", OperatorTag.FILTER, "", ("a",),
                     {"column": "x", "op": ">", "value": 5})
    top = PlanStep("d", OperatorTag.SET_OP, "", ("b", "c"), {"kind": "intersection"})

    # any ordering of the middle layer produces the same sink relation
    results = []
    for mid in permutations([left, right]):
        dag = PlanDag.from_steps([scan, *mid, top])
        results.append(execute_plan(dag, {"t": base}, MockBackend()).result.rows)
    assert results[0] == results[1]
