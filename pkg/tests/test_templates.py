import pytest

from tandemql.plan import OperatorTag
from tandemql.templates import (
    TemplateParseError,
    parse_condition,
    parse_instruction,
    render_instruction,
)


CASES = [
    (OperatorTag.SCAN, {"table": "products"}, ()),
    (OperatorTag.FILTER, {"column": "price", "op": ">", "value": 100}, ("step_1",)),
    (OperatorTag.FILTER, {"column": "name", "op": "contains", "value": "Apple"}, ("step_1",)),
    (OperatorTag.FILTER, {"column": "state", "op": "is not null"}, ("step_1",)),
    (OperatorTag.FILTER, {"column": "tag", "op": "in", "value": ["a", "b"]}, ("step_1",)),
    (OperatorTag.PROJECT, {"columns": [{"name": "a", "expr": "a"}, {"name": "b", "expr": "b"}]}, ("step_1",)),
    (OperatorTag.AGGREGATE, {"func": "avg", "column": "salary", "group_by": ["dept"]}, ("step_1",)),
    (OperatorTag.AGGREGATE, {"func": "count", "column": "*", "group_by": []}, ("step_1",)),
    (OperatorTag.SORT, {"column": "price", "direction": "desc"}, ("step_1",)),
    (OperatorTag.LIMIT, {"n": 5}, ("step_1",)),
    (OperatorTag.JOIN, {"left": "user_id", "right": "buyer", "op": "="}, ("step_1", "step_2")),
    (OperatorTag.SET_OP, {"kind": "union"}, ("step_1", "step_2")),
    (OperatorTag.DISTINCT, {"columns": ["city"]}, ("step_1",)),
    (OperatorTag.DISTINCT, {"columns": []}, ("step_1",)),
    (OperatorTag.SEM_FILTER, {"condition": "mentions a goalie"}, ("step_1",)),
    (OperatorTag.SEM_JOIN, {"condition": "same company"}, ("step_1", "step_2")),
]


@pytest.mark.parametrize("op,params,parents", CASES)
def test_render_parse_round_trip(op, params, parents):
    text = render_instruction(op, params, parents)
    parsed = parse_instruction(op, text)
    for key, value in params.items():
        assert parsed[key] == value


def test_map_round_trip_keeps_new_column():
    params = {"new_column": "state", "inputs": "blurb", "condition": "extract the state"}
    text = render_instruction(OperatorTag.SEM_MAP, params, ("step_1",))
    parsed = parse_instruction(OperatorTag.SEM_MAP, text)
    assert parsed["new_column"] == "state"
    assert parsed["condition"] == "extract the state"


def test_sem_aggregate_round_trip():
    params = {"column": "notes", "group_by": ["city"], "condition": "summarize complaints"}
    text = render_instruction(OperatorTag.SEM_AGGREGATE, params, ("step_1",))
    parsed = parse_instruction(OperatorTag.SEM_AGGREGATE, text)
    assert parsed["group_by"] == ["city"]
    assert parsed["condition"] == "summarize complaints"


def test_parse_condition_variants():
    assert parse_condition("price >= 10.5") == {"column": "price", "op": ">=", "value": 10.5}
    assert parse_condition("name contains 'Apple'") == {
        "column": "name", "op": "contains", "value": "Apple",
    }
    assert parse_condition("x is null") == {"column": "x", "op": "is null"}
    assert parse_condition("tag not in ('a', 'b')") == {
        "column": "tag", "op": "not in", "value": ["a", "b"],
    }


def test_filter_instruction_worked_example():
    parsed = parse_instruction(
        OperatorTag.FILTER, "Return rows from step_1 where name contains 'Apple'"
    )
    assert parsed == {"column": "name", "op": "contains", "value": "Apple"}


def test_off_template_instruction_rejected():
    with pytest.raises(TemplateParseError):
        parse_instruction(OperatorTag.FILTER, "please filter the table nicely")
    with pytest.raises(TemplateParseError):
        parse_condition("gibberish")


def test_project_expression_alias():
    parsed = parse_instruction(
        OperatorTag.PROJECT, "Return total AS revenue, name of step_1"
    )
    assert parsed["columns"][0] == {"name": "revenue", "expr": "total"}
