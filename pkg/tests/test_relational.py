from collections import Counter
from datetime import datetime

import pytest
from hypothesis import given, settings, strategies as st

from tandemql.errors import ExecutionError, SchemaError
from tandemql.plan import OperatorTag, PlanStep
from tandemql.relation import AttributeKind, Relation
from tandemql.relational import (
    ExecEnv,
    compare,
    eval_relational,
    infer_output_columns,
    materialize,
)


def run(op, params, *inputs, parents=None, source=None):
    env = ExecEnv(base={r.name: r for r in inputs})
    pids = []
    for i, rel in enumerate(inputs):
        pid = f"in_{i}"
        env.materialized[pid] = rel
        pids.append(pid)
    step = PlanStep(
        "t", op, "", tuple(parents if parents is not None else pids), params, source
    )
    return eval_relational(step, env)


def rel(name, cols, rows):
    return Relation.build(name, cols, rows)


@pytest.fixture
def prices():
    return rel("items", [("id", AttributeKind.NUMERIC), ("price", AttributeKind.NUMERIC)],
               [(1, 50), (2, 150), (3, 120)])


def test_filter_greater_than(prices):
    out = run(OperatorTag.FILTER, {"column": "price", "op": ">", "value": 100}, prices)
    assert [r[1] for r in out.rows] == [150, 120]


def test_filter_null_semantics():
    data = rel("t", [("x", AttributeKind.NUMERIC)], [(1,), (None,), (3,)])
    assert len(run(OperatorTag.FILTER, {"column": "x", "op": ">", "value": 0}, data).rows) == 2
    assert len(run(OperatorTag.FILTER, {"column": "x", "op": "is null"}, data).rows) == 1
    assert len(run(OperatorTag.FILTER, {"column": "x", "op": "is not null"}, data).rows) == 2
    assert len(run(OperatorTag.FILTER, {"column": "x", "op": "!=", "value": 1}, data).rows) == 1


def test_filter_operators_contains_in():
    data = rel("t", [("s", AttributeKind.TEXTUAL)], [("apple pie",), ("banana",), (None,)])
    assert len(run(OperatorTag.FILTER, {"column": "s", "op": "contains", "value": "apple"}, data).rows) == 1
    assert len(run(OperatorTag.FILTER, {"column": "s", "op": "in", "value": ["banana", "kiwi"]}, data).rows) == 1
    assert len(run(OperatorTag.FILTER, {"column": "s", "op": "not in", "value": ["banana"]}, data).rows) == 1


def test_join_users_orders(users_orders):
    users, orders = users_orders
    out = run(OperatorTag.JOIN, {"left": "user_id", "right": "user_id", "op": "="},
              users, orders)
    # same-name equi key collapses into one column
    assert out.column_names == ("user_id", "name", "amount")
    assert sorted(r[2] for r in out.rows) == [50, 100]
    assert all(r[1] == "Alice" for r in out.rows)


def test_join_theta():
    a = rel("a", [("x", AttributeKind.NUMERIC)], [(1,), (5,)])
    b = rel("b", [("y", AttributeKind.NUMERIC)], [(3,), (4,)])
    out = run(OperatorTag.JOIN, {"left": "x", "right": "y", "op": "<"}, a, b)
    assert Counter(out.rows) == Counter({(1, 3): 1, (1, 4): 1})


def test_join_conflict_renaming():
    a = rel("a", [("k", AttributeKind.NUMERIC), ("v", AttributeKind.NUMERIC)], [(1, 10)])
    b = rel("b", [("j", AttributeKind.NUMERIC), ("v", AttributeKind.NUMERIC)], [(1, 20)])
    out = run(OperatorTag.JOIN, {"left": "k", "right": "j", "op": "="}, a, b)
    assert out.column_names == ("k", "v", "j", "b_v")  # prefix is the right input's name
    assert out.rows == ((1, 10, 1, 20),)


def test_aggregate_avg_example():
    data = rel("t", [("salary", AttributeKind.NUMERIC)], [(80000,), (90000,)])
    out = run(OperatorTag.AGGREGATE, {"func": "avg", "column": "salary", "group_by": []}, data)
    assert out.rows == ((85000.0,),)


def test_aggregate_group_by():
    data = rel("t", [("d", AttributeKind.CATEGORICAL), ("x", AttributeKind.NUMERIC)],
               [("a", 1), ("b", 5), ("a", 3), ("b", None)])
    out = run(OperatorTag.AGGREGATE, {"func": "sum", "column": "x", "group_by": ["d"]}, data)
    assert out.column_names == ("d", "sum_x")
    assert out.rows == (("a", 4), ("b", 5))
    counts = run(OperatorTag.AGGREGATE, {"func": "count", "column": "x", "group_by": ["d"]}, data)
    assert counts.rows == (("a", 2), ("b", 1))


def test_aggregate_count_star_and_empty():
    data = rel("t", [("x", AttributeKind.NUMERIC)], [])
    out = run(OperatorTag.AGGREGATE, {"func": "count", "column": "*", "group_by": []}, data)
    assert out.rows == ((0,),)
    out2 = run(OperatorTag.AGGREGATE, {"func": "sum", "column": "x", "group_by": []}, data)
    assert out2.rows == ((None,),)


def test_aggregate_type_mismatch():
    data = rel("t", [("s", AttributeKind.TEXTUAL)], [("a",)])
    with pytest.raises(ExecutionError):
        run(OperatorTag.AGGREGATE, {"func": "sum", "column": "s", "group_by": []}, data)


def test_project_select_rename_compute():
    data = rel("t", [("a", AttributeKind.NUMERIC), ("b", AttributeKind.NUMERIC)], [(2, 3)])
    out = run(OperatorTag.PROJECT, {"columns": [
        {"name": "a", "expr": "a"},
        {"name": "renamed", "expr": "b"},
        {"name": "total", "expr": "a * b + 1"},
    ]}, data)
    assert out.column_names == ("a", "renamed", "total")
    assert out.rows == ((2, 3, 7),)


def test_project_null_propagates_through_arithmetic():
    data = rel("t", [("a", AttributeKind.NUMERIC)], [(None,)])
    out = run(OperatorTag.PROJECT, {"columns": [{"name": "y", "expr": "a + 1"}]}, data)
    assert out.rows == ((None,),)


def test_sort_stable_and_nulls_last():
    data = rel("t", [("k", AttributeKind.NUMERIC), ("tag", AttributeKind.CATEGORICAL)],
               [(2, "first"), (1, "x"), (2, "second"), (None, "null"), (1, "y")])
    out = run(OperatorTag.SORT, {"column": "k", "direction": "asc"}, data)
    assert [r[1] for r in out.rows] == ["x", "y", "first", "second", "null"]
    desc = run(OperatorTag.SORT, {"column": "k", "direction": "desc"}, data)
    assert [r[1] for r in desc.rows] == ["first", "second", "x", "y", "null"]


def test_limit(prices):
    out = run(OperatorTag.LIMIT, {"n": 2}, prices)
    assert len(out.rows) == 2 and out.rows[0][0] == 1


def test_set_ops():
    a = rel("a", [("x", AttributeKind.NUMERIC)], [(1,), (2,), (2,), (3,)])
    b = rel("b", [("x", AttributeKind.NUMERIC)], [(2,), (4,)])
    union = run(OperatorTag.SET_OP, {"kind": "union"}, a, b)
    assert len(union.rows) == 6  # bag semantics
    inter = run(OperatorTag.SET_OP, {"kind": "intersection"}, a, b)
    assert inter.rows == ((2,),)  # set semantics
    diff = run(OperatorTag.SET_OP, {"kind": "difference"}, a, b)
    assert diff.rows == ((1,), (3,))


def test_set_op_schema_mismatch():
    a = rel("a", [("x", AttributeKind.NUMERIC)], [(1,)])
    b = rel("b", [("y", AttributeKind.NUMERIC)], [(1,)])
    with pytest.raises(SchemaError):
        run(OperatorTag.SET_OP, {"kind": "union"}, a, b)


def test_distinct_keeps_first_occurrence():
    data = rel("t", [("k", AttributeKind.NUMERIC), ("v", AttributeKind.CATEGORICAL)],
               [(1, "first"), (1, "second"), (2, "x")])
    out = run(OperatorTag.DISTINCT, {"columns": ["k"]}, data)
    assert out.rows == ((1, "first"), (2, "x"))
    all_cols = run(OperatorTag.DISTINCT, {"columns": []}, data)
    assert len(all_cols.rows) == 3


def test_scan_and_materialize(prices):
    env = ExecEnv(base={"items": prices})
    step = PlanStep("s1", OperatorTag.SCAN, "", (), {"table": "items"})
    out = eval_relational(step, env)
    materialize("s1", out, env)
    assert env.resolve("s1").name == "s1"
    assert len(env.resolve("s1").rows) == 3
    with pytest.raises(ExecutionError):
        materialize("s1", out, env)
    # materialized profiles match recomputation
    stored = env.resolve("s1")
    assert stored.reprofiled().columns == stored.columns


def test_unknown_column_and_missing_params(prices):
    with pytest.raises(SchemaError):
        run(OperatorTag.FILTER, {"column": "nope", "op": "=", "value": 1}, prices)
    env = ExecEnv(base={"items": prices})
    with pytest.raises(ExecutionError):
        eval_relational(PlanStep("x", OperatorTag.FILTER, "", ("items",), None), env)


def test_compare_cross_category_is_false():
    assert not compare(1, "=", "1")
    assert not compare("a", "<", 5)
    assert compare(datetime(2021, 1, 1), "<", "2022-01-01")
    assert not compare(True, "=", 1)  # booleans are their own category


# -- algebraic laws ------------------------------------------------------------


rows_strategy = st.lists(
    st.tuples(
        st.one_of(st.none(), st.integers(-5, 5)),
        st.one_of(st.none(), st.sampled_from(["a", "b", "c"])),
        st.integers(0, 3),
    ),
    max_size=40,
)


def make_rel(rows, name="t"):
    return rel(name, [("x", AttributeKind.NUMERIC), ("c", AttributeKind.CATEGORICAL),
                      ("k", AttributeKind.NUMERIC)], rows)


@given(rows_strategy)
@settings(max_examples=60, deadline=None)
def test_filters_commute(rows):
    data = make_rel(rows)
    p = {"column": "x", "op": ">", "value": 0}
    q = {"column": "c", "op": "=", "value": "a"}
    pq = run(OperatorTag.FILTER, q, run(OperatorTag.FILTER, p, data))
    qp = run(OperatorTag.FILTER, p, run(OperatorTag.FILTER, q, data))
    assert pq.rows == qp.rows


@given(rows_strategy)
@settings(max_examples=60, deadline=None)
def test_project_preserves_row_count(rows):
    data = make_rel(rows)
    out = run(OperatorTag.PROJECT, {"columns": [{"name": "c", "expr": "c"}]}, data)
    assert len(out.rows) == len(data.rows)


@given(rows_strategy, rows_strategy)
@settings(max_examples=40, deadline=None)
def test_join_commutes_up_to_column_order(rows_a, rows_b):
    a = make_rel(rows_a, "a")
    b = rel("b", [("y", AttributeKind.NUMERIC), ("d", AttributeKind.CATEGORICAL),
                  ("k2", AttributeKind.NUMERIC)], rows_b)
    ab = run(OperatorTag.JOIN, {"left": "k", "right": "k2", "op": "="}, a, b)
    ba = run(OperatorTag.JOIN, {"left": "k2", "right": "k", "op": "="}, b, a)

    def keyed(rel_):
        order = sorted(range(len(rel_.column_names)), key=lambda i: rel_.column_names[i])
        return Counter(tuple(r[i] for i in order) for r in rel_.rows)

    assert keyed(ab) == keyed(ba)


@given(rows_strategy, st.integers(0, 10))
@settings(max_examples=60, deadline=None)
def test_limit_of_sort_is_prefix(rows, n):
    data = make_rel(rows)
    sorted_rel = run(OperatorTag.SORT, {"column": "x", "direction": "asc"}, data)
    limited = run(OperatorTag.LIMIT, {"n": n}, sorted_rel)
    assert limited.rows == sorted_rel.rows[:n]


@given(rows_strategy, rows_strategy)
@settings(max_examples=60, deadline=None)
def test_union_cardinality_additive(rows_a, rows_b):
    a, b = make_rel(rows_a, "a"), make_rel(rows_b, "b")
    out = run(OperatorTag.SET_OP, {"kind": "union"}, a, b)
    assert len(out.rows) == len(a.rows) + len(b.rows)


@given(rows_strategy)
@settings(max_examples=40, deadline=None)
def test_sort_stability(rows):
    data = make_rel(rows)
    out = run(OperatorTag.SORT, {"column": "k", "direction": "asc"}, data)
    for key in {r[2] for r in rows}:
        within = [r for r in out.rows if r[2] == key]
        original = [r for r in data.rows if r[2] == key]
        assert within == original


def test_infer_output_columns_matches_execution(users_orders):
    users, orders = users_orders
    step = PlanStep("j", OperatorTag.JOIN, "", ("in_0", "in_1"),
                    {"left": "user_id", "right": "user_id", "op": "="})
    inferred = infer_output_columns(
        step, [("in_0", list(users.column_names)), ("in_1", list(orders.column_names))]
    )
    executed = run(OperatorTag.JOIN, {"left": "user_id", "right": "user_id", "op": "="},
                   users, orders)
    assert tuple(inferred) == executed.column_names
