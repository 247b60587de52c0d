import math
from datetime import datetime

import pytest
from hypothesis import given, strategies as st

from tandemql.errors import SchemaError
from tandemql.relation import (
    AttributeKind,
    Relation,
    distinct_count,
    estimate_row_bytes,
    estimate_row_tokens,
    profile_attribute,
)


def rel_numeric(values, name="t", col="x"):
    return Relation.build(name, [(col, AttributeKind.NUMERIC)], [(v,) for v in values])


def test_numeric_profile_min_max_avg_variance():
    prof = profile_attribute(rel_numeric([2, 4, 6]), "x")
    assert prof.min == 2 and prof.max == 6 and prof.avg == 4
    assert math.isclose(prof.variance, 8 / 3)


def test_categorical_profile_top_k():
    rel = Relation.build(
        "t", [("c", AttributeKind.CATEGORICAL)], [("a",), ("a",), ("b",)]
    )
    prof = profile_attribute(rel, "c")
    assert prof.cardinality == 2
    assert prof.top_k_values == (("a", 2), ("b", 1))


def test_empty_column_profile_null_fraction_one():
    rel = Relation.build("t", [("x", AttributeKind.NUMERIC)], [])
    prof = profile_attribute(rel, "x")
    assert prof.null_fraction == 1.0
    assert prof.distinct_count == 0
    assert prof.min is None and prof.avg is None


def test_all_null_column():
    prof = profile_attribute(rel_numeric([None, None]), "x")
    assert prof.null_fraction == 1.0 and prof.distinct_count == 0


def test_textual_profile_token_estimate():
    rel = Relation.build(
        "t", [("s", AttributeKind.TEXTUAL)], [("one two three",), ("four five",)]
    )
    prof = profile_attribute(rel, "s")
    assert math.isclose(prof.expected_token_len, 2.5 * 1.3)
    assert prof.min_len == 9 and prof.max_len == 13
    assert prof.unique_count == 2
    assert len(prof.sample_snippets) == 2


def test_temporal_profile_granularity():
    rel = Relation.build(
        "t",
        [("d", AttributeKind.TEMPORAL)],
        [(datetime(2020, 1, 1),), (datetime(2022, 1, 1),)],
    )
    prof = profile_attribute(rel, "d")
    assert prof.range_start == datetime(2020, 1, 1)
    assert prof.range_end == datetime(2022, 1, 1)
    assert prof.granularity == "year"
    day = Relation.build(
        "t", [("d", AttributeKind.TEMPORAL)], [(datetime(2020, 3, 14),)]
    )
    assert profile_attribute(day, "d").granularity == "day"


def test_distinct_count_basics():
    assert distinct_count(rel_numeric([1, 1, 2, None]), "x") == 2
    assert distinct_count(rel_numeric([]), "x") == 0


def test_distinct_count_uniform_keys():
    values = [i % 25 for i in range(1000)]
    assert distinct_count(rel_numeric(values), "x") == 25


def test_unknown_column_raises():
    with pytest.raises(SchemaError):
        distinct_count(rel_numeric([1]), "nope")


def test_arity_mismatch_rejected():
    with pytest.raises(SchemaError):
        Relation.build("t", [("a", AttributeKind.NUMERIC)], [(1, 2)])


def test_width_and_token_estimates_positive(products):
    assert estimate_row_bytes(products) > 0
    assert estimate_row_tokens(products) >= 1.0


@given(
    st.lists(
        st.one_of(st.none(), st.integers(min_value=-1000, max_value=1000)),
        max_size=60,
    )
)
def test_profiles_are_pure_functions_of_rows(values):
    rel = rel_numeric(values)
    stored = rel.columns[0].profile
    assert profile_attribute(rel, "x") == stored
    # rebuilding from the same rows reproduces the profile exactly
    rebuilt = rel.with_rows(rel.rows)
    assert rebuilt.columns[0].profile == stored


@given(
    st.lists(
        st.one_of(st.none(), st.integers(min_value=0, max_value=50)), max_size=80
    )
)
def test_distinct_count_bounded_by_rows(values):
    rel = rel_numeric(values)
    d = distinct_count(rel, "x")
    assert d <= len(rel.rows)
    non_null = [v for v in values if v is not None]
    if len(set(non_null)) == len(values):  # all unique, no nulls
        assert d == len(values)
