import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tandemql.relation import AttributeKind, Relation

FIXTURES = Path(__file__).parent / "fixtures"

NCAA_QUESTION = (
    "What is the tryout ID and the state of the college where a goalie player "
    "was successfully accepted?"
)


@pytest.fixture
def products():
    return Relation.build(
        "products",
        [
            ("product_id", AttributeKind.CATEGORICAL),
            ("name", AttributeKind.TEXTUAL),
            ("description", AttributeKind.TEXTUAL),
            ("price", AttributeKind.NUMERIC),
        ],
        [
            ("A1", "iPhone 13", "Apple smartphone with 5G", 799),
            ("B2", "Galaxy S22", "Samsung phone", 749),
            ("C3", "Pixel 7", "Google phone with a great camera", 599),
        ],
    )


@pytest.fixture
def users_orders():
    users = Relation.build(
        "users",
        [("user_id", AttributeKind.NUMERIC), ("name", AttributeKind.CATEGORICAL)],
        [(1, "Alice"), (2, "Bob")],
    )
    orders = Relation.build(
        "orders",
        [("user_id", AttributeKind.NUMERIC), ("amount", AttributeKind.NUMERIC)],
        [(1, 100), (1, 50), (3, 75)],
    )
    return users, orders


@pytest.fixture
def ncaa_paths():
    return {
        "college": FIXTURES / "ncaa" / "college.csv",
        "tryout": FIXTURES / "ncaa" / "tryout.csv",
        "tryout_note": FIXTURES / "ncaa" / "tryout_note.csv",
        "college_profile": FIXTURES / "ncaa" / "college_profile.csv",
        "rulebook_structured": FIXTURES / "ncaa" / "rulebook_structured.json",
        "rulebook_semi": FIXTURES / "ncaa" / "rulebook_semi.json",
    }
