"""Seeded random databases, executable plans, and matching mock rulebooks
for property tests: optimizer semantics preservation needs arbitrary but
well-typed plans whose semantic steps have deterministic rules."""

from __future__ import annotations

import random
from collections import Counter

from tandemql.plan import OperatorTag, PlanDag, PlanStep
from tandemql.relation import AttributeKind, Relation
from tandemql.templates import render_instruction

VOCAB = ["amber", "basalt", "cedar", "delta", "ember", "flint", "garnet", "harbor"]
KEYWORDS = [f"kw{i}" for i in range(8)]


def random_database(
    rng: random.Random, max_relations: int = 5, max_rows: int = 300
) -> dict[str, Relation]:
    n_rel = rng.randint(1, max_relations)
    db = {}
    for i in range(n_rel):
        name = f"rel{i}"
        rows_n = rng.randint(8, max_rows)
        key_domain = max(rows_n // 3, 2)
        columns = [
            (f"r{i}_key", AttributeKind.NUMERIC),
            (f"r{i}_num", AttributeKind.NUMERIC),
            (f"r{i}_cat", AttributeKind.CATEGORICAL),
            (f"r{i}_txt", AttributeKind.TEXTUAL),
        ]
        rows = []
        for _ in range(rows_n):
            key = rng.randint(0, key_domain)
            num = rng.randint(-50, 50) if rng.random() > 0.05 else None
            cat = rng.choice(VOCAB) if rng.random() > 0.05 else None
            words = [rng.choice(KEYWORDS) for _ in range(rng.randint(2, 5))]
            txt = "note about " + " and ".join(words)
            rows.append((key, num, cat, txt))
        db[name] = Relation.build(name, columns, rows)
    return db


class PlanBuilder:
    def __init__(self, rng: random.Random, db: dict[str, Relation]):
        self.rng = rng
        self.db = db
        self.rulebook: dict = {"filter": {}, "map": {}, "aggregate": {}, "join": {}}
        self.steps: list[PlanStep] = []
        self.counter = 0

    def next_id(self) -> str:
        self.counter += 1
        return f"step_{self.counter}"

    def add(self, op: OperatorTag, params: dict, parents: tuple[str, ...] = (),
            source: str | None = None, columns: list[str] | None = None) -> tuple[str, list[str]]:
        sid = self.next_id()
        instruction = render_instruction(op, params, parents, source)
        self.steps.append(PlanStep(sid, op, instruction, parents, params, source))
        return sid, columns or []

    def scan(self, table: str) -> tuple[str, list[str]]:
        cols = list(self.db[table].column_names)
        return self.add(OperatorTag.SCAN, {"table": table}, source=table, columns=cols)

    def rel_filter(self, parent: str, cols: list[str]) -> tuple[str, list[str]]:
        rng = self.rng
        target = rng.choice([c for c in cols if c.endswith(("_num", "_key", "_cat"))])
        if target.endswith("_cat"):
            op = rng.choice(["=", "!=", "in", "is not null"])
            value = (
                rng.sample(VOCAB, 2)
                if op == "in"
                else (rng.choice(VOCAB) if op in ("=", "!=") else None)
            )
        else:
            op = rng.choice(["<", ">", "<=", ">=", "=", "is not null"])
            value = rng.randint(-40, 40) if op != "is not null" else None
        params = {"column": target, "op": op}
        if value is not None:
            params["value"] = value
        return self.add(OperatorTag.FILTER, params, (parent,), columns=cols)

    def sem_filter(self, parent: str, cols: list[str]) -> tuple[str, list[str]]:
        txt = [c for c in cols if c.endswith("_txt")]
        if not txt:
            return self.rel_filter(parent, cols)
        column = self.rng.choice(txt)
        kw = self.rng.choice(KEYWORDS)
        condition = f"the {column} mentions {kw}"
        self.rulebook["filter"][condition] = {
            "kind": "regex", "column": column, "pattern": kw,
        }
        return self.add(
            OperatorTag.SEM_FILTER, {"condition": condition}, (parent,), columns=cols
        )

    def sem_map(self, parent: str, cols: list[str]) -> tuple[str, list[str]]:
        txt = [c for c in cols if c.endswith("_txt")]
        if not txt:
            return parent, cols
        column = self.rng.choice(txt)
        new_col = f"tag_{self.counter}"
        condition = f"pull the first keyword out of {column} as {new_col}"
        self.rulebook["map"][condition] = {
            "kind": "extract", "column": column, "new_column": new_col,
            "pattern": r"(kw\d)", "default": "none",
        }
        sid, _ = self.add(
            OperatorTag.SEM_MAP,
            {"condition": condition, "new_column": new_col, "inputs": column},
            (parent,),
            columns=cols + [new_col],
        )
        return sid, cols + [new_col]

    def sort_limit_distinct(self, parent: str, cols: list[str]) -> tuple[str, list[str]]:
        rng = self.rng
        choice = rng.random()
        if choice < 0.4:
            col = rng.choice(cols)
            return self.add(
                OperatorTag.SORT,
                {"column": col, "direction": rng.choice(["asc", "desc"])},
                (parent,),
                columns=cols,
            )
        if choice < 0.7:
            return self.add(
                OperatorTag.DISTINCT,
                {"columns": [] if rng.random() < 0.5 else [rng.choice(cols)]},
                (parent,),
                columns=cols,
            )
        return self.add(
            OperatorTag.LIMIT, {"n": rng.randint(1, 50)}, (parent,), columns=cols
        )

    def unary_tower(
        self, parent: str, cols: list[str], budget: int, allow_map: bool = True
    ) -> tuple[str, list[str]]:
        for _ in range(budget):
            r = self.rng.random()
            if r < 0.45:
                parent, cols = self.rel_filter(parent, cols)
            elif r < 0.70:
                parent, cols = self.sem_filter(parent, cols)
            elif r < 0.85 and allow_map:
                parent, cols = self.sem_map(parent, cols)
            else:
                parent, cols = self.sort_limit_distinct(parent, cols)
        return parent, cols

    def join_pair(self, a: tuple[str, list[str]], b: tuple[str, list[str]],
                  key_a: str, key_b: str) -> tuple[str, list[str]]:
        (pa, ca), (pb, cb) = a, b
        params = {"left": key_a, "right": key_b, "op": "="}
        return self.add(OperatorTag.JOIN, params, (pa, pb), columns=ca + cb)


def random_plan(rng: random.Random, db: dict[str, Relation]):
    """A random executable plan over the database plus the mock rulebook its
    semantic steps rely on."""
    b = PlanBuilder(rng, db)
    tables = sorted(db)
    shape = rng.random()

    if shape < 0.2 and len(tables) >= 1:
        # set-operation plan: two towers of the same relation, schemas intact
        table = rng.choice(tables)
        left = b.unary_tower(*b.scan(table), rng.randint(0, 2), allow_map=False)
        right = b.unary_tower(*b.scan(table), rng.randint(0, 2), allow_map=False)
        kind = rng.choice(["union", "intersection", "difference"])
        sid, cols = b.add(
            OperatorTag.SET_OP, {"kind": kind}, (left[0], right[0]), columns=left[1]
        )
        sid, cols = b.unary_tower(sid, cols, rng.randint(0, 1))
    else:
        picked = rng.sample(tables, min(len(tables), rng.randint(1, 3)))
        branches = []
        for t in picked:
            sid, cols = b.scan(t)
            sid, cols = b.unary_tower(sid, cols, rng.randint(0, 2))
            branches.append((sid, cols, t))
        current = branches[0]
        for nxt in branches[1:]:
            key_a = next(c for c in current[1] if c.endswith("_key"))
            key_b = f"r{nxt[2][3:]}_key"
            sid, cols = b.join_pair(current[:2], nxt[:2], key_a, key_b)
            current = (sid, cols, nxt[2])
        sid, cols = b.unary_tower(current[0], current[1], rng.randint(0, 2))

    closing = rng.random()
    if closing < 0.25:
        num_cols = [c for c in cols if c.endswith(("_num", "_key"))]
        cat_cols = [c for c in cols if c.endswith("_cat")]
        if num_cols:
            params = {
                "func": rng.choice(["sum", "min", "max", "count", "avg"]),
                "column": rng.choice(num_cols),
                "group_by": [rng.choice(cat_cols)] if cat_cols and rng.random() < 0.6 else [],
            }
            sid, cols = b.add(OperatorTag.AGGREGATE, params, (sid,),
                              columns=params["group_by"] + ["x"])
    elif closing < 0.6 and len(cols) > 2:
        keep = rng.sample(cols, rng.randint(2, min(len(cols), 5)))
        keep = [c for c in cols if c in keep]
        params = {"columns": [{"name": c, "expr": c} for c in keep]}
        sid, cols = b.add(OperatorTag.PROJECT, params, (sid,), columns=keep)

    return PlanDag.from_steps(b.steps), b.rulebook


def normalized_multiset(rel: Relation) -> Counter:
    """Rows as a multiset with columns aligned by name, for result
    equivalence checks across plan rewrites."""
    order = sorted(range(len(rel.column_names)), key=lambda i: rel.column_names[i])
    return Counter(tuple(row[i] for i in order) for row in rel.rows)
