"""Synthetic document schema and YCSB-style query workload generation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .querylang import (
    Aggregation,
    Date,
    Logical,
    Predicate,
    Query,
    SchemaError,
    SortDirection,
    dumps_query,
    extract_attributes,
    iter_predicates,
    loads_query,
)

ATTR_TYPES = ("string", "int", "date", "string_array")

# operators the generator samples per attribute type; $nin only on strings and ints
SAMPLED_OPS = {
    "string": ("$eq", "$nin"),
    "int": ("$eq", "$gt", "$gte", "$lt", "$lte", "$nin"),
    "date": ("$eq", "$gt", "$gte", "$lt", "$lte"),
    "string_array": ("$eq",),
}
# operators a query may apply to each attribute type
VALID_OPS = {
    "string": ("$eq", "$gt", "$gte", "$lt", "$lte", "$nin"),
    "int": ("$eq", "$gt", "$gte", "$lt", "$lte", "$nin"),
    "date": ("$eq", "$gt", "$gte", "$lt", "$lte"),
    "string_array": ("$eq", "$nin"),
}
JOIN_OPS = ("$and", "$or", "$nor")
LIMIT_CHOICES = (10, 20, 50, 100)

DATE_BASE_MS = 1_300_000_000_000
DATE_STEP_MS = 3_600_000


class WorkloadError(Exception):
    pass


class QueryValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Attribute:
    name: str
    type: str
    cardinality: int
    lo: int | None = None
    hi: int | None = None

    def __post_init__(self):
        if not self.name:
            raise SchemaError("attribute name must be nonempty")
        if self.type not in ATTR_TYPES:
            raise SchemaError(f"unknown attribute type {self.type!r}")
        if self.cardinality < 1:
            raise SchemaError(f"cardinality of {self.name} must be >= 1")
        if self.type == "int" and (self.lo is None or self.hi is None or self.hi < self.lo):
            raise SchemaError(f"int attribute {self.name} needs a range lo <= hi")


@dataclass(frozen=True)
class Schema:
    attributes: tuple

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if not names:
            raise SchemaError("schema has no attributes")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names: {names}")

    @property
    def names(self) -> tuple:
        return tuple(a.name for a in self.attributes)

    def __getitem__(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(a.name == name for a in self.attributes)

    def to_json(self) -> list:
        return [
            {k: v for k, v in vars(a).items() if v is not None} for a in self.attributes
        ]

    @classmethod
    def from_json(cls, data: Sequence[dict]) -> "Schema":
        return cls(tuple(Attribute(**d) for d in data))


def default_schema() -> Schema:
    """15 attributes: 6 strings, 6 ints of different ranges, 2 dates, 1 string array."""
    string_cards = [int(round(c)) for c in np.logspace(2, 4, 6)]
    int_ranges = [(0, 4), (0, 99), (1, 12), (0, 9_999), (1_900, 2_020), (0, 999_999)]
    strings = iter(string_cards)
    ints = iter(int_ranges)
    layout = ["string"] * 6 + ["int"] * 4 + ["date", "int", "int", "date", "string_array"]
    attrs = []
    for i, kind in enumerate(layout):
        name = f"f{i}"
        if kind == "string":
            attrs.append(Attribute(name, kind, next(strings)))
        elif kind == "int":
            lo, hi = next(ints)
            attrs.append(Attribute(name, kind, hi - lo + 1, lo, hi))
        elif kind == "date":
            attrs.append(Attribute(name, kind, 100_000))
        else:
            attrs.append(Attribute(name, kind, 1_000))
    return Schema(tuple(attrs))


@dataclass(frozen=True)
class QueryGenConfig:
    attrs_per_query: tuple = (1, 3)
    agg_probs: tuple = (0.10, 0.45, 0.45)  # limit only, sort, count
    sort_field_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.attrs_per_query
        if not 1 <= lo <= hi:
            raise ValueError(f"bad attrs_per_query range {self.attrs_per_query}")
        if len(self.agg_probs) != 3 or min(self.agg_probs) < 0:
            raise ValueError("agg_probs must be three nonnegative probabilities")
        if abs(sum(self.agg_probs) - 1.0) > 1e-9:
            raise ValueError(f"agg_probs sum to {sum(self.agg_probs)}, not 1")
        if not 0.0 < self.sort_field_prob <= 1.0:
            raise ValueError("sort_field_prob must lie in (0, 1]")


def sample_literal(attr: Attribute, rng: np.random.Generator):
    if attr.type == "int":
        return int(rng.integers(attr.lo, attr.hi + 1))
    if attr.type == "date":
        return Date(DATE_BASE_MS + DATE_STEP_MS * int(rng.integers(attr.cardinality)))
    prefix = "t" if attr.type == "string_array" else "v"
    return f"{prefix}{int(rng.integers(attr.cardinality))}"


def _sample_predicate(attr: Attribute, rng: np.random.Generator) -> Predicate:
    ops = SAMPLED_OPS[attr.type]
    op = ops[int(rng.integers(len(ops)))]
    if op == "$nin":
        n = int(rng.integers(1, 4))
        return Predicate(op, attr.name, tuple(sample_literal(attr, rng) for _ in range(n)))
    return Predicate(op, attr.name, sample_literal(attr, rng))


def gen_query(schema: Schema, cfg: QueryGenConfig, rng: np.random.Generator) -> Query:
    lo, hi = cfg.attrs_per_query
    n = min(int(rng.integers(lo, hi + 1)), len(schema.attributes))
    picked = rng.choice(len(schema.attributes), size=n, replace=False)
    attrs = [schema.attributes[int(i)] for i in picked]
    preds = [_sample_predicate(a, rng) for a in attrs]
    if n == 1:
        expr = preds[0]
    else:
        expr = Logical(JOIN_OPS[int(rng.integers(len(JOIN_OPS)))], tuple(preds))

    kind = ("limit", "sort", "count")[int(rng.choice(3, p=cfg.agg_probs))]
    if kind == "count":
        agg = Aggregation.count()
    else:
        limit = LIMIT_CHOICES[int(rng.integers(len(LIMIT_CHOICES)))]
        if kind == "limit":
            agg = Aggregation.limit_only(limit)
        else:
            keys = []
            while not keys:
                for a in attrs:
                    if rng.random() < cfg.sort_field_prob:
                        d = SortDirection.ASC if rng.random() < 0.5 else SortDirection.DESC
                        keys.append((a.name, d))
            agg = Aggregation.sort_then_limit(keys, limit)
    return Query(expr, agg)


def gen_workload(schema: Schema, cfg: QueryGenConfig, count: int, path=None) -> list[Query]:
    """``count`` independent queries seeded by ``cfg.seed``; optionally written as JSONL."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    queries = [gen_query(schema, cfg, rng) for _ in range(count)]
    if path is not None:
        save_queries(queries, path)
    return queries


def save_queries(queries: Sequence[Query], path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for q in queries:
                fh.write(dumps_query(q) + "\n")
    except OSError as exc:
        raise WorkloadError(f"cannot write workload to {path}: {exc}") from exc


def load_queries(path, schema: Schema | None = None) -> list[Query]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise WorkloadError(f"cannot read workload {path}: {exc}") from exc
    queries = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            q = loads_query(line)
            if schema is not None:
                validate_query(q, schema)
        except ValueError as exc:
            raise WorkloadError(f"{path}:{lineno}: {exc}") from exc
        queries.append(q)
    return queries


def _literal_ok(attr: Attribute, value) -> bool:
    if attr.type == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if attr.type == "date":
        return isinstance(value, Date)
    return isinstance(value, str)


def validate_query(query: Query, schema: Schema) -> None:
    for pred in iter_predicates(query.expr):
        if pred.field not in schema:
            raise QueryValidationError(f"unknown field {pred.field!r}")
        attr = schema[pred.field]
        if pred.op not in VALID_OPS[attr.type]:
            raise QueryValidationError(f"{pred.op} not valid on {attr.type} field {attr.name}")
        values = pred.value if pred.op == "$nin" else (pred.value,)
        if pred.op == "$nin" and not isinstance(pred.value, tuple):
            raise QueryValidationError("$nin expects a list literal")
        for v in values:
            if not _literal_ok(attr, v):
                raise QueryValidationError(f"literal {v!r} does not match {attr.type} field {attr.name}")
    for f, _ in query.agg.sort:
        if f not in schema:
            raise QueryValidationError(f"unknown sort field {f!r}")


def attribute_count_histogram(queries: Sequence[Query]) -> dict:
    hist: dict[int, int] = {}
    for q in queries:
        n = len(extract_attributes(q))
        hist[n] = hist.get(n, 0) + 1
    return hist
