"""Query AST, state tokenizer and the positional action codec.

Queries are small nested trees of comparison and logical operators plus one
aggregation (``count``, ``limit`` or ``sort`` + ``limit``).  The tokenizer turns
a query and the current index set into a fixed-length integer sequence that the
Q-network consumes; the action codec maps between index definitions and the
agent's ``k`` integer heads, where each head value picks a position in the
query's attribute list plus a sort direction.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

logger = logging.getLogger(__name__)

COMPARISON_OPS = ("$eq", "$gt", "$gte", "$lt", "$lte", "$nin")
LOGICAL_OPS = ("$and", "$or", "$nor", "$not")
AGGREGATION_OPS = ("count", "limit", "sort")
OPERATOR_TOKENS = COMPARISON_OPS + LOGICAL_OPS + AGGREGATION_OPS

PAD, EOS, UNK, IDX_ASC, IDX_DESC = "PAD", "EOS", "UNK", "IDX_ASC", "IDX_DESC"
RESERVED_TOKENS = (PAD, EOS, UNK, IDX_ASC, IDX_DESC)

DEFAULT_LENGTH = 32


class SchemaError(ValueError):
    pass


class QueryParseError(ValueError):
    pass


class ActionEncodingError(ValueError):
    pass


class SortDirection(str, enum.Enum):
    ASC = "asc"
    DESC = "desc"

    def inverted(self) -> "SortDirection":
        return SortDirection.DESC if self is SortDirection.ASC else SortDirection.ASC


@dataclass(frozen=True)
class Date:
    """Date literal, milliseconds since the epoch (``{"$date": ms}`` on the wire)."""

    ms: int


@dataclass(frozen=True)
class Predicate:
    op: str
    field: str
    value: Any

    def __post_init__(self):
        if self.op not in COMPARISON_OPS:
            raise QueryParseError(f"unknown comparison operator {self.op!r}")


@dataclass(frozen=True)
class Logical:
    op: str
    children: tuple

    def __post_init__(self):
        if self.op not in LOGICAL_OPS:
            raise QueryParseError(f"unknown logical operator {self.op!r}")
        object.__setattr__(self, "children", tuple(self.children))
        if self.op == "$not":
            if len(self.children) != 1:
                raise QueryParseError("$not takes exactly one child")
        elif len(self.children) < 2:
            raise QueryParseError(f"{self.op} needs at least two children")


Expr = Union[Predicate, Logical]
SortKeys = tuple  # tuple[tuple[str, SortDirection], ...]


@dataclass(frozen=True)
class Aggregation:
    kind: str
    limit: int | None = None
    sort: SortKeys = ()

    def __post_init__(self):
        object.__setattr__(
            self, "sort", tuple((f, SortDirection(d)) for f, d in self.sort)
        )
        if self.kind == "count":
            if self.limit is not None or self.sort:
                raise QueryParseError("count takes no limit or sort keys")
        elif self.kind == "limit":
            if self.sort:
                raise QueryParseError("limit aggregation takes no sort keys")
            if self.limit is None or self.limit < 1:
                raise QueryParseError("limit must be a positive integer")
        elif self.kind == "sort":
            if not self.sort:
                raise QueryParseError("sort aggregation needs at least one key")
            if self.limit is None or self.limit < 1:
                raise QueryParseError("sort aggregation needs a positive limit")
            names = [f for f, _ in self.sort]
            if len(set(names)) != len(names):
                raise QueryParseError("sort keys must be distinct")
        else:
            raise QueryParseError(f"unknown aggregation {self.kind!r}")

    @classmethod
    def count(cls) -> "Aggregation":
        return cls("count")

    @classmethod
    def limit_only(cls, n: int) -> "Aggregation":
        return cls("limit", limit=n)

    @classmethod
    def sort_then_limit(cls, keys: Iterable, n: int) -> "Aggregation":
        return cls("sort", limit=n, sort=tuple(keys))


@dataclass(frozen=True)
class Query:
    expr: Expr
    agg: Aggregation = field(default_factory=Aggregation.count)

    def predicates(self) -> Iterator[Predicate]:
        return iter_predicates(self.expr)


def iter_predicates(expr: Expr) -> Iterator[Predicate]:
    """Leaves in pre-order."""
    if isinstance(expr, Predicate):
        yield expr
    else:
        for child in expr.children:
            yield from iter_predicates(child)


@dataclass(frozen=True)
class IndexDef:
    keys: tuple  # tuple[tuple[str, SortDirection], ...]

    def __post_init__(self):
        keys = tuple((str(f), SortDirection(d)) for f, d in self.keys)
        if not keys:
            raise ValueError("an index needs at least one key")
        names = [f for f, _ in keys]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate field in index {names}")
        object.__setattr__(self, "keys", keys)

    @property
    def fields(self) -> tuple:
        return tuple(f for f, _ in self.keys)

    def __len__(self) -> int:
        return len(self.keys)

    def sort_key(self) -> tuple:
        return tuple((f, d.value) for f, d in self.keys)

    def to_json(self) -> list:
        return [[f, d.value] for f, d in self.keys]

    @classmethod
    def from_json(cls, data: Sequence) -> "IndexDef":
        return cls(tuple((f, SortDirection(d)) for f, d in data))

    def __str__(self) -> str:
        return "[" + ", ".join(f"({f},{d.name})" for f, d in self.keys) + "]"


def index(*keys) -> IndexDef:
    """Shorthand: ``index(("a", "asc"), ("b", "desc"))``."""
    return IndexDef(tuple(keys))


# ---------------------------------------------------------------------------
# JSON (one query per JSONL line)


def _value_to_json(value):
    if isinstance(value, Date):
        return {"$date": value.ms}
    if isinstance(value, tuple):
        return [_value_to_json(v) for v in value]
    return value


def _value_from_json(value):
    if isinstance(value, dict):
        if set(value) != {"$date"}:
            raise QueryParseError(f"unsupported literal {value!r}")
        return Date(int(value["$date"]))
    if isinstance(value, list):
        return tuple(_value_from_json(v) for v in value)
    return value


def expr_to_json(expr: Expr) -> dict:
    if isinstance(expr, Predicate):
        return {expr.field: {expr.op: _value_to_json(expr.value)}}
    if expr.op == "$not":
        return {"$not": expr_to_json(expr.children[0])}
    return {expr.op: [expr_to_json(c) for c in expr.children]}


def expr_from_json(data: Any) -> Expr:
    if not isinstance(data, dict) or len(data) != 1:
        raise QueryParseError(f"expression must be a single-key object: {data!r}")
    (key, body), = data.items()
    if key in LOGICAL_OPS:
        if key == "$not":
            return Logical("$not", (expr_from_json(body),))
        if not isinstance(body, list):
            raise QueryParseError(f"{key} expects a list")
        return Logical(key, tuple(expr_from_json(c) for c in body))
    if key.startswith("$"):
        raise QueryParseError(f"unknown operator {key!r}")
    if not isinstance(body, dict) or len(body) != 1:
        raise QueryParseError(f"predicate on {key!r} must be {{op: value}}")
    (op, value), = body.items()
    return Predicate(op, key, _value_from_json(value))


def query_to_json(query: Query) -> dict:
    agg = {"type": query.agg.kind}
    if query.agg.limit is not None:
        agg["limit"] = query.agg.limit
    if query.agg.sort:
        agg["sort"] = [[f, d.value] for f, d in query.agg.sort]
    return {"expr": expr_to_json(query.expr), "agg": agg}


def query_from_json(data: Any) -> Query:
    if not isinstance(data, dict) or "expr" not in data:
        raise QueryParseError("query object needs an 'expr' member")
    agg = data.get("agg", {"type": "count"})
    try:
        aggregation = Aggregation(
            agg["type"],
            limit=agg.get("limit"),
            sort=tuple((f, d) for f, d in agg.get("sort", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise QueryParseError(f"bad aggregation {agg!r}: {exc}") from exc
    return Query(expr_from_json(data["expr"]), aggregation)


def dumps_query(query: Query) -> str:
    return json.dumps(query_to_json(query), sort_keys=True, separators=(",", ":"))


def loads_query(line: str) -> Query:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise QueryParseError(str(exc)) from exc
    return query_from_json(data)


def format_query(query: Query) -> str:
    """Shell-style rendering, e.g. ``find({...}).sort({...}).limit(10)``."""
    text = f"find({json.dumps(expr_to_json(query.expr))})"
    agg = query.agg
    if agg.kind == "count":
        return text + ".count()"
    if agg.kind == "sort":
        keys = ", ".join(f"{f!r}: {1 if d is SortDirection.ASC else -1}" for f, d in agg.sort)
        text += f".sort({{{keys}}})"
    return text + f".limit({agg.limit})"


# ---------------------------------------------------------------------------
# Vocabulary and tokenization


class Vocabulary:
    """Frozen token <-> id map built from the schema and the operator set."""

    def __init__(self, fields: Sequence[str]):
        fields = [str(f) for f in fields]
        if not fields:
            raise SchemaError("schema has no attributes")
        if len(set(fields)) != len(fields):
            raise SchemaError(f"duplicate field names in schema: {fields}")
        clash = set(fields) & set(RESERVED_TOKENS + OPERATOR_TOKENS)
        if clash:
            raise SchemaError(f"field names collide with reserved tokens: {sorted(clash)}")
        self._tokens = tuple(RESERVED_TOKENS + OPERATOR_TOKENS) + tuple(fields)
        self.token_to_id: Mapping[str, int] = MappingProxyType(
            {t: i for i, t in enumerate(self._tokens)}
        )
        self.fields = tuple(fields)

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    def __repr__(self) -> str:
        return f"Vocabulary(V={len(self)}, fields={list(self.fields)})"

    @property
    def tokens(self) -> tuple:
        return self._tokens

    def id_of(self, token: str) -> int | None:
        return self.token_to_id.get(token)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids]


def build_vocabulary(schema) -> Vocabulary:
    """Vocabulary for a ``Schema`` (or any sequence of field names)."""
    names = getattr(schema, "names", schema)
    return Vocabulary(list(names))


@dataclass(frozen=True)
class StateTokens:
    ids: tuple
    truncated: bool = False
    unknown: int = 0

    def __len__(self) -> int:
        return len(self.ids)


def _first_key_directions(indexes) -> dict:
    found: dict[str, list] = {}
    for idx in indexes or ():
        f, d = idx.keys[0]
        dirs = found.setdefault(f, [])
        if d not in dirs:
            dirs.append(d)
    return {f: sorted(ds, key=lambda d: d is SortDirection.DESC) for f, ds in found.items()}


def query_tokens(query: Query, indexes=()) -> list[str]:
    """Token strings before id conversion, EOS and padding."""
    markers = _first_key_directions(indexes)
    out: list[str] = []

    def emit_field(name: str) -> None:
        out.append(name)
        for d in markers.get(name, ()):
            out.append(IDX_ASC if d is SortDirection.ASC else IDX_DESC)

    def walk(expr: Expr) -> None:
        out.append(expr.op)
        if isinstance(expr, Predicate):
            emit_field(expr.field)
        else:
            for child in expr.children:
                walk(child)

    walk(query.expr)
    agg = query.agg
    if agg.kind == "count":
        out.append("count")
    elif agg.kind == "limit":
        out.append("limit")
    else:
        out.append("sort")
        for f, _ in agg.sort:
            emit_field(f)
        out.append("limit")
    return out


def tokenize(query: Query, indexes, vocab: Vocabulary, length: int = DEFAULT_LENGTH) -> StateTokens:
    if length < 2:
        raise ValueError("state length must be at least 2")
    ids = []
    unknown = 0
    for tok in query_tokens(query, indexes):
        tid = vocab.id_of(tok)
        if tid is None:
            unknown += 1
            tid = vocab.token_to_id[UNK]
        ids.append(tid)
    if unknown:
        logger.warning("tokenize: %d unknown token(s) mapped to UNK", unknown)
    truncated = len(ids) > length - 1
    if truncated:
        ids = ids[: length - 1]
    ids.append(vocab.token_to_id[EOS])
    ids.extend([vocab.token_to_id[PAD]] * (length - len(ids)))
    return StateTokens(tuple(ids), truncated, unknown)


# ---------------------------------------------------------------------------
# Positional action codec


def extract_attributes(query: Query) -> list[str]:
    seen: list[str] = []
    for pred in query.predicates():
        if pred.field not in seen:
            seen.append(pred.field)
    for f, _ in query.agg.sort:
        if f not in seen:
            seen.append(f)
    return seen


def decode_action(action: Sequence[int], attrs: Sequence[str]) -> IndexDef | None:
    keys = []
    used = set()
    for a in action:
        a = int(a)
        if a <= 0:
            continue
        pos = (a + 1) // 2
        if pos > len(attrs):
            continue
        name = attrs[pos - 1]
        if name in used:
            continue
        used.add(name)
        keys.append((name, SortDirection.ASC if a % 2 == 1 else SortDirection.DESC))
    return IndexDef(tuple(keys)) if keys else None


def encode_action(idx: IndexDef | None, attrs: Sequence[str], k: int) -> tuple:
    heads = [0] * k
    if idx is None:
        return tuple(heads)
    if len(idx.keys) > k:
        raise ActionEncodingError(f"index {idx} has more than k={k} keys")
    attrs = list(attrs)
    for j, (name, d) in enumerate(idx.keys):
        if name not in attrs:
            raise ActionEncodingError(f"field {name!r} is not a query attribute {attrs}")
        pos = attrs.index(name) + 1
        heads[j] = 2 * pos - 1 if d is SortDirection.ASC else 2 * pos
    return tuple(heads)
