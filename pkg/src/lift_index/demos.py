"""Rule-based index demonstrations.

Two rules produce demonstrations: ``full`` indexes every query attribute,
``partial`` only the attributes that are not already the first key of an
existing index.  Running a rule through one simulated episode attaches
rewards and yields agent transitions; records round-trip through JSONL.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .agent import Transition
from .planner import IndexSet, RewardConfig, SimulatedDatabase, create_index, reward
from .querylang import (
    ActionEncodingError,
    IndexDef,
    Query,
    QueryParseError,
    SortDirection,
    Vocabulary,
    encode_action,
    extract_attributes,
    query_from_json,
    query_to_json,
    tokenize,
)
from .workload import QueryValidationError, Schema, validate_query

logger = logging.getLogger(__name__)

QUERY_ORDERS = ("desc", "asc", "none")


def _directed_keys(query: Query, fields: Sequence[str], k_max: int) -> IndexDef | None:
    sort_dirs = dict(query.agg.sort)
    keys = [(f, sort_dirs.get(f, SortDirection.ASC)) for f in fields][:k_max]
    return IndexDef(tuple(keys)) if keys else None


def full_index_rule(query: Query, existing=None, k_max: int = 3) -> IndexDef:
    """Compound index on every query attribute, honouring the query's sort directions."""
    return _directed_keys(query, extract_attributes(query), k_max)


def partial_index_rule(query: Query, existing=None, k_max: int = 3) -> IndexDef | None:
    """Like the full rule, restricted to attributes that no index leads with."""
    leading = {idx.keys[0][0] for idx in existing or ()}
    fields = [f for f in extract_attributes(query) if f not in leading]
    return _directed_keys(query, fields, k_max)


RULES: dict[str, Callable] = {"full": full_index_rule, "partial": partial_index_rule}


def order_queries(queries: Sequence[Query], order: str = "desc") -> list[Query]:
    """Stable sort by attribute count (``desc``: longest first)."""
    if order not in QUERY_ORDERS:
        raise ValueError(f"query order must be one of {QUERY_ORDERS}")
    if order == "none":
        return list(queries)
    sign = -1 if order == "desc" else 1
    return sorted(queries, key=lambda q: sign * len(extract_attributes(q)))


@dataclass(frozen=True)
class DemonstrationRecord:
    episode: int
    step: int
    query: Query
    context_indexes: tuple  # IndexDefs present before the step
    action_index: IndexDef | None
    reward: float
    terminal: bool = False

    def to_json(self) -> dict:
        return {
            "episode": self.episode,
            "step": self.step,
            "query": query_to_json(self.query),
            "context_indexes": [i.to_json() for i in self.context_indexes],
            "action_index": self.action_index.to_json() if self.action_index else None,
            "reward": self.reward,
            "terminal": self.terminal,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DemonstrationRecord":
        action = data.get("action_index")
        return cls(
            episode=int(data["episode"]),
            step=int(data["step"]),
            query=query_from_json(data["query"]),
            context_indexes=tuple(IndexDef.from_json(i) for i in data["context_indexes"]),
            action_index=IndexDef.from_json(action) if action is not None else None,
            reward=float(data["reward"]),
            terminal=bool(data.get("terminal", False)),
        )


@dataclass
class DemoBuildResult:
    records: list
    transitions: list
    skipped: list  # (episode, step, reason)


def build_demonstrations(
    queries: Sequence[Query],
    rule: str | Callable,
    db: SimulatedDatabase,
    reward_cfg: RewardConfig,
    vocab: Vocabulary,
    k_max: int = 3,
    length: int = 32,
    episode_size: int | None = None,
    order: str = "desc",
) -> DemoBuildResult:
    """Run the rule through simulated episodes and record rewarded transitions.

    Queries are split into consecutive episodes of ``episode_size`` (all of
    them in one episode by default); each episode starts from an empty index set.
    """
    rule_fn = RULES[rule] if isinstance(rule, str) else rule
    size = episode_size or len(queries)
    records, skipped = [], []
    for ep, lo in enumerate(range(0, len(queries), size)):
        episode = order_queries(queries[lo : lo + size], order)
        db.drop_all()
        for step, q in enumerate(episode):
            context = db.indexes.indexes
            idx = rule_fn(q, db.indexes, k_max)
            try:
                encode_action(idx, extract_attributes(q), k_max)
            except ActionEncodingError as exc:
                logger.warning("episode %d step %d: demonstration skipped: %s", ep, step, exc)
                skipped.append((ep, step, str(exc)))
                continue
            m = db.create_index(idx)
            t = db.execute(q)
            records.append(DemonstrationRecord(
                ep, step, q, context, idx, reward(t, m, reward_cfg), step == len(episode) - 1,
            ))
    return DemoBuildResult(records, records_to_transitions(records, vocab, k_max, length), skipped)


def records_to_transitions(
    records: Sequence[DemonstrationRecord], vocab: Vocabulary, k_max: int = 3, length: int = 32,
) -> list[Transition]:
    """Rebuild (s, a, r, s', terminal) from records; s' is the next record's state
    in the same episode."""
    out = []
    for i, rec in enumerate(records):
        s = tokenize(rec.query, rec.context_indexes, vocab, length).ids
        a = encode_action(rec.action_index, extract_attributes(rec.query), k_max)
        nxt = records[i + 1] if i + 1 < len(records) else None
        terminal = rec.terminal or nxt is None or nxt.episode != rec.episode
        if terminal:
            s_next = s
        else:
            s_next = tokenize(nxt.query, nxt.context_indexes, vocab, length).ids
        out.append(Transition(s, a, rec.reward, s_next, terminal, is_demo=True))
    return out


def save_demos(records: Iterable[DemonstrationRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


@dataclass
class DemoLoadResult:
    records: list
    errors: list  # (line number, message)


def load_demos(path, schema: Schema | None = None, k_max: int = 3) -> DemoLoadResult:
    """Parse a demo JSONL file, skipping (and reporting) invalid lines."""
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = DemonstrationRecord.from_json(json.loads(line))
                if schema is not None:
                    validate_query(rec.query, schema)
                    for idx in rec.context_indexes + ((rec.action_index,) if rec.action_index else ()):
                        missing = [f for f in idx.fields if f not in schema]
                        if missing:
                            raise QueryValidationError(f"unknown index field(s) {missing}")
                encode_action(rec.action_index, extract_attributes(rec.query), k_max)
            except (ValueError, KeyError, TypeError, QueryParseError) as exc:
                errors.append((lineno, f"{type(exc).__name__}: {exc}"))
                continue
            records.append(rec)
    for lineno, msg in errors:
        logger.warning("%s:%d: skipped demonstration (%s)", path, lineno, msg)
    return DemoLoadResult(records, errors)


def rule_index_set(queries: Sequence[Query], rule: str, k_max: int = 3, order: str = "desc") -> IndexSet:
    """Index set a rule builds over one episode (no simulation needed)."""
    rule_fn = RULES[rule]
    indexes = IndexSet()
    for q in order_queries(queries, order):
        idx = rule_fn(q, indexes, k_max)
        if idx is not None:
            indexes = create_index(indexes, idx)
    return indexes
