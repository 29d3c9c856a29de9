"""Deterministic stand-in for a document database's index planner.

The simulator keeps an index set, estimates query cost with a small
cost-based planner that understands prefix and sort intersection, turns cost
into latency and prices the index set in bytes.  Everything is a pure function
of its inputs except :class:`SimulatedDatabase`, which owns the mutable index
set and the (optional) latency-noise generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .querylang import (
    IndexDef,
    Logical,
    Predicate,
    Query,
)
from .workload import Schema

DEFAULT_SELECTIVITY = {"range": 1.0 / 3.0}
RANGE_OPS = ("$gt", "$gte", "$lt", "$lte")


@dataclass(frozen=True)
class CollectionModel:
    doc_count: int
    schema: Schema
    unit_scan_cost: float = 1.0
    unit_fetch_cost: float = 2.0
    time_per_unit: float = 1e-6
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.doc_count < 1:
            raise ValueError("doc_count must be >= 1")
        if self.unit_scan_cost <= 0 or self.unit_fetch_cost <= 0 or self.time_per_unit <= 0:
            raise ValueError("unit costs must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class IndexSet:
    """Set of index definitions kept in creation order."""

    indexes: tuple = ()
    bytes_per_entry_base: int = 16
    bytes_per_key: int = 8

    def __post_init__(self):
        seen = []
        for idx in self.indexes:
            if idx not in seen:
                seen.append(idx)
        object.__setattr__(self, "indexes", tuple(seen))

    def __iter__(self):
        return iter(self.indexes)

    def __len__(self) -> int:
        return len(self.indexes)

    def __contains__(self, idx) -> bool:
        return idx in self.indexes

    def total_keys(self) -> int:
        return sum(len(i) for i in self.indexes)

    def to_json(self) -> list:
        return [i.to_json() for i in self.indexes]

    @classmethod
    def from_json(cls, data: Sequence) -> "IndexSet":
        return cls(tuple(IndexDef.from_json(d) for d in data))


def create_index(indexes: IndexSet, idx: IndexDef) -> IndexSet:
    if idx in indexes:
        return indexes
    return IndexSet(indexes.indexes + (idx,), indexes.bytes_per_entry_base, indexes.bytes_per_key)


def drop_all(indexes: IndexSet) -> IndexSet:
    return IndexSet((), indexes.bytes_per_entry_base, indexes.bytes_per_key)


def index_size(indexes: IndexSet, coll: CollectionModel) -> int:
    per_entry = [indexes.bytes_per_entry_base + indexes.bytes_per_key * len(i) for i in indexes]
    return coll.doc_count * sum(per_entry)


# ---------------------------------------------------------------------------
# Selectivity


def selectivity(expr, schema: Schema, doc_count: int | None = None) -> float:
    """Estimated fraction of documents matching ``expr``.

    Conjunctions are clamped below at ``1/doc_count`` when a document count is
    given; every result is kept strictly positive.
    """
    floor = 1.0 / doc_count if doc_count else 1e-12
    return max(_selectivity(expr, schema, floor), floor)


def _selectivity(expr, schema: Schema, floor: float) -> float:
    if isinstance(expr, Predicate):
        c = schema[expr.field].cardinality
        if expr.op == "$eq":
            return 1.0 / c
        if expr.op in RANGE_OPS:
            return DEFAULT_SELECTIVITY["range"]
        return (c - 1) / c
    parts = [_selectivity(ch, schema, floor) for ch in expr.children]
    if expr.op == "$and":
        return max(math.prod(parts), floor)
    if expr.op == "$not":
        return 1.0 - parts[0]
    union = 1.0 - math.prod(1.0 - s for s in parts)
    return union if expr.op == "$or" else 1.0 - union


# ---------------------------------------------------------------------------
# Planning


@dataclass(frozen=True)
class PlanResult:
    chosen: IndexDef | None
    covered_prefix_len: int
    sort_served: bool
    est_cost: float
    disjuncts: tuple = field(default=(), compare=False)


def conjunctive_context(expr) -> tuple[list, list]:
    """Split a top-level conjunction into (indexable leaves, residual subtrees)."""
    if isinstance(expr, Predicate):
        return [expr], []
    if expr.op != "$and":
        return [], [expr]
    preds, residual = [], []
    for child in expr.children:
        p, r = conjunctive_context(child)
        preds.extend(p)
        residual.extend(r)
    return preds, residual


def usable_prefix(idx: IndexDef, fields: Iterable[str]) -> int:
    fields = set(fields)
    p = 0
    for f, _ in idx.keys:
        if f not in fields:
            break
        p += 1
    return p


def serves_sort(idx: IndexDef, sort_keys: Sequence, eq_prefix: int) -> bool:
    """Sort keys must match a contiguous run of index keys starting at or before
    the end of the equality prefix, with directions all equal or all inverted."""
    n = len(sort_keys)
    if n == 0:
        return False
    want = [f for f, _ in sort_keys]
    for start in range(0, eq_prefix + 1):
        run = idx.keys[start : start + n]
        if len(run) < n or [f for f, _ in run] != want:
            continue
        same = all(d == sd for (_, d), (_, sd) in zip(run, sort_keys))
        inverted = all(d == sd.inverted() for (_, d), (_, sd) in zip(run, sort_keys))
        if same or inverted:
            return True
    return False


def _sort_penalty(rows: float, coll: CollectionModel) -> float:
    return rows * math.log2(max(2.0, rows)) * coll.unit_scan_cost


def full_scan_cost(query: Query, coll: CollectionModel) -> float:
    n = coll.doc_count
    cost = n * coll.unit_scan_cost
    if query.agg.sort:
        cost += _sort_penalty(n, coll)
    return cost


def index_candidate(idx: IndexDef, preds, residual, sort_keys, coll: CollectionModel):
    """(cost, prefix, sort_served, prefix selectivity), or None if unusable."""
    p = usable_prefix(idx, (pr.field for pr in preds))
    e = usable_prefix(idx, (pr.field for pr in preds if pr.op == "$eq"))
    sort_ok = serves_sort(idx, sort_keys, e)
    if p == 0 and not sort_ok:
        return None
    n = coll.doc_count
    covered_fields = set(idx.fields[:p])
    covered = [pr for pr in preds if pr.field in covered_fields]
    s = 1.0
    for pr in covered:
        s *= _selectivity(pr, coll.schema, 1.0 / n)
    s = max(s, 1.0 / n)
    rows = n * s
    cost = math.log2(n) + rows * coll.unit_fetch_cost
    if residual or len(covered) < len(preds):
        cost += rows * coll.unit_scan_cost
    if sort_keys and not sort_ok:
        cost += _sort_penalty(rows, coll)
    return cost, p, sort_ok, s


def _tie_key(cost: float, idx: IndexDef | None) -> tuple:
    if idx is None:
        return (cost, 0, ())
    return (cost, len(idx), idx.sort_key())


def _best_single_index(expr, sort_keys, indexes: IndexSet, coll: CollectionModel):
    preds, residual = conjunctive_context(expr)
    best = None
    for idx in indexes:
        cand = index_candidate(idx, preds, residual, sort_keys, coll)
        if cand is None:
            continue
        cost, p, sort_ok, s = cand
        key = _tie_key(cost, idx)
        if best is None or key < best[0]:
            best = (key, PlanResult(idx, p, sort_ok, cost), s)
    return best


def plan(query: Query, indexes: IndexSet, coll: CollectionModel) -> PlanResult:
    sort_keys = query.agg.sort
    scan = full_scan_cost(query, coll)
    best_key = _tie_key(scan, None)
    best = PlanResult(None, 0, False, scan)

    single = _best_single_index(query.expr, sort_keys, indexes, coll)
    if single is not None and single[0] < best_key:
        best_key, best = single[0], single[1]

    expr = query.expr
    if isinstance(expr, Logical) and expr.op == "$or":
        parts = []
        for child in expr.children:
            sub = _best_single_index(child, (), indexes, coll)
            if sub is None:
                parts = None
                break
            parts.append(sub)
        if parts:
            cost = sum(p[1].est_cost for p in parts)
            if sort_keys:
                rows = coll.doc_count * min(1.0, sum(p[2] for p in parts))
                cost += _sort_penalty(rows, coll)
            first = parts[0][1]
            key = _tie_key(cost, first.chosen)
            if key < best_key:
                best = PlanResult(
                    first.chosen, first.covered_prefix_len, False, cost,
                    disjuncts=tuple(p[1] for p in parts),
                )
    return best


def execute(query: Query, indexes: IndexSet, coll: CollectionModel, rng=None) -> float:
    """Simulated latency in seconds."""
    t = plan(query, indexes, coll).est_cost * coll.time_per_unit
    if coll.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        t *= float(rng.lognormal(0.0, coll.noise_sigma))
    return t


# ---------------------------------------------------------------------------
# Reward


@dataclass(frozen=True)
class RewardConfig:
    omega1: float  # per byte
    omega2: float  # per second

    def __post_init__(self):
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("reward weights must be >= 0")
        if self.omega1 == 0 and self.omega2 == 0:
            raise ValueError("reward weights cannot both be zero")


def reward(t: float, m: float, cfg: RewardConfig) -> float:
    if t < 0 or m < 0:
        raise ValueError("latency and size must be nonnegative")
    return -cfg.omega1 * m - cfg.omega2 * t


def default_reward_config(
    queries: Sequence[Query], coll: CollectionModel, full_indexes: IndexSet,
    size_weight: float = 0.5, latency_weight: float = 0.5,
) -> RewardConfig:
    """Weights that put both reward terms on a roughly unit scale.

    ``omega1 = size_weight / m(full-rule set)`` and
    ``omega2 = latency_weight / mean full-scan latency``.
    """
    m_full = index_size(full_indexes, coll)
    empty = IndexSet()
    t_scan = float(np.mean([execute(q, empty, coll) for q in queries]))
    omega1 = size_weight / m_full if m_full > 0 else 0.0
    return RewardConfig(omega1, latency_weight / t_scan)


# ---------------------------------------------------------------------------
# Stateful environment


class SimulatedDatabase:
    """One collection plus its current index set."""

    def __init__(self, coll: CollectionModel, seed: int = 0, indexes: IndexSet | None = None):
        self.coll = coll
        self.indexes = indexes if indexes is not None else IndexSet()
        self.rng = np.random.default_rng(seed)

    def drop_all(self) -> None:
        self.indexes = drop_all(self.indexes)

    def create_index(self, idx: IndexDef | None) -> int:
        """Create ``idx`` (no-op for None) and return the new index-set size."""
        if idx is not None:
            self.indexes = create_index(self.indexes, idx)
        return self.index_size()

    def index_size(self) -> int:
        return index_size(self.indexes, self.coll)

    def plan(self, query: Query) -> PlanResult:
        return plan(query, self.indexes, self.coll)

    def execute(self, query: Query) -> float:
        return execute(query, self.indexes, self.coll, self.rng)


def environment_from_config(data: dict, schema: Schema) -> tuple[CollectionModel, RewardConfig | None]:
    """Parse ``{"doc_count", "noise_sigma", "omega1", "omega2", "unit_costs": {...}}``.

    Weights are optional; callers fall back to :func:`default_reward_config`.
    """
    known = {"doc_count", "noise_sigma", "omega1", "omega2", "unit_costs"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown environment config keys: {sorted(unknown)}")
    units = dict(data.get("unit_costs", {}))
    bad = set(units) - {"scan", "fetch", "time_per_unit"}
    if bad:
        raise ValueError(f"unknown unit_costs keys: {sorted(bad)}")
    coll = CollectionModel(
        doc_count=int(data.get("doc_count", 1_000_000)),
        schema=schema,
        unit_scan_cost=float(units.get("scan", 1.0)),
        unit_fetch_cost=float(units.get("fetch", 2.0)),
        time_per_unit=float(units.get("time_per_unit", 1e-6)),
        noise_sigma=float(data.get("noise_sigma", 0.0)),
    )
    rcfg = None
    if "omega1" in data or "omega2" in data:
        rcfg = RewardConfig(float(data.get("omega1", 0.0)), float(data.get("omega2", 0.0)))
    return coll, rcfg


def environment_to_config(coll: CollectionModel, rcfg: RewardConfig | None = None) -> dict:
    out = {
        "doc_count": coll.doc_count,
        "noise_sigma": coll.noise_sigma,
        "unit_costs": {
            "scan": coll.unit_scan_cost,
            "fetch": coll.unit_fetch_cost,
            "time_per_unit": coll.time_per_unit,
        },
    }
    if rcfg is not None:
        out["omega1"] = rcfg.omega1
        out["omega2"] = rcfg.omega2
    return out
