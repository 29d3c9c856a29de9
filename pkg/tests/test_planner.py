import itertools
import math

import numpy as np
import pytest

from lift_index.planner import (
    CollectionModel,
    IndexSet,
    RewardConfig,
    SimulatedDatabase,
    conjunctive_context,
    create_index,
    drop_all,
    environment_from_config,
    environment_to_config,
    execute,
    index_size,
    plan,
    reward,
    selectivity,
    usable_prefix,
)
from lift_index.querylang import (
    Aggregation,
    IndexDef,
    Logical,
    Predicate,
    Query,
    index,
)
from lift_index.workload import Attribute, Schema
from oracles import oracle_plan, oracle_schema, pool, small_queries, sorted_by

N = 10**6


@pytest.fixture(scope="module")
def schema():
    return oracle_schema()


@pytest.fixture(scope="module")
def coll(schema):
    return CollectionModel(N, schema)


def eq(f, v=1):
    return Predicate("$eq", f, v)


def gt(f, v=1):
    return Predicate("$gt", f, v)


# -- selectivity ---------------------------------------------------------------


def test_selectivity_examples(schema):
    assert selectivity(eq("f1"), schema) == pytest.approx(0.01)
    both = Logical("$and", (eq("c10a"), eq("c10b")))
    assert selectivity(both, schema) == pytest.approx(0.01)
    either = Logical("$or", (eq("c10a"), eq("c10b")))
    assert selectivity(either, schema) == pytest.approx(1 - 0.9 * 0.9)
    neither = Logical("$nor", (eq("c10a"), eq("c10b")))
    assert selectivity(neither, schema) == pytest.approx(0.81)
    assert selectivity(gt("f2"), schema) == pytest.approx(1 / 3)
    assert selectivity(Predicate("$nin", "f2", (1,)), schema) == pytest.approx(0.9)
    assert selectivity(Logical("$not", (eq("f1"),)), schema) == pytest.approx(0.99)


def test_conjunction_clamped_at_one_document(schema):
    e = Logical("$and", (eq("f3"), eq("f3", 2), eq("f3", 3)))
    assert selectivity(e, schema, doc_count=N) == pytest.approx(1 / N)


# -- planner examples ------------------------------------------------------------


def test_prefix_intersection(coll):
    ix = IndexSet((index(("f1", "asc"), ("f2", "desc")),))
    res = plan(Query(eq("f1")), ix, coll)
    assert res.chosen == ix.indexes[0]
    assert res.covered_prefix_len == 1


def test_sort_intersection_rules(coll):
    ix = IndexSet((index(("f1", "asc"), ("f2", "desc")),))
    base = Logical("$and", (gt("f1"), gt("f2")))
    served = [
        ((("f1", "asc"), ("f2", "desc"))),
        ((("f1", "desc"), ("f2", "asc"))),
    ]
    for keys in served:
        assert plan(sorted_by(base, *keys), ix, coll).sort_served
    for keys in [(("f1", "asc"), ("f2", "asc")), (("f1", "desc"), ("f2", "desc"))]:
        assert not plan(sorted_by(base, *keys), ix, coll).sort_served


def test_sort_after_equality_prefix(coll):
    ix = IndexSet((index(("f1", "asc"), ("f2", "desc")),))
    q = sorted_by(eq("f1"), ("f2", "asc"))
    res = plan(q, ix, coll)
    assert res.sort_served and res.chosen == ix.indexes[0]
    # a range predicate on the leading key does not fix it, so f2 order is lost
    assert not plan(sorted_by(gt("f1"), ("f2", "asc")), ix, coll).sort_served


def test_empty_index_set_is_full_scan(coll):
    res = plan(Query(eq("f1")), IndexSet(), coll)
    assert res.chosen is None and res.covered_prefix_len == 0
    assert res.est_cost == N * coll.unit_scan_cost
    res = plan(sorted_by(eq("f1"), ("f1", "asc")), IndexSet(), coll)
    assert res.est_cost == pytest.approx(N + N * math.log2(N))


def test_or_plans_each_disjunct(coll):
    ix = IndexSet((index(("f1", "asc")), index(("f3", "asc"))))
    q = Query(Logical("$or", (eq("f1"), eq("f3"))))
    res = plan(q, ix, coll)
    assert res.chosen == index(("f1", "asc"))
    assert len(res.disjuncts) == 2
    expected = (math.log2(N) + N / 100 * 2) + (math.log2(N) + N / 10_000 * 2)
    assert res.est_cost == pytest.approx(expected)
    # one disjunct without an index forces a collection scan
    only_f1 = IndexSet((index(("f1", "asc")),))
    assert plan(q, only_f1, coll).chosen is None


# -- execute / size / reward -----------------------------------------------------


def test_execute_examples(coll, schema):
    assert execute(Query(eq("f1")), IndexSet(), coll) == pytest.approx(1.0)
    c = CollectionModel(N, Schema((Attribute("x", "string", 10_000),)))
    t = execute(Query(eq("x")), IndexSet((index(("x", "asc")),)), c)
    assert t == pytest.approx((math.log2(N) + 100 * 2) * 1e-6)
    assert t == pytest.approx(2.2e-4, rel=0.01)


def test_execute_noise_is_seeded(schema):
    c = CollectionModel(N, schema, noise_sigma=0.3)
    a = SimulatedDatabase(c, seed=4)
    b = SimulatedDatabase(c, seed=4)
    q = Query(eq("f1"))
    assert [a.execute(q) for _ in range(3)] == [b.execute(q) for _ in range(3)]
    assert len({a.execute(q) for _ in range(3)}) == 3


def test_index_size(coll):
    assert index_size(IndexSet(), coll) == 0
    two_key = IndexSet((index(("f1", "asc"), ("f2", "asc")),))
    assert index_size(two_key, coll) == 32 * N
    bigger = create_index(two_key, index(("f3", "desc")))
    assert index_size(bigger, coll) > index_size(two_key, coll)


def test_create_and_drop(coll):
    ix = create_index(IndexSet(), index(("f1", "asc")))
    assert len(create_index(ix, index(("f1", "asc")))) == 1
    ix = create_index(ix, index(("f1", "asc"), ("f2", "asc")))
    assert len(ix) == 2
    assert index_size(drop_all(ix), coll) == 0


def test_reward_examples():
    cfg = RewardConfig(0.5 / 1e9, 0.5 / 2.0)
    assert reward(0.0, 0.0, cfg) == 0.0
    assert reward(2.0, 1e9, cfg) == pytest.approx(-1.0)
    no_size = RewardConfig(0.0, 1.0)
    assert reward(1.0, 5.0, no_size) == reward(1.0, 5e9, no_size)
    with pytest.raises(ValueError):
        RewardConfig(0.0, 0.0)


def test_environment_config_round_trip(schema):
    data = {"doc_count": 5000, "noise_sigma": 0.1, "omega1": 1e-9, "omega2": 0.3,
            "unit_costs": {"scan": 1.5, "fetch": 3.0, "time_per_unit": 2e-6}}
    coll, rcfg = environment_from_config(data, schema)
    assert environment_to_config(coll, rcfg) == data
    with pytest.raises(ValueError):
        environment_from_config({"bogus": 1}, schema)


# -- properties over a small exhaustive universe ------------------------------------

def test_brute_force_plan_equivalence(coll, schema):
    queries = small_queries()
    indexes = pool()
    sets = [()]
    sets += [(a,) for a in indexes]
    sets += list(itertools.combinations(indexes, 2))
    sets += list(itertools.combinations(indexes, 3))[::7]
    checked = 0
    for ixs in sets:
        iset = IndexSet(ixs)
        for q in queries:
            key, idx, p, served = oracle_plan(q, ixs, coll, schema)
            res = plan(q, iset, coll)
            assert res.chosen == idx, (q, ixs)
            assert res.covered_prefix_len == p
            assert res.sort_served == served
            assert res.est_cost == pytest.approx(key[0], rel=1e-12)
            checked += 1
    assert checked > 10_000


def test_plan_monotone_under_index_addition(coll):
    rng = np.random.default_rng(0)
    indexes = pool()
    queries = small_queries()
    for _ in range(300):
        picks = rng.choice(len(indexes), size=4, replace=False)
        ixs = IndexSet(tuple(indexes[int(i)] for i in picks[:3]))
        more = create_index(ixs, indexes[int(picks[3])])
        for q in queries[:: 5]:
            full_scan = plan(q, IndexSet(), coll).est_cost
            c0 = plan(q, ixs, coll).est_cost
            assert plan(q, more, coll).est_cost <= c0 <= full_scan


def test_sort_served_iff_inversion_served(coll):
    for idx in pool():
        iset = IndexSet((idx,))
        for q in small_queries():
            if not q.agg.sort:
                continue
            inv = Query(q.expr, Aggregation.sort_then_limit(
                [(f, d.inverted()) for f, d in q.agg.sort], 10))
            assert plan(q, iset, coll).sort_served == plan(inv, iset, coll).sort_served


def test_prefix_property():
    for idx in pool():
        for q in small_queries():
            fields = [p.field for p in conjunctive_context(q.expr)[0]]
            p = usable_prefix(idx, fields)
            if p >= 1:
                shorter = IndexDef(idx.keys[:p])
                assert usable_prefix(shorter, fields) == p
                assert usable_prefix(IndexDef(idx.keys[:1]), fields) == 1
