import json
import time

import pytest

from lift_index.demos import (
    DemonstrationRecord,
    build_demonstrations,
    full_index_rule,
    load_demos,
    order_queries,
    partial_index_rule,
    rule_index_set,
    save_demos,
)
from lift_index.planner import (
    CollectionModel,
    IndexSet,
    SimulatedDatabase,
    create_index,
    default_reward_config,
    reward,
)
from lift_index.querylang import (
    Aggregation,
    Logical,
    Predicate,
    Query,
    build_vocabulary,
    decode_action,
    extract_attributes,
    index,
)
from lift_index.workload import QueryGenConfig, default_schema, gen_workload


@pytest.fixture(scope="module")
def schema():
    return default_schema()


@pytest.fixture(scope="module")
def env(schema):
    coll = CollectionModel(10**6, schema)
    queries = gen_workload(schema, QueryGenConfig(seed=8), 60)
    rcfg = default_reward_config(queries, coll, rule_index_set(queries, "full"))
    return coll, queries, rcfg, build_vocabulary(schema)


def q2(sort=()):
    expr = Logical("$and", (Predicate("$eq", "name", "a"), Predicate("$gt", "age", 3)))
    agg = Aggregation.sort_then_limit(sort, 10) if sort else Aggregation.count()
    return Query(expr, agg)


def test_full_rule_examples():
    assert full_index_rule(q2()) == index(("name", "asc"), ("age", "asc"))
    assert full_index_rule(q2([("age", "desc")])) == index(("name", "asc"), ("age", "desc"))
    preds = tuple(Predicate("$eq", f, 1) for f in "abcd")
    assert full_index_rule(Query(Logical("$and", preds))) == index(("a", "asc"), ("b", "asc"), ("c", "asc"))


def test_partial_rule_examples():
    q = q2()
    assert partial_index_rule(q, IndexSet()) == full_index_rule(q)
    covered = IndexSet((index(("name", "asc")), index(("age", "desc"), ("x", "asc"))))
    assert partial_index_rule(q, covered) is None
    half = IndexSet((index(("name", "desc")),))
    assert partial_index_rule(q, half) == index(("age", "asc"))
    # a non-leading key does not count as covered
    assert partial_index_rule(q, IndexSet((index(("x", "asc"), ("age", "asc")),))) == full_index_rule(q)


def test_order_queries_is_stable_by_attribute_count():
    one = Query(Predicate("$eq", "a", 1))
    two = q2()
    other_one = Query(Predicate("$eq", "b", 1))
    assert order_queries([one, two, other_one], "desc") == [two, one, other_one]
    assert order_queries([two, one, other_one], "asc") == [one, other_one, two]
    assert order_queries([one, two], "none") == [one, two]
    with pytest.raises(ValueError):
        order_queries([one], "sideways")


def test_single_query_gives_one_terminal_transition(env):
    coll, queries, rcfg, vocab = env
    res = build_demonstrations(queries[:1], "full", SimulatedDatabase(coll), rcfg, vocab)
    assert len(res.transitions) == 1 and res.transitions[0].terminal
    assert res.transitions[0].is_demo


def test_full_rule_indexes_every_query(env):
    coll, queries, rcfg, vocab = env
    db = SimulatedDatabase(coll)
    res = build_demonstrations(queries, "full", db, rcfg, vocab)
    assert len(res.records) == len(queries) and not res.skipped
    distinct = {full_index_rule(q).keys for q in queries}
    assert len(db.indexes) == len(distinct)


def test_actions_decode_to_rule_output(env):
    coll, queries, rcfg, vocab = env
    for rule in ("full", "partial"):
        res = build_demonstrations(queries, rule, SimulatedDatabase(coll), rcfg, vocab)
        for rec, tr in zip(res.records, res.transitions):
            assert decode_action(tr.a, extract_attributes(rec.query)) == rec.action_index


def test_rewards_match_replay_oracle(env):
    coll, queries, rcfg, vocab = env
    res = build_demonstrations(queries, "partial", SimulatedDatabase(coll), rcfg, vocab,
                               episode_size=20)
    indexes = None
    for rec in res.records:
        if rec.step == 0:
            indexes = IndexSet()
        assert rec.context_indexes == indexes.indexes
        indexes = create_index(indexes, rec.action_index) if rec.action_index else indexes
        db = SimulatedDatabase(coll, indexes=indexes)
        assert rec.reward == reward(db.execute(rec.query), db.index_size(), rcfg)
    assert [r.terminal for r in res.records].count(True) == 3


def test_episode_links_next_state(env):
    coll, queries, rcfg, vocab = env
    res = build_demonstrations(queries[:5], "full", SimulatedDatabase(coll), rcfg, vocab)
    for a, b in zip(res.transitions, res.transitions[1:]):
        assert a.s_next == b.s and not a.terminal


def test_generation_is_deterministic(env):
    coll, queries, rcfg, vocab = env
    a = build_demonstrations(queries, "full", SimulatedDatabase(coll, seed=1), rcfg, vocab)
    b = build_demonstrations(queries, "full", SimulatedDatabase(coll, seed=1), rcfg, vocab)
    assert a.records == b.records and a.transitions == b.transitions


def test_partial_keys_never_exceed_full(schema):
    for seed in range(5):
        qs = gen_workload(schema, QueryGenConfig(seed=seed), 200)
        assert rule_index_set(qs, "partial").total_keys() <= rule_index_set(qs, "full").total_keys()


def test_unencodable_rule_output_is_skipped(env):
    coll, queries, rcfg, vocab = env

    def bad_rule(query, existing, k_max):
        return index(("not_in_query", "asc"))

    res = build_demonstrations(queries[:3], bad_rule, SimulatedDatabase(coll), rcfg, vocab)
    assert not res.records and len(res.skipped) == 3


def test_save_load_round_trip(env, tmp_path, schema):
    coll, queries, rcfg, vocab = env
    res = build_demonstrations(queries, "full", SimulatedDatabase(coll), rcfg, vocab)
    path = tmp_path / "d.jsonl"
    save_demos(res.records, path)
    loaded = load_demos(path, schema)
    assert loaded.records == res.records and not loaded.errors


def test_bad_lines_are_reported(env, tmp_path, schema):
    coll, queries, rcfg, vocab = env
    res = build_demonstrations(queries[:3], "full", SimulatedDatabase(coll), rcfg, vocab)
    path = tmp_path / "d.jsonl"
    save_demos(res.records, path)
    lines = path.read_text().splitlines()
    broken = json.loads(lines[1])
    broken["query"] = {"expr": {"nope": {"$eq": 1}}}
    lines[1] = json.dumps(broken)
    lines.append("{truncated")
    path.write_text("\n".join(lines) + "\n")
    loaded = load_demos(path, schema)
    assert len(loaded.records) == 2
    assert [n for n, _ in loaded.errors] == [2, 4]


def test_ten_thousand_records_load_quickly(tmp_path, schema):
    qs = gen_workload(schema, QueryGenConfig(seed=2), 100)
    rec = [DemonstrationRecord(i // 100, i % 100, qs[i % 100], (), full_index_rule(qs[i % 100]), -0.5)
           for i in range(10_000)]
    path = tmp_path / "big.jsonl"
    save_demos(rec, path)
    start = time.perf_counter()
    loaded = load_demos(path, schema)
    assert len(loaded.records) == 10_000
    assert time.perf_counter() - start < 5
