"""
Synthetic workload and the simulated planner
============================================

Generate queries over the default schema, then ask the cost-based planner
what different index sets buy.
"""

# %%
import numpy as np

from lift_index.planner import CollectionModel, IndexSet, execute, index_size, plan, reward
from lift_index.controller import baseline_index_set, experiment_context
from lift_index.querylang import format_query, index
from lift_index.workload import QueryGenConfig, attribute_count_histogram, default_schema, gen_workload

schema = default_schema()
for a in schema.attributes:
    print(f"{a.name:4s} {a.type:12s} cardinality={a.cardinality}")

queries = gen_workload(schema, QueryGenConfig(seed=12345), 20)
for q in queries[:5]:
    print(format_query(q))
print(attribute_count_histogram(queries))

# %%
# One million simulated documents; latency is cost units times 1 microsecond.
coll = CollectionModel(10**6, schema)
q = queries[0]
print(format_query(q))
print("no index  :", execute(q, IndexSet(), coll), "s")
for idx in baseline_index_set([q], "full"):
    res = plan(q, IndexSet((idx,)), coll)
    print("full rule :", idx, execute(q, IndexSet((idx,)), coll), "s", "sort served:", res.sort_served)

# %%
# A compound index serves any query on one of its prefixes, and a sort
# whose directions match the keys exactly or fully inverted.
ix = IndexSet((index(("f2", "asc"), ("f7", "desc")),))
print(index_size(ix, coll), "bytes")

# %%
# Rule baselines on the whole workload, scored with the default reward.
full_size, rcfg = experiment_context(queries, coll)
print("omega1 =", rcfg.omega1, "omega2 =", rcfg.omega2)
for strategy in ("default", "partial", "full"):
    iset = baseline_index_set(queries, strategy)
    m = index_size(iset, coll)
    lat = [execute(q, iset, coll) for q in queries]
    total = sum(reward(t, m, rcfg) for t in lat)
    print(f"{strategy:8s} indexes={len(iset):2d} size={m / full_size:.2f} "
          f"mean latency={np.mean(lat):.3f}s reward={total:.2f}")
