"""
Online refinement versus learning from scratch
==============================================

Refine the pretrained model on a fresh 20-query workload and compare with an
agent that starts from random weights.  Pass a number of episodes on the
command line to shorten the run (default 100, one seed).
"""

# %%
import sys

from lift_index.agent import AgentConfig, DQfDAgent, ExplorationSchedule
from lift_index.controller import (
    baseline_index_set,
    evaluate_index_set,
    experiment_context,
    pretrain_agent,
    train_online,
)
from lift_index.demos import build_demonstrations
from lift_index.planner import CollectionModel, SimulatedDatabase
from lift_index.querylang import build_vocabulary
from lift_index.workload import QueryGenConfig, default_schema, gen_workload

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 100
seed = 0

schema = default_schema()
vocab = build_vocabulary(schema)
coll = CollectionModel(10**6, schema)
train = gen_workload(schema, QueryGenConfig(seed=1), 2000)
test = gen_workload(schema, QueryGenConfig(seed=12345), 20)

_, train_rcfg = experiment_context(train, coll)
demos = build_demonstrations(train, "full", SimulatedDatabase(coll), train_rcfg, vocab, episode_size=20)
pre = pretrain_agent(
    AgentConfig(vocab_size=len(vocab), exploration=ExplorationSchedule.pretrained(), seed=seed),
    demos.records, vocab,
).agent

# %%
# Rewards on the test workload use its own Full-rule size and full-scan latency.
full_size, rcfg = experiment_context(test, coll)
refined = train_online(DQfDAgent(pre.config, pre.params), test, coll, vocab, rcfg, episodes, seed=seed)
scratch = train_online(DQfDAgent(AgentConfig(vocab_size=len(vocab), seed=seed)), test, coll, vocab,
                       rcfg, episodes, seed=seed)
print("best episode reward  pretrain+online", round(refined.best_reward, 3),
      " scratch", round(scratch.best_reward, 3))

# %%
# Final evaluation recreates the best index set and runs each query 5 times.
rows = {
    "Default": baseline_index_set(test, "default"),
    "Full": baseline_index_set(test, "full"),
    "Partial": baseline_index_set(test, "partial"),
    "Online": scratch.best_indexes,
    "Pretrain+Online": refined.best_indexes,
}
for name, iset in rows.items():
    rep = evaluate_index_set(iset, test, coll, rcfg, full_size)
    print(f"{name:16s} mean={rep.mean_latency:7.3f}s p90={rep.p90_latency:7.3f}s "
          f"p99={rep.p99_latency:7.3f}s size={rep.normalized_size:.2f}")
