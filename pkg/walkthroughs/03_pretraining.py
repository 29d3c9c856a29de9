"""
Pretraining on rule demonstrations
==================================

Run the Full indexing rule over a training workload, record the rewarded
demonstrations and pretrain a DQfD agent until it mostly agrees with the rule.
"""

# %%
from lift_index.agent import AgentConfig, ExplorationSchedule
from lift_index.controller import experiment_context, pretrain_agent
from lift_index.demos import build_demonstrations
from lift_index.planner import CollectionModel, SimulatedDatabase
from lift_index.querylang import build_vocabulary
from lift_index.workload import QueryGenConfig, default_schema, gen_workload

schema = default_schema()
vocab = build_vocabulary(schema)
coll = CollectionModel(10**6, schema)
train = gen_workload(schema, QueryGenConfig(seed=1), 2000)
_, rcfg = experiment_context(train, coll)

demos = build_demonstrations(train, "full", SimulatedDatabase(coll), rcfg, vocab, episode_size=20)
print(len(demos.records), "demonstrations,", len(demos.skipped), "skipped")
first = demos.records[0]
print(first.action_index, first.reward)

# %%
# Default hyperparameters: batch 32, Adam at 5e-4, margin 0.1, embedding then a
# 128-unit dense layer.  Early stop at 75% agreement.
cfg = AgentConfig(vocab_size=len(vocab), exploration=ExplorationSchedule.pretrained(), seed=0)
res = pretrain_agent(cfg, demos.records, vocab, max_updates=2000, eval_every=200)
for step, acc in res.history:
    print(f"update {step:5d}  accuracy {acc:.3f}")

# %%
# Agreement tops out near 0.74.  The state carries no token for a sort
# direction, so the rule's descending sort keys cannot be predicted from
# the state; they are the remaining disagreements.
