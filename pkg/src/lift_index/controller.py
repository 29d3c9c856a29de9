"""Execution modes: pretraining, agent-driven online training, evaluation,
rule baselines and passive serving.

The controller only talks to the indexing problem through three pieces:
``tokenize`` (system state -> agent state), the action codec (agent action ->
index command) and ``reward``.  Another system would plug in its own triplet.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .agent import AgentConfig, DQfDAgent, ExplorationSchedule, Transition
from .demos import (
    QUERY_ORDERS,
    DemonstrationRecord,
    load_demos,
    order_queries,
    records_to_transitions,
    rule_index_set,
)
from .planner import (
    CollectionModel,
    IndexSet,
    RewardConfig,
    SimulatedDatabase,
    create_index,
    default_reward_config,
    environment_from_config,
    environment_to_config,
    index_size,
    reward,
)
from .querylang import (
    IndexDef,
    Query,
    Vocabulary,
    build_vocabulary,
    decode_action,
    extract_attributes,
    query_from_json,
    tokenize,
)
from .workload import Schema, default_schema, load_queries

logger = logging.getLogger(__name__)

MODES = ("pretrain", "online", "evaluate", "serve")
CURVE_FIELDS = ("episode", "step", "reward", "epsilon", "loss_td", "loss_margin")


def nearest_rank(values: Sequence[float], pct: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


@dataclass
class ExperimentConfig:
    mode: str
    agent_config: str | None = None
    env_config: str | None = None
    workload: str | None = None
    demos: str | None = None
    model: str | None = None
    episodes: int = 100
    eval_repetitions: int = 5
    seed: int = 0
    query_order: str = "desc"
    outputs: dict = field(default_factory=dict)
    indexes: str | None = None  # stored index set for evaluate
    pretrain_updates: int = 2000
    eval_every: int = 100
    target_accuracy: float | None = 0.75
    learn: bool = False  # serve mode: apply observe() when rewards arrive

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.query_order not in QUERY_ORDERS:
            raise ValueError(f"query_order must be one of {QUERY_ORDERS}")
        required = {
            "pretrain": ("demos",),
            "online": ("workload",),
            "evaluate": ("workload",),
            "serve": ("model",),
        }[self.mode]
        missing = [name for name in required if not getattr(self, name)]
        if missing:
            raise ValueError(f"{self.mode} mode requires: {', '.join(missing)}")
        if self.episodes < 1 or self.eval_repetitions < 1:
            raise ValueError("episodes and eval_repetitions must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Pretraining


@dataclass
class PretrainResult:
    agent: DQfDAgent
    history: list
    num_demos: int


def pretrain_agent(
    config: AgentConfig,
    records: Sequence[DemonstrationRecord],
    vocab: Vocabulary,
    max_updates: int = 2000,
    eval_every: int = 100,
    target_accuracy: float | None = 0.75,
) -> PretrainResult:
    if not records:
        raise ValueError("no demonstrations to pretrain on")
    agent = DQfDAgent(config)
    transitions = records_to_transitions(records, vocab, config.k_max, config.input_length)
    n = agent.import_demonstrations(transitions)
    history = agent.pretrain(max_updates, eval_every, target_accuracy)
    return PretrainResult(agent, history, n)


def write_accuracy_curve(history: Sequence, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "accuracy"])
        for step, acc in history:
            w.writerow([step, f"{acc:.6f}"])


# ---------------------------------------------------------------------------
# Online training


@dataclass
class EpisodeResult:
    decisions: list  # per-step IndexDef | None, in execution order
    rewards: list
    latencies: list
    indexes: IndexSet

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


def run_episode(
    agent,
    db: SimulatedDatabase,
    queries: Sequence[Query],
    vocab: Vocabulary,
    reward_cfg: RewardConfig,
    explore: bool = True,
    learn: bool = True,
    on_step=None,
) -> EpisodeResult:
    """One pass over ``queries`` (already ordered) from an empty index set."""
    cfg = agent.config
    db.drop_all()
    decisions, rewards, latencies = [], [], []
    state = tokenize(queries[0], db.indexes, vocab, cfg.input_length)
    for i, q in enumerate(queries):
        action = agent.act(state.ids, explore=explore)
        idx = decode_action(action, extract_attributes(q))
        m = db.create_index(idx)
        t = db.execute(q)
        r = reward(t, m, reward_cfg)
        terminal = i == len(queries) - 1
        nxt = state if terminal else tokenize(queries[i + 1], db.indexes, vocab, cfg.input_length)
        report = None
        if learn:
            report = agent.observe(Transition(state.ids, action, r, nxt.ids, terminal))
        decisions.append(idx)
        rewards.append(r)
        latencies.append(t)
        if on_step is not None:
            on_step(i, r, report)
        state = nxt
    return EpisodeResult(decisions, rewards, latencies, db.indexes)


def replay_decisions(
    decisions: Sequence[IndexDef | None], queries: Sequence[Query],
    db: SimulatedDatabase, reward_cfg: RewardConfig,
) -> float:
    """Episode reward of a recorded decision sequence (no agent involved)."""
    db.drop_all()
    total = 0.0
    for idx, q in zip(decisions, queries):
        m = db.create_index(idx)
        total += reward(db.execute(q), m, reward_cfg)
    return total


@dataclass
class OnlineResult:
    agent: DQfDAgent
    curve: list  # dict rows with CURVE_FIELDS
    episode_rewards: list
    best_rewards: list  # running max after each episode
    best_reward: float
    best_decisions: list
    best_indexes: IndexSet
    queries: list  # execution order


def train_online(
    agent: DQfDAgent,
    queries: Sequence[Query],
    coll: CollectionModel,
    vocab: Vocabulary,
    reward_cfg: RewardConfig,
    episodes: int = 100,
    query_order: str = "desc",
    seed: int = 0,
) -> OnlineResult:
    if not queries:
        raise ValueError("workload is empty")
    ordered = order_queries(queries, query_order)
    db = SimulatedDatabase(coll, seed=seed)
    curve, ep_rewards, best_rewards = [], [], []
    best = None
    for ep in range(episodes):
        def log_step(i, r, report, ep=ep):
            curve.append({
                "episode": ep,
                "step": i,
                "reward": r,
                "epsilon": agent.epsilon,
                "loss_td": report["loss_td"] if report else float("nan"),
                "loss_margin": report["loss_margin"] if report else float("nan"),
            })

        res = run_episode(agent, db, ordered, vocab, reward_cfg, explore=True, learn=True,
                          on_step=log_step)
        ep_rewards.append(res.total_reward)
        if best is None or res.total_reward > best.total_reward:
            best = res
        best_rewards.append(best.total_reward)
    return OnlineResult(agent, curve, ep_rewards, best_rewards, best.total_reward,
                        best.decisions, best.indexes, ordered)


def write_reward_curve(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    mean_latency: float
    p90_latency: float
    p99_latency: float
    normalized_size: float
    index_bytes: int
    total_reward: float
    per_query_latencies: list
    indexes: list
    config: dict
    timestamp: str = ""

    def to_json(self) -> dict:
        return {
            "mean_latency": self.mean_latency,
            "p90_latency": self.p90_latency,
            "p99_latency": self.p99_latency,
            "normalized_size": self.normalized_size,
            "index_bytes": self.index_bytes,
            "total_reward": self.total_reward,
            "per_query_latencies": self.per_query_latencies,
            "indexes": self.indexes,
            "config": self.config,
            "timestamp": self.timestamp,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate_index_set(
    indexes: IndexSet,
    queries: Sequence[Query],
    coll: CollectionModel,
    reward_cfg: RewardConfig,
    full_size: int,
    repetitions: int = 5,
    seed: int = 0,
    config: dict | None = None,
) -> EvalReport:
    """Recreate ``indexes`` and run every query ``repetitions`` times."""
    db = SimulatedDatabase(coll, seed=seed)
    for idx in indexes:
        db.create_index(idx)
    m = db.index_size()
    per_query, samples = [], []
    total = 0.0
    for q in queries:
        ts = [db.execute(q) for _ in range(repetitions)]
        per_query.append(ts)
        samples.extend(ts)
        total += reward(float(np.mean(ts)), m, reward_cfg)
    return EvalReport(
        mean_latency=float(np.mean(samples)),
        p90_latency=nearest_rank(samples, 90),
        p99_latency=nearest_rank(samples, 99),
        normalized_size=m / full_size if full_size else 0.0,
        index_bytes=m,
        total_reward=total,
        per_query_latencies=per_query,
        indexes=indexes.to_json(),
        config=dict(config or {}),
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


def greedy_index_set(agent, queries: Sequence[Query], coll: CollectionModel, vocab: Vocabulary,
                     query_order: str = "desc") -> IndexSet:
    """Index set from one exploration-free pass of the model."""
    db = SimulatedDatabase(coll)
    for q in order_queries(queries, query_order):
        state = tokenize(q, db.indexes, vocab, agent.config.input_length)
        db.create_index(decode_action(agent.act(state.ids, explore=False), extract_attributes(q)))
    return db.indexes


def baseline_index_set(queries: Sequence[Query], strategy: str, k_max: int = 3,
                       query_order: str = "desc") -> IndexSet:
    if strategy == "default":
        return IndexSet()
    if strategy not in ("full", "partial"):
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    return rule_index_set(queries, strategy, k_max, query_order)


def experiment_context(queries: Sequence[Query], coll: CollectionModel, k_max: int = 3,
                       query_order: str = "desc", reward_cfg: RewardConfig | None = None):
    """Full-rule size and reward weights for a workload: ``(full_size, reward_cfg)``."""
    full = baseline_index_set(queries, "full", k_max, query_order)
    if reward_cfg is None:
        reward_cfg = default_reward_config(queries, coll, full)
    return index_size(full, coll), reward_cfg


def decided_defaults(agent_cfg: AgentConfig | None, coll: CollectionModel, reward_cfg: RewardConfig,
                     **extra) -> dict:
    """Config echo carried by every report."""
    echo = {
        "environment": environment_to_config(coll, reward_cfg),
        "planner": {
            "range_selectivity": 1.0 / 3.0,
            "bytes_per_entry_base": IndexSet().bytes_per_entry_base,
            "bytes_per_key": IndexSet().bytes_per_key,
        },
    }
    if agent_cfg is not None:
        echo["agent"] = agent_cfg.to_dict()
    echo.update(extra)
    return echo


# ---------------------------------------------------------------------------
# Serving


class IndexAdvisorService:
    """Environment-driven mode: decisions for an externally driven query stream.

    Input lines are either a bare query object or ``{"query": {...}, "reward": r}``
    where ``reward`` scores the previous decision; ``{"reset": true}`` clears the
    tracked index set.  Each query line yields ``{"index": [...] | null}``.
    """

    def __init__(self, agent: DQfDAgent, vocab: Vocabulary, learn: bool = False):
        self.agent = agent
        self.vocab = vocab
        self.learn = learn
        self.indexes = IndexSet()
        self._pending = None  # (state ids, action) of the last decision

    def handle(self, line: str) -> dict | None:
        try:
            msg = json.loads(line)
            if not isinstance(msg, dict):
                raise ValueError("expected a JSON object")
            if msg.get("reset"):
                self.indexes = IndexSet()
                self._pending = None
                return {"reset": True}
            body = msg["query"] if "query" in msg else msg
            query = query_from_json(body)
        except (ValueError, KeyError, TypeError) as exc:
            return {"error": f"{type(exc).__name__}: {exc}"}
        state = tokenize(query, self.indexes, self.vocab, self.agent.config.input_length)
        if self.learn and self._pending is not None and "reward" in msg:
            s, a = self._pending
            self.agent.observe(Transition(s, a, float(msg["reward"]), state.ids, False))
        action = self.agent.act(state.ids, explore=False)
        idx = decode_action(action, extract_attributes(query))
        if idx is not None:
            self.indexes = create_index(self.indexes, idx)
        self._pending = (state.ids, action)
        return {"index": idx.to_json() if idx else None}

    def run(self, stream_in: IO[str], stream_out: IO[str]) -> int:
        n = 0
        for line in stream_in:
            if not line.strip():
                continue
            out = self.handle(line)
            stream_out.write(json.dumps(out, sort_keys=True) + "\n")
            stream_out.flush()
            n += 1
        return n


# ---------------------------------------------------------------------------
# Pipeline helpers used by the CLI


def build_agent_config(vocab: Vocabulary, overrides: dict | None = None, seed: int = 0,
                       pretrained: bool = False) -> AgentConfig:
    data = dict(overrides or {})
    data.setdefault("states", {})
    data["states"] = {"length": 32, **data["states"], "vocab_size": len(vocab)}
    data.setdefault("seed", seed)
    if "exploration" not in data:
        sched = ExplorationSchedule.pretrained() if pretrained else ExplorationSchedule.scratch()
        data["exploration"] = {"start": sched.start, "end": sched.end, "decay_steps": sched.decay_steps}
    return AgentConfig.from_dict(data)


def write_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValueError(f"cannot read {what} file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{what} file {path} is not valid JSON: {exc}") from exc


def load_environment(path=None):
    """``(schema, collection, reward override or None)`` from an environment file.

    Besides the collection keys the file may carry a ``schema`` attribute list;
    without one the default 15-attribute schema is used.
    """
    data = dict(read_json(path, "environment")) if path else {}
    schema_data = data.pop("schema", None)
    schema = Schema.from_json(schema_data) if schema_data is not None else default_schema()
    coll, rcfg = environment_from_config(data, schema)
    return schema, coll, rcfg


def _agent_overrides(cfg: ExperimentConfig) -> dict:
    return dict(read_json(cfg.agent_config, "agent config")) if cfg.agent_config else {}


def _load_agent(path, vocab: Vocabulary, seed: int) -> DQfDAgent:
    agent, tokens, _ = DQfDAgent.load(path)
    if list(tokens) != list(vocab.tokens):
        raise ValueError(f"model {path} was trained on a different vocabulary")
    if agent.config.seed != seed:
        agent = DQfDAgent(replace(agent.config, seed=seed), agent.params)
    return agent


def _demo_records(path, schema: Schema, k_max: int) -> list:
    loaded = load_demos(path, schema, k_max)
    if loaded.errors:
        logger.warning("%s: %d demonstration line(s) skipped", path, len(loaded.errors))
    return loaded.records


def _write_outputs(cfg: ExperimentConfig, key: str, writer, *args) -> None:
    path = cfg.outputs.get(key)
    if path:
        writer(*args, path)


def run_pretrain(cfg: ExperimentConfig) -> dict:
    """Pretrain on a demo file; writes ``model`` and ``curve`` outputs."""
    schema, coll, rcfg = load_environment(cfg.env_config)
    vocab = build_vocabulary(schema)
    agent_cfg = build_agent_config(vocab, _agent_overrides(cfg), cfg.seed, pretrained=True)
    records = _demo_records(cfg.demos, schema, agent_cfg.k_max)
    if not records:
        raise ValueError(f"demonstration file {cfg.demos} holds no usable records")
    res = pretrain_agent(agent_cfg, records, vocab, cfg.pretrain_updates, cfg.eval_every,
                         cfg.target_accuracy)
    echo = {"experiment": cfg.to_dict(), "agent": agent_cfg.to_dict()}
    summary = {
        "demonstrations": res.num_demos,
        "updates": res.agent.updates,
        "final_accuracy": res.history[-1][1],
        "config": echo,
    }
    if cfg.outputs.get("model"):
        res.agent.save(cfg.outputs["model"], vocab.tokens,
                       {"experiment": cfg.to_dict(), "history": res.history})
    _write_outputs(cfg, "curve", write_accuracy_curve, res.history)
    return summary


def run_online(cfg: ExperimentConfig) -> dict:
    """Online refinement (fresh or from ``model``); writes ``model``, ``curve`` and ``best``."""
    schema, coll, rcfg_override = load_environment(cfg.env_config)
    vocab = build_vocabulary(schema)
    queries = load_queries(cfg.workload, schema)
    if not queries:
        raise ValueError(f"workload {cfg.workload} is empty")
    if cfg.model:
        agent = _load_agent(cfg.model, vocab, cfg.seed)
    else:
        agent = DQfDAgent(build_agent_config(vocab, _agent_overrides(cfg), cfg.seed))
    k_max = agent.config.k_max
    full_size, rcfg = experiment_context(queries, coll, k_max, cfg.query_order, rcfg_override)
    if cfg.demos:
        records = _demo_records(cfg.demos, schema, k_max)
        agent.import_demonstrations(records_to_transitions(records, vocab, k_max,
                                                           agent.config.input_length))
    res = train_online(agent, queries, coll, vocab, rcfg, cfg.episodes, cfg.query_order, cfg.seed)
    echo = decided_defaults(agent.config, coll, rcfg, experiment=cfg.to_dict(),
                            full_index_bytes=full_size)
    best = {
        "best_reward": res.best_reward,
        "indexes": res.best_indexes.to_json(),
        "decisions": [d.to_json() if d else None for d in res.best_decisions],
        "config": echo,
    }
    if cfg.outputs.get("model"):
        agent.save(cfg.outputs["model"], vocab.tokens, {"experiment": cfg.to_dict()})
    _write_outputs(cfg, "curve", write_reward_curve, res.curve)
    _write_outputs(cfg, "best", write_json, best)
    return {"best_reward": res.best_reward, "episode_rewards": res.episode_rewards,
            "best_indexes": best["indexes"], "config": echo}


def _report(cfg: ExperimentConfig, indexes: IndexSet, queries, coll, rcfg, full_size,
            agent_cfg, **extra) -> EvalReport:
    echo = decided_defaults(agent_cfg, coll, rcfg, experiment=cfg.to_dict(),
                            full_index_bytes=full_size, **extra)
    report = evaluate_index_set(indexes, queries, coll, rcfg, full_size, cfg.eval_repetitions,
                                cfg.seed, echo)
    if cfg.outputs.get("report"):
        Path(cfg.outputs["report"]).write_text(report.dumps() + "\n")
    return report


def run_evaluate(cfg: ExperimentConfig) -> EvalReport:
    """Evaluate a stored index set (``indexes``) or the greedy set of a model."""
    if not cfg.indexes and not cfg.model:
        raise ValueError("evaluate needs an index set or a model")
    schema, coll, rcfg_override = load_environment(cfg.env_config)
    vocab = build_vocabulary(schema)
    queries = load_queries(cfg.workload, schema)
    agent_cfg = None
    if cfg.indexes:
        data = read_json(cfg.indexes, "index set")
        indexes = IndexSet.from_json(data["indexes"] if isinstance(data, dict) else data)
        k_max = max((len(i.keys) for i in indexes), default=3)
        source = "indexes"
    else:
        agent = _load_agent(cfg.model, vocab, cfg.seed)
        agent_cfg, k_max = agent.config, agent.config.k_max
        indexes = greedy_index_set(agent, queries, coll, vocab, cfg.query_order)
        source = "model"
    full_size, rcfg = experiment_context(queries, coll, max(k_max, 3), cfg.query_order,
                                         rcfg_override)
    return _report(cfg, indexes, queries, coll, rcfg, full_size, agent_cfg, source=source)


def run_baseline(cfg: ExperimentConfig, strategy: str) -> EvalReport:
    """Evaluate the Default (no index), Full or Partial rule index set."""
    schema, coll, rcfg_override = load_environment(cfg.env_config)
    queries = load_queries(cfg.workload, schema)
    if not queries:
        raise ValueError(f"workload {cfg.workload} is empty")
    indexes = baseline_index_set(queries, strategy, query_order=cfg.query_order)
    full_size, rcfg = experiment_context(queries, coll, 3, cfg.query_order, rcfg_override)
    return _report(cfg, indexes, queries, coll, rcfg, full_size, None, strategy=strategy)


def run_serve(cfg: ExperimentConfig, stream_in: IO[str], stream_out: IO[str]) -> int:
    schema, _, _ = load_environment(cfg.env_config)
    vocab = build_vocabulary(schema)
    agent = _load_agent(cfg.model, vocab, cfg.seed)
    return IndexAdvisorService(agent, vocab, learn=cfg.learn).run(stream_in, stream_out)
