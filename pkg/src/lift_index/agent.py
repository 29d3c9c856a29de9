"""Deep Q-learning from demonstrations over a multi-head action space.

The agent follows the two-call act/observe protocol.  Demonstrations live in a
separate memory that is never evicted; online experience goes to a FIFO ring
buffer.  Each training update mixes both, computes double-DQN targets with a
delayed target network and adds the large-margin expert loss on demonstration
samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import neural
from .neural import AdamState, NetworkSpec

logger = logging.getLogger(__name__)


class AgentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExplorationSchedule:
    """Linear epsilon decay from ``start`` to ``end`` over ``decay_steps`` timesteps."""

    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 10_000

    @classmethod
    def pretrained(cls) -> "ExplorationSchedule":
        return cls(0.2, 0.01, 2_000)

    @classmethod
    def scratch(cls) -> "ExplorationSchedule":
        return cls(1.0, 0.05, 10_000)

    def value(self, t: int) -> float:
        if self.decay_steps <= 0 or t >= self.decay_steps:
            return self.end
        return self.start + (self.end - self.start) * t / self.decay_steps


@dataclass(frozen=True)
class AgentConfig:
    vocab_size: int
    input_length: int = 32
    k_max: int = 3
    embed_dim: int = 32
    hidden: tuple = ((128, "relu"),)
    pooling: str = "mean"
    gamma: float = 0.95
    margin: float = 0.1
    margin_weight: float = 1.0
    batch_size: int = 32
    demo_fraction: float = 0.25
    target_sync_interval: int = 100
    update_interval: int = 1
    warmup: int = 32
    memory_capacity: int = 50_000
    learning_rate: float = 5e-4
    double_q: bool = True
    exploration: ExplorationSchedule = field(default_factory=ExplorationSchedule.scratch)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(n), str(a)) for n, a in self.hidden))
        checks = {
            "gamma": 0.0 <= self.gamma < 1.0,
            "margin": self.margin > 0,
            "margin_weight": self.margin_weight >= 0,
            "demo_fraction": 0.0 <= self.demo_fraction <= 1.0,
            "batch_size": self.batch_size >= 1,
            "target_sync_interval": self.target_sync_interval >= 1,
            "update_interval": self.update_interval >= 1,
            "warmup": self.warmup >= 0,
            "memory_capacity": self.memory_capacity >= 1,
            "learning_rate": self.learning_rate > 0,
            "exploration": all(
                0.0 <= e <= 1.0 for e in (self.exploration.start, self.exploration.end)
            ),
        }
        for name, ok in checks.items():
            if not ok:
                raise AgentConfigError(f"invalid agent config field {name!r}: {getattr(self, name)!r}")
        try:
            self.network_spec
        except ValueError as exc:
            raise AgentConfigError(f"invalid agent config field 'network': {exc}") from exc

    @property
    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            self.vocab_size, self.input_length, self.k_max, self.embed_dim, self.hidden, self.pooling
        )

    @property
    def num_options(self) -> int:
        return 2 * self.k_max + 1

    def to_dict(self) -> dict:
        """Declarative form: states, actions, network, optimizer, exploration."""
        return {
            "states": {"length": self.input_length, "vocab_size": self.vocab_size},
            "actions": {"heads": self.k_max, "options": self.num_options},
            "network": [
                {"type": "embedding", "size": self.embed_dim, "pooling": self.pooling},
                *({"type": "dense", "size": n, "activation": a} for n, a in self.hidden),
            ],
            "optimizer": {"type": "adam", "lr": self.learning_rate},
            "gamma": self.gamma,
            "margin": self.margin,
            "margin_weight": self.margin_weight,
            "double_q": self.double_q,
            "memory": {
                "capacity": self.memory_capacity,
                "batch_size": self.batch_size,
                "demo_fraction": self.demo_fraction,
            },
            "update": {
                "interval": self.update_interval,
                "warmup": self.warmup,
                "target_sync": self.target_sync_interval,
            },
            "exploration": asdict(self.exploration),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {
            "states", "actions", "network", "optimizer", "gamma", "margin",
            "margin_weight", "double_q", "memory", "update", "exploration", "seed",
        }
        unknown = set(data) - known
        if unknown:
            raise AgentConfigError(f"unknown agent config keys: {sorted(unknown)}")
        kw: dict = {}
        states = data.get("states", {})
        if "vocab_size" not in states:
            raise AgentConfigError("invalid agent config field 'states': vocab_size missing")
        kw["vocab_size"] = int(states["vocab_size"])
        kw["input_length"] = int(states.get("length", 32))
        actions = data.get("actions", {})
        if "heads" in actions:
            kw["k_max"] = int(actions["heads"])
            if "options" in actions and int(actions["options"]) != 2 * kw["k_max"] + 1:
                raise AgentConfigError("invalid agent config field 'actions': options must be 2*heads+1")
        hidden = []
        for layer in data.get("network", []):
            if layer.get("type") == "embedding":
                kw["embed_dim"] = int(layer.get("size", 32))
                kw["pooling"] = layer.get("pooling", "mean")
            elif layer.get("type") == "dense":
                hidden.append((int(layer["size"]), layer.get("activation", "relu")))
            else:
                raise AgentConfigError(f"invalid agent config field 'network': layer {layer!r}")
        if hidden:
            kw["hidden"] = tuple(hidden)
        opt = data.get("optimizer", {})
        if opt.get("type", "adam") != "adam":
            raise AgentConfigError("invalid agent config field 'optimizer': only adam is supported")
        if "lr" in opt:
            kw["learning_rate"] = float(opt["lr"])
        for key in ("gamma", "margin", "margin_weight"):
            if key in data:
                kw[key] = float(data[key])
        if "double_q" in data:
            kw["double_q"] = bool(data["double_q"])
        mem = data.get("memory", {})
        for src, dst in (("capacity", "memory_capacity"), ("batch_size", "batch_size")):
            if src in mem:
                kw[dst] = int(mem[src])
        if "demo_fraction" in mem:
            kw["demo_fraction"] = float(mem["demo_fraction"])
        upd = data.get("update", {})
        for src, dst in (("interval", "update_interval"), ("warmup", "warmup"),
                         ("target_sync", "target_sync_interval")):
            if src in upd:
                kw[dst] = int(upd[src])
        if "exploration" in data:
            kw["exploration"] = ExplorationSchedule(**data["exploration"])
        if "seed" in data:
            kw["seed"] = int(data["seed"])
        return cls(**kw)


@dataclass(frozen=True)
class Transition:
    s: tuple
    a: tuple
    r: float
    s_next: tuple
    terminal: bool
    is_demo: bool = False


class ReplayMemory:
    """Array-backed transition store; FIFO ring buffer when ``capacity`` is set."""

    def __init__(self, state_len: int, k: int, capacity: int | None = None):
        self.capacity = capacity
        self.state_len = state_len
        self.k = k
        size = capacity if capacity is not None else 256
        self._alloc(size)
        self._size = 0
        self._next = 0

    def _alloc(self, size: int) -> None:
        self.states = np.zeros((size, self.state_len), dtype=np.int64)
        self.next_states = np.zeros((size, self.state_len), dtype=np.int64)
        self.actions = np.zeros((size, self.k), dtype=np.int64)
        self.rewards = np.zeros(size)
        self.terminals = np.zeros(size, dtype=bool)
        self.demo = np.zeros(size, dtype=bool)

    def _grow(self) -> None:
        old = (self.states, self.next_states, self.actions, self.rewards, self.terminals, self.demo)
        self._alloc(2 * len(self.rewards))
        for new, prev in zip(
            (self.states, self.next_states, self.actions, self.rewards, self.terminals, self.demo), old
        ):
            new[: len(prev)] = prev

    def __len__(self) -> int:
        return self._size

    def add(self, tr: Transition) -> None:
        if self.capacity is None:
            if self._size == len(self.rewards):
                self._grow()
            i = self._size
        else:
            i = self._next
            self._next = (self._next + 1) % self.capacity
        self.states[i] = tr.s
        self.next_states[i] = tr.s_next
        self.actions[i] = tr.a
        self.rewards[i] = tr.r
        self.terminals[i] = tr.terminal
        self.demo[i] = tr.is_demo
        self._size = min(self._size + 1, self.capacity or self._size + 1)

    def _order(self) -> np.ndarray:
        if self.capacity is None or self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self._size) + self._next) % self.capacity

    def __iter__(self):
        for i in self._order():
            yield self.get(int(i))

    def get(self, i: int) -> Transition:
        return Transition(
            tuple(int(x) for x in self.states[i]),
            tuple(int(x) for x in self.actions[i]),
            float(self.rewards[i]),
            tuple(int(x) for x in self.next_states[i]),
            bool(self.terminals[i]),
            bool(self.demo[i]),
        )

    def batch(self, idx: np.ndarray) -> dict:
        return {
            "s": self.states[idx],
            "a": self.actions[idx],
            "r": self.rewards[idx],
            "s_next": self.next_states[idx],
            "terminal": self.terminals[idx],
            "is_demo": self.demo[idx],
        }


def _concat(a: dict | None, b: dict | None) -> dict:
    if a is None:
        return b
    if b is None:
        return a
    return {k: np.concatenate([a[k], b[k]]) for k in a}


# ---------------------------------------------------------------------------
# Loss pieces


def margin_loss(q_head: Sequence[float], expert_action: int, margin: float) -> float:
    q = np.asarray(q_head, dtype=np.float64)
    bonus = np.full(q.shape, margin)
    bonus[expert_action] = 0.0
    return float(np.max(q + bonus) - q[expert_action])


def margin_losses(q: np.ndarray, expert: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Per (sample, head) expert margin loss and the maximizing action.

    ``q`` has shape (batch, heads, options), ``expert`` (batch, heads).
    """
    bonus = np.full(q.shape, margin)
    np.put_along_axis(bonus, expert[..., None], 0.0, axis=-1)
    shifted = q + bonus
    arg = np.argmax(shifted, axis=-1)
    top = np.take_along_axis(shifted, arg[..., None], axis=-1)[..., 0]
    q_e = np.take_along_axis(q, expert[..., None], axis=-1)[..., 0]
    return top - q_e, arg


def targets_from_q(
    q_next_online: np.ndarray, q_next_target: np.ndarray, rewards, terminals,
    gamma: float, mode: str = "double",
) -> np.ndarray:
    """Per (transition, head) Q-learning targets."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    if mode == "double":
        a_star = np.argmax(q_next_online, axis=-1)
        bootstrap = np.take_along_axis(q_next_target, a_star[..., None], axis=-1)[..., 0]
    elif mode == "dqn":
        bootstrap = np.max(q_next_target, axis=-1)
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    y = rewards[:, None] + gamma * bootstrap
    return np.where(terminals[:, None], rewards[:, None], y)


def compute_targets(
    batch: dict, params: dict, target_params: dict, spec: NetworkSpec,
    gamma: float, mode: str = "double",
) -> np.ndarray:
    q_target = neural.q_values(target_params, spec, batch["s_next"])
    q_online = neural.q_values(params, spec, batch["s_next"]) if mode == "double" else q_target
    return targets_from_q(q_online, q_target, batch["r"], batch["terminal"], gamma, mode)


def dqfd_loss(
    params: dict, target_params: dict, spec: NetworkSpec, batch: dict,
    gamma: float, margin: float, margin_weight: float, mode: str = "double",
):
    """Mean over the batch of per-head TD error squared plus the weighted expert margin.

    Returns ``(report, grads)``.
    """
    y = compute_targets(batch, params, target_params, spec, gamma, mode)
    q, cache = neural.forward(params, spec, batch["s"])
    a = batch["a"]
    n = q.shape[0]
    q_a = np.take_along_axis(q, a[..., None], axis=-1)[..., 0]
    td = y - q_a
    td_loss = (td**2).sum(axis=1)

    dq = np.zeros_like(q)
    np.put_along_axis(dq, a[..., None], (-2.0 * td / n)[..., None], axis=-1)

    demo = batch["is_demo"].astype(bool)
    m_loss = np.zeros(n)
    if margin_weight > 0 and demo.any():
        je, arg = margin_losses(q, a, margin)
        m_loss = np.where(demo, je.sum(axis=1), 0.0)
        w = (margin_weight * demo / n)[:, None]
        g = np.zeros_like(q)
        np.put_along_axis(g, arg[..., None], w[..., None], axis=-1)
        # subtract at the expert action; cancels when the expert is the maximizer
        np.put_along_axis(
            g, a[..., None],
            np.take_along_axis(g, a[..., None], axis=-1) - w[..., None], axis=-1,
        )
        dq += g

    grads = neural.backward(params, spec, cache, dq)
    report = {
        "loss": float(td_loss.mean() + margin_weight * m_loss.mean()),
        "loss_td": float(td_loss.mean()),
        "loss_margin": float(m_loss.mean()),
    }
    return report, grads


# ---------------------------------------------------------------------------
# Agent


class DQfDAgent:
    def __init__(self, config: AgentConfig, params: dict | None = None):
        self.config = config
        self.spec = config.network_spec
        self.rng = np.random.default_rng(config.seed)
        self.params = params if params is not None else neural.init_params(self.spec, self.rng)
        self.target_params = neural.copy_params(self.params)
        self.optimizer = AdamState.for_params(self.params, lr=config.learning_rate)
        self.demo_memory = ReplayMemory(config.input_length, config.k_max, capacity=None)
        self.memory = ReplayMemory(config.input_length, config.k_max, capacity=config.memory_capacity)
        self.timestep = 0
        self.updates = 0
        self.last_report: dict | None = None

    # -- acting -------------------------------------------------------------

    @property
    def epsilon(self) -> float:
        return self.config.exploration.value(self.timestep)

    def q_values(self, state) -> np.ndarray:
        return neural.q_values(self.params, self.spec, state)

    def act(self, state, explore: bool = True) -> tuple:
        q = self.q_values(state)[0]
        action = np.argmax(q, axis=-1)
        if explore:
            eps = self.epsilon
            flip = self.rng.random(self.config.k_max) < eps
            random = self.rng.integers(0, self.config.num_options, size=self.config.k_max)
            action = np.where(flip, random, action)
        return tuple(int(a) for a in action)

    # -- learning -----------------------------------------------------------

    def observe(self, transition: Transition) -> dict | None:
        self.memory.add(replace(transition, is_demo=False))
        self.timestep += 1
        cfg = self.config
        if self.timestep >= cfg.warmup and self.timestep % cfg.update_interval == 0:
            return self.training_update()
        return None

    def sample_batch(self, demo_fraction: float | None = None) -> dict | None:
        cfg = self.config
        rho = cfg.demo_fraction if demo_fraction is None else demo_fraction
        n_demo_mem, n_online = len(self.demo_memory), len(self.memory)
        if n_demo_mem + n_online < cfg.batch_size:
            return None
        n_demo = math.ceil(rho * cfg.batch_size) if n_demo_mem else 0
        if n_online == 0:
            n_demo = cfg.batch_size
        n_demo = min(n_demo, cfg.batch_size)
        demo = online = None
        if n_demo:
            demo = self.demo_memory.batch(self.rng.integers(0, n_demo_mem, size=n_demo))
        if cfg.batch_size - n_demo:
            if n_online == 0:
                return None
            online = self.memory.batch(self.rng.integers(0, n_online, size=cfg.batch_size - n_demo))
        return _concat(demo, online)

    def training_update(self, demo_fraction: float | None = None) -> dict | None:
        batch = self.sample_batch(demo_fraction)
        if batch is None:
            logger.info("training update skipped: fewer than %d stored transitions",
                        self.config.batch_size)
            return None
        return self.update_on_batch(batch)

    def update_on_batch(self, batch: dict) -> dict:
        cfg = self.config
        mode = "double" if cfg.double_q else "dqn"
        report, grads = dqfd_loss(
            self.params, self.target_params, self.spec, batch,
            cfg.gamma, cfg.margin, cfg.margin_weight, mode,
        )
        self.params, self.optimizer = neural.adam_step(self.params, grads, self.optimizer)
        self.updates += 1
        if self.updates % cfg.target_sync_interval == 0:
            self.sync_target()
        self.last_report = report
        return report

    def sync_target(self) -> None:
        self.target_params = neural.copy_params(self.params)

    # -- demonstrations -----------------------------------------------------

    def import_demonstrations(self, transitions: Iterable[Transition]) -> int:
        n = 0
        for tr in transitions:
            self.demo_memory.add(replace(tr, is_demo=True))
            n += 1
        return n

    def demo_accuracy(self, chunk: int = 4096) -> float:
        """Fraction of demonstrations where every head's argmax is the demonstrated action."""
        n = len(self.demo_memory)
        if n == 0:
            raise ValueError("demo memory is empty")
        hits = 0
        for lo in range(0, n, chunk):
            idx = np.arange(lo, min(n, lo + chunk))
            q = self.q_values(self.demo_memory.states[idx])
            pred = np.argmax(q, axis=-1)
            hits += int(np.all(pred == self.demo_memory.actions[idx], axis=1).sum())
        return hits / n

    def pretrain(self, steps: int, eval_every: int = 100, target_accuracy: float | None = None) -> list:
        """Demo-only updates; returns ``[(update, accuracy), ...]`` sampled every ``eval_every``.

        Stops at the first evaluation whose accuracy reaches ``target_accuracy``.
        """
        if len(self.demo_memory) == 0:
            raise ValueError("cannot pretrain: demo memory is empty")
        history = []
        for step in range(1, steps + 1):
            self.update_on_batch(self.demo_memory.batch(
                self.rng.integers(0, len(self.demo_memory), size=self.config.batch_size)
            ))
            if step % eval_every == 0 or step == steps:
                acc = self.demo_accuracy()
                history.append((step, acc))
                logger.debug("pretrain step %d accuracy %.3f", step, acc)
                if target_accuracy is not None and acc >= target_accuracy:
                    break
        return history

    # -- persistence --------------------------------------------------------

    def save(self, path, vocab_tokens, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["agent_config"] = self.config.to_dict()
        neural.save_model(path, self.params, self.spec, vocab_tokens, meta)

    @classmethod
    def load(cls, path, config: AgentConfig | None = None):
        """Rebuild an agent from a model file; ``config`` overrides the stored one
        (it must describe the same network)."""
        params, spec, vocab_tokens, meta = neural.load_model(
            path, config.network_spec if config is not None else None
        )
        if config is None:
            config = AgentConfig.from_dict(meta["agent_config"])
        return cls(config, params), vocab_tokens, meta
