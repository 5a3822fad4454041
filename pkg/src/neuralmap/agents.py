"""Policy/value agents sharing one batched ``act`` interface."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Value, ops
from .autodiff.core import default_dtype
from .autodiff.nn import Linear, LSTMCell, Module
from .maze import FORWARD, N_ACTIONS, OBS_SHAPE, STEP_VECTORS, TURN_LEFT, TURN_RIGHT, bfs_solvable, correct_goal
from .memory import HEADINGS, MapState, NeuralMap, NeuralMapConfig, map_step

AGENT_KINDS = ("neural-map", "lstm", "mqn", "random", "oracle")


class StateError(RuntimeError):
    pass


@dataclass
class AgentConfig:
    kind: str = "neural-map"
    map: dict = field(default_factory=dict)
    embed_dim: int = 32
    hidden: int = 256
    pure_ot: bool = False
    hybrid_lstm: bool = False
    lstm_units: int = 128
    mqn_slots: int = 32

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}; expected one of {AGENT_KINDS}")

    def map_config(self) -> NeuralMapConfig:
        return NeuralMapConfig(**self.map)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Percept:
    """What agents see at one synchronous step, for a batch of environments."""
    obs: np.ndarray                  # [B, 5, 15, 3]
    positions: np.ndarray            # [B, 2] (x, y)
    velocities: np.ndarray           # [B, 2] (u, v)
    states: Optional[list] = None    # environment states, read only by the oracle


@dataclass
class PolicyOutput:
    logits: Value
    value: Value
    log_probs: Value
    attention: Optional[np.ndarray] = None

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


@dataclass
class NeuralMapCarry:
    map: MapState
    h: Optional[Value] = None
    c: Optional[Value] = None


@dataclass
class LSTMCarry:
    h: Value
    c: Value


@dataclass
class MQNCarry:
    embeddings: list
    keys: list
    values: list
    valid: np.ndarray  # bool [B, slots]


@dataclass
class EmptyCarry:
    n: int


def _zeros(*shape) -> Value:
    return Value(np.zeros(shape, dtype=default_dtype()))


def _keep(x: Value, keep: np.ndarray) -> Value:
    return ops.mask(x, keep.reshape((-1,) + (1,) * (x.ndim - 1)))


def sample_actions(probs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    if greedy:
        return probs.argmax(axis=-1)
    u = rng.random(probs.shape[0])
    cum = np.cumsum(probs, axis=-1)
    return np.minimum((cum < u[:, None] * cum[:, -1:]).sum(axis=-1), probs.shape[-1] - 1)


# ---------------------------------------------------------------- modules

class Embedding(Module):
    def __init__(self, rng: np.random.Generator, out_dim: int = 32, hidden: int = 256, prefix: str = "embed"):
        n_in = int(np.prod(OBS_SHAPE))
        self.fc = Linear(f"{prefix}.fc", n_in, hidden, rng)
        self.out = Linear(f"{prefix}.out", hidden, out_dim, rng)


def embed_observation(obs, params: Embedding) -> Value:
    """Flatten the 5x15x3 view and map it to the state embedding s_t."""
    obs = obs if isinstance(obs, Value) else Value(obs)
    if obs.shape[-3:] != OBS_SHAPE:
        raise ValueError(f"observation shape {obs.shape} is not {OBS_SHAPE}")
    flat = ops.reshape(obs, obs.shape[:-3] + (-1,))
    return params.out(ops.relu(params.fc(flat)))


class Heads(Module):
    def __init__(self, n_in: int, rng: np.random.Generator, hidden: int = 256, trunk: bool = True,
                 prefix: str = "policy"):
        self.trunk = Linear(f"{prefix}.trunk", n_in, hidden, rng) if trunk else None
        width = hidden if trunk else n_in
        self.logits = Linear(f"{prefix}.logits", width, N_ACTIONS, rng)
        self.value = Linear(f"{prefix}.value", width, 1, rng)

    def __call__(self, x: Value) -> PolicyOutput:
        if self.trunk is not None:
            x = ops.relu(self.trunk(x))
        logits = self.logits(x)
        value = self.value(x)
        value = ops.reshape(value, value.shape[:-1])
        return PolicyOutput(logits, value, ops.log_softmax(logits))


class MQNParams(Module):
    def __init__(self, dim: int, rng: np.random.Generator, prefix: str = "mqn"):
        self.key = Linear(f"{prefix}.key", dim, dim, rng)
        self.value = Linear(f"{prefix}.value", dim, dim, rng)
        self.query = Linear(f"{prefix}.query", dim, dim, rng)


def mqn_lookup(buffer: list, current: Value, params: MQNParams, valid: Optional[np.ndarray] = None,
               keys: Optional[list] = None, values: Optional[list] = None) -> tuple[Value, np.ndarray]:
    """Soft attention of the current embedding over buffered past embeddings.

    Returns ``(concat(read, current), weights)``. ``valid`` masks slots per batch row.
    """
    if not buffer:
        raise StateError("memory buffer is empty")
    keys = keys if keys is not None else [params.key(e) for e in buffer]
    values = values if values is not None else [params.value(e) for e in buffer]
    n = len(buffer)
    k = ops.stack(keys, axis=-1)
    v = ops.stack(values, axis=-1)
    k = ops.reshape(k, k.shape[:-1] + (1, n))
    v = ops.reshape(v, v.shape[:-1] + (1, n))
    scores = ops.channel_dot(k, params.query(current))
    if valid is not None:
        penalty = np.where(valid, 0.0, -1e9).reshape(scores.shape)
        scores = ops.shift(scores, penalty)
    weights = ops.softmax_positions(scores)
    read = ops.weighted_sum(v, weights)
    return ops.concat([read, current], axis=-1), weights.data.reshape(weights.shape[:-2] + (n,))


# ----------------------------------------------------------------- agents

class Agent(Module):
    kind = "base"
    carry_type: type = EmptyCarry
    uses_map = False

    def __init__(self, config: AgentConfig):
        self.config = config

    def initial_carry(self, n: int):
        raise NotImplementedError

    def reset_carry(self, carry, done: np.ndarray):
        """Return a carry whose rows flagged in ``done`` are back at their episode-start value."""
        return carry

    def detach_carry(self, carry):
        return carry

    def policy(self, carry, percept: Percept):
        raise NotImplementedError

    def act(self, carry, percept: Percept, rng: np.random.Generator, greedy: bool = False):
        """Return ``(actions, PolicyOutput, new_carry)``."""
        if not isinstance(carry, self.carry_type):
            raise StateError(f"{self.kind} agent got a {type(carry).__name__}")
        out, carry = self.policy(carry, percept)
        return sample_actions(out.probs(), rng, greedy), out, carry


class NeuralMapAgent(Agent):
    kind = "neural-map"
    carry_type = NeuralMapCarry
    uses_map = True

    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        super().__init__(config)
        self.map_config = config.map_config()
        if config.embed_dim != self.map_config.channels:
            raise ValueError("state embedding size must equal the map channel count")
        self.embed = Embedding(rng, config.embed_dim, config.hidden)
        self.memory = NeuralMap(self.map_config, rng)
        n_in = self.map_config.output_dim + (0 if config.pure_ot else config.embed_dim)
        self.lstm = None
        if config.hybrid_lstm:
            self.lstm = LSTMCell("hybrid.lstm", n_in, config.lstm_units, rng)
            n_in = config.lstm_units
        self.heads = Heads(n_in, rng, config.hidden)

    def initial_carry(self, n: int) -> NeuralMapCarry:
        carry = NeuralMapCarry(self.memory.initial_state(n))
        if self.lstm is not None:
            carry.h, carry.c = _zeros(n, self.config.lstm_units), _zeros(n, self.config.lstm_units)
        return carry

    def reset_carry(self, carry, done):
        keep = ~np.asarray(done, dtype=bool)
        if keep.all():
            return carry
        out = NeuralMapCarry(MapState(_keep(carry.map.memory, keep)))
        if self.lstm is not None:
            out.h, out.c = _keep(carry.h, keep), _keep(carry.c, keep)
        return out

    def detach_carry(self, carry):
        out = NeuralMapCarry(MapState(carry.map.memory.detach()))
        if self.lstm is not None:
            out.h, out.c = carry.h.detach(), carry.c.detach()
        return out

    def where(self, percept: Percept) -> np.ndarray:
        if self.map_config.addressing == "egocentric":
            return np.asarray(percept.velocities, dtype=np.int64)
        return self.where_positions(percept.positions)

    def where_positions(self, positions) -> np.ndarray:
        # map and maze share a 1:1 scale; clamp keeps positions in range
        pos = np.asarray(positions, dtype=np.int64).copy()
        pos[:, 0] = np.clip(pos[:, 0], 0, self.map_config.width - 1)
        pos[:, 1] = np.clip(pos[:, 1], 0, self.map_config.height - 1)
        return pos

    def policy(self, carry, percept):
        s = embed_observation(percept.obs, self.embed)
        step = map_step(carry.map, s, self.where(percept), self.map_config, self.memory)
        x = step.o if self.config.pure_ot else ops.concat([step.o, s], axis=-1)
        new = NeuralMapCarry(step.new_map)
        if self.lstm is not None:
            new.h, new.c = self.lstm(x, carry.h, carry.c)
            x = new.h
        out = self.heads(x)
        out.attention = step.attention
        return out, new


class LSTMAgent(Agent):
    kind = "lstm"
    carry_type = LSTMCarry

    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        super().__init__(config)
        self.embed = Embedding(rng, config.embed_dim, config.hidden)
        self.cell = LSTMCell("lstm", config.embed_dim, config.lstm_units, rng)
        self.heads = Heads(config.lstm_units, rng, trunk=False)

    def initial_carry(self, n):
        return LSTMCarry(_zeros(n, self.config.lstm_units), _zeros(n, self.config.lstm_units))

    def reset_carry(self, carry, done):
        keep = ~np.asarray(done, dtype=bool)
        if keep.all():
            return carry
        return LSTMCarry(_keep(carry.h, keep), _keep(carry.c, keep))

    def detach_carry(self, carry):
        return LSTMCarry(carry.h.detach(), carry.c.detach())

    def policy(self, carry, percept):
        s = embed_observation(percept.obs, self.embed)
        h, c = self.cell(s, carry.h, carry.c)
        return self.heads(h), LSTMCarry(h, c)


class MQNAgent(Agent):
    kind = "mqn"
    carry_type = MQNCarry

    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        super().__init__(config)
        self.embed = Embedding(rng, config.embed_dim, config.hidden)
        self.mqn = MQNParams(config.embed_dim, rng)
        self.heads = Heads(2 * config.embed_dim, rng, config.hidden)

    def initial_carry(self, n):
        return MQNCarry([], [], [], np.zeros((n, 0), dtype=bool))

    def reset_carry(self, carry, done):
        done = np.asarray(done, dtype=bool)
        if not done.any():
            return carry
        valid = carry.valid.copy()
        valid[done] = False
        return MQNCarry(carry.embeddings, carry.keys, carry.values, valid)

    def detach_carry(self, carry):
        return MQNCarry([e.detach() for e in carry.embeddings], [k.detach() for k in carry.keys],
                        [v.detach() for v in carry.values], carry.valid.copy())

    def policy(self, carry, percept):
        s = embed_observation(percept.obs, self.embed)
        slots = self.config.mqn_slots
        emb = (carry.embeddings + [s])[-slots:]
        keys = (carry.keys + [self.mqn.key(s)])[-slots:]
        vals = (carry.values + [self.mqn.value(s)])[-slots:]
        n = s.shape[0]
        valid = np.concatenate([carry.valid, np.ones((n, 1), dtype=bool)], axis=1)[:, -slots:]
        x, _ = mqn_lookup(emb, s, self.mqn, valid, keys, vals)
        return self.heads(x), MQNCarry(emb, keys, vals, valid)


class RandomAgent(Agent):
    """Uniform over actions in every mode, greedy evaluation included."""
    kind = "random"

    def initial_carry(self, n):
        return EmptyCarry(n)

    def policy(self, carry, percept):
        n = percept.obs.shape[0]
        logits = _zeros(n, N_ACTIONS)
        return PolicyOutput(logits, _zeros(n), ops.log_softmax(logits)), carry

    def act(self, carry, percept, rng, greedy=False):
        return super().act(carry, percept, rng, greedy=False)


class OracleAgent(Agent):
    """Walks a shortest path to the correct goal using full environment state."""
    kind = "oracle"

    def initial_carry(self, n):
        return EmptyCarry(n)

    def policy(self, carry, percept):
        if percept.states is None:
            raise StateError("oracle agent needs environment states")
        n = len(percept.states)
        logits = np.full((n, N_ACTIONS), -1e3, dtype=default_dtype())
        for i, st in enumerate(percept.states):
            logits[i, oracle_action(st)] = 0.0
        lv = Value(logits)
        return PolicyOutput(lv, _zeros(n), ops.log_softmax(lv)), carry


def oracle_action(state) -> int:
    maze, pose = state.maze, state.pose
    goal = correct_goal(state)
    wrong = maze.goal_teal if goal == maze.goal_red else maze.goal_red
    here = (pose.x, pose.y)
    _, dist = bfs_solvable(maze.grid, here, goal, blocked=[wrong])
    best = None
    for h in HEADINGS:
        dx, dy = STEP_VECTORS[h]
        nxt = (pose.x + dx, pose.y + dy)
        if maze.is_wall(*nxt) or nxt == wrong:
            continue
        ok, d = bfs_solvable(maze.grid, nxt, goal, blocked=[wrong])
        if ok and d == dist - 1:
            best = h
            break
    if best is None or best == pose.heading:
        return FORWARD
    turn = (HEADINGS.index(best) - HEADINGS.index(pose.heading)) % 4
    return TURN_LEFT if turn == 3 else TURN_RIGHT


def make_agent(config: AgentConfig, rng: np.random.Generator) -> Agent:
    kinds = {"neural-map": NeuralMapAgent, "lstm": LSTMAgent, "mqn": MQNAgent}
    if config.kind in kinds:
        return kinds[config.kind](config, rng)
    return RandomAgent(config) if config.kind == "random" else OracleAgent(config)
