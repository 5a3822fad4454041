"""Synchronous advantage actor-critic over lock-stepped environments."""

from __future__ import annotations

import csv
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .agents import Agent, AgentConfig, Percept, make_agent
from .autodiff import NumericError, RMSProp, backward, no_grad, ops
from .autodiff.checkpoint import save_checkpoint
from .autodiff.core import Value
from .maze import (GoalSearchEnv, TRAIN_SIZES, render_observation, reset as env_reset, sample_training_maze,
                   step as env_step)

METRIC_FIELDS = ("env_steps", "mean_episode_return", "success_rate", "mean_episode_length",
                 "policy_loss", "value_loss", "entropy", "grad_norm", "wall_clock")
REPORT_KEYS = ("train_small", "train_large", "train_total", "test_small", "test_large", "test_total")


@dataclass
class EnvConfig:
    sizes: tuple = TRAIN_SIZES
    step_limit: int = 100
    step_penalty: float = 0.01
    loop_fraction: float = 0.1


@dataclass
class TrainConfig:
    n_envs: int = 16
    rollout_length: int = 20
    gamma: float = 0.99
    lr: float = 7e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    clip_norm: float = 40.0
    total_steps: int = 1_000_000
    eval_interval: int = 250_000
    eval_cap: int = 500
    eval_train_mazes: int = 200
    greedy_eval: bool = True
    seed: int = 0
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        if self.n_envs < 1 or self.rollout_length < 1:
            raise ValueError("n_envs and rollout_length must be at least 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class RolloutBuffer:
    observations: np.ndarray  # [T, B, 5, 15, 3]
    actions: np.ndarray       # [T, B]
    rewards: np.ndarray       # [T, B]
    dones: np.ndarray         # [T, B]
    values: np.ndarray        # [T, B]
    log_probs: np.ndarray     # [T, B]
    positions: np.ndarray     # [T, B, 2]
    velocities: np.ndarray    # [T, B, 2]
    outputs: list             # PolicyOutput per step, still attached to the graph
    bootstrap: np.ndarray     # [B]

    def __len__(self):
        return self.actions.size


class VecEnv:
    """N Goal-Search environments stepped in lockstep, auto-resetting on episode end."""

    def __init__(self, n: int, seed: int, env: EnvConfig, test_hashes=frozenset()):
        self.envs = [GoalSearchEnv(np.random.default_rng([seed, 100 + i]), test_hashes, env.sizes,
                                   env.step_limit, env.step_penalty, env.loop_fraction)
                     for i in range(n)]
        self.returns = np.zeros(n)
        self.obs = np.stack([e.reset() for e in self.envs])

    def __len__(self):
        return len(self.envs)

    def percept(self) -> Percept:
        states = [e.state for e in self.envs]
        return Percept(self.obs.copy(),
                       np.array([(s.pose.x, s.pose.y) for s in states], dtype=np.int64),
                       np.array([(s.last_velocity.u, s.last_velocity.v) for s in states], dtype=np.int64),
                       states)

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, list]:
        """Step every env; return (rewards, dones, finished-episode records)."""
        n = len(self.envs)
        rewards, dones, finished = np.zeros(n), np.zeros(n, dtype=bool), []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            try:
                res = env.step(int(a))
            except Exception as exc:
                raise RuntimeError(f"environment {i}: {exc}") from exc
            rewards[i], dones[i] = res.reward, res.done
            self.returns[i] += res.reward
            if res.done:
                finished.append({"return": self.returns[i], "length": env.state.step_count,
                                 "outcome": res.info["outcome"]})
                self.returns[i] = 0.0
                self.obs[i] = env.reset()
            else:
                self.obs[i] = res.observation
        return rewards, dones, finished

    @property
    def leaked(self) -> int:
        return sum(e.leaked for e in self.envs)


def collect_rollout(vec, agent: Agent, carry, length: int, rng: np.random.Generator):
    """Run all envs ``length`` steps; returns (buffer, carry, finished episodes)."""
    obs, acts, rews, dns, vals, logps, poss, vels, outs, finished = ([] for _ in range(10))
    for _ in range(length):
        percept = vec.percept()
        actions, out, carry = agent.act(carry, percept, rng)
        rewards, dones, done_eps = vec.step(actions)
        carry = agent.reset_carry(carry, dones)
        obs.append(percept.obs)
        acts.append(actions)
        rews.append(rewards)
        dns.append(dones)
        vals.append(out.value.data.copy())
        logps.append(out.log_probs.data[np.arange(len(actions)), actions])
        poss.append(percept.positions)
        vels.append(percept.velocities)
        outs.append(out)
        finished += done_eps
    with no_grad():
        boot, _ = agent.policy(carry, vec.percept())
    buffer = RolloutBuffer(np.stack(obs), np.stack(acts), np.stack(rews), np.stack(dns),
                           np.stack(vals), np.stack(logps), np.stack(poss), np.stack(vels),
                           outs, boot.value.data.astype(np.float64).copy())
    return buffer, carry, finished


def compute_returns(rewards, dones, values, bootstrap, gamma: float):
    """Bootstrapped n-step returns G_t = r_t + gamma * G_{t+1} * (1 - done_t) and advantages."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    returns = np.zeros_like(rewards)
    running = np.asarray(bootstrap, dtype=np.float64)
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * running * (1.0 - dones[t])
        returns[t] = running
    return returns, returns - np.asarray(values, dtype=np.float64)


def a2c_losses(outputs: list, actions: np.ndarray, returns: np.ndarray, advantages: np.ndarray,
               value_coef: float, entropy_coef: float) -> tuple[Value, dict]:
    """Build the actor-critic loss graph. Advantages enter as constants."""
    dtype = outputs[0].log_probs.data.dtype
    logp = ops.stack([ops.pick(o.log_probs, a) for o, a in zip(outputs, actions)])
    values = ops.stack([o.value for o in outputs])
    policy_loss = ops.scale(ops.mean(ops.mask(logp, advantages.astype(dtype))), -1.0)
    err = ops.sub(values, Value(returns.astype(dtype)))
    value_loss = ops.mean(ops.mul(err, err))
    ent_terms = [ops.scale(ops.sum(ops.mul(ops.exp(o.log_probs), o.log_probs), axis=-1), -1.0)
                 for o in outputs]
    entropy = ops.mean(ops.stack(ent_terms))
    loss = ops.add(ops.add(policy_loss, ops.scale(value_loss, value_coef)), ops.scale(entropy, -entropy_coef))
    parts = {"loss": float(loss.data), "policy_loss": float(policy_loss.data),
             "value_loss": float(value_loss.data), "entropy": float(entropy.data)}
    return loss, parts


def a2c_update(buffer: RolloutBuffer, optimizer: RMSProp, config: TrainConfig) -> dict:
    returns, advantages = compute_returns(buffer.rewards, buffer.dones, buffer.values,
                                          buffer.bootstrap, config.gamma)
    loss, parts = a2c_losses(buffer.outputs, buffer.actions, returns, advantages,
                             config.value_coef, config.entropy_coef)
    if not np.isfinite(parts["loss"]):
        raise NumericError(f"non-finite loss: {parts}")
    backward(loss)
    parts["grad_norm"] = optimizer.step() if optimizer.params else 0.0
    return parts


# ------------------------------------------------------------------ evaluation

def run_episodes(agent: Agent, mazes: list, rng: np.random.Generator, cap: int = 500,
                 greedy: bool = True, record: bool = False, colors: Optional[list] = None,
                 batch_size: int = 100) -> list[dict]:
    """Play one capped episode per maze; returns per-episode outcome records."""
    results = []
    for lo in range(0, len(mazes), batch_size):
        chunk = mazes[lo:lo + batch_size]
        states, obs = [], []
        for j, m in enumerate(chunk):
            st, ob = env_reset(m, rng, step_limit=cap)
            if colors is not None:
                st = replace(st, indicator_color=colors[lo + j])
                ob = render_observation(m, st.pose, st.indicator_color)
            states.append(st)
            obs.append(ob)
        obs = np.stack(obs)
        n = len(chunk)
        active = np.ones(n, dtype=bool)
        recs = [{"maze": m.id, "size": m.size, "color": s.indicator_color, "outcome": "none",
                 "length": 0, "return": 0.0, "steps": []} for m, s in zip(chunk, states)]
        carry = agent.initial_carry(n)
        with no_grad():
            while active.any():
                percept = Percept(obs.copy(),
                                  np.array([(s.pose.x, s.pose.y) for s in states], dtype=np.int64),
                                  np.array([(s.last_velocity.u, s.last_velocity.v) for s in states],
                                           dtype=np.int64), states)
                actions, out, carry = agent.act(carry, percept, rng, greedy=greedy)
                carry = agent.detach_carry(carry)
                for i in np.flatnonzero(active):
                    if record:
                        recs[i]["steps"].append({
                            "pose": (states[i].pose.x, states[i].pose.y, states[i].pose.heading),
                            "action": int(actions[i]), "obs": obs[i].copy(),
                            "attention": None if out.attention is None else out.attention[i].copy()})
                    states[i], res = env_step(states[i], int(actions[i]))
                    obs[i] = res.observation
                    recs[i]["return"] += res.reward
                    if res.done:
                        active[i] = False
                        recs[i]["outcome"] = res.info["outcome"]
                        recs[i]["length"] = states[i].step_count
        results += recs
    return results


def _bucket(records: list) -> dict:
    if not records:
        return {"count": 0, "success_rate": None, "mean_length": None}
    return {"count": len(records),
            "success_rate": float(np.mean([r["outcome"] == "correct-goal" for r in records])),
            "mean_length": float(np.mean([r["length"] for r in records]))}


def bucket_report(records: list, prefix: str) -> dict:
    return {f"{prefix}_small": _bucket([r for r in records if r["size"] <= 11]),
            f"{prefix}_large": _bucket([r for r in records if r["size"] >= 13]),
            f"{prefix}_total": _bucket(records)}


def evaluate(agent: Agent, test_mazes: list, seed: int = 0, cap: int = 500, greedy: bool = True,
             train_sizes=TRAIN_SIZES, n_train: int = 200, test_hashes=None) -> dict:
    """Success rates bucketed by maze size on a fresh training batch and the held-out set."""
    rng = np.random.default_rng([seed, 7])
    hashes = frozenset(m.id for m in test_mazes) if test_hashes is None else test_hashes
    train = [sample_training_maze(rng, hashes, train_sizes)[0] for _ in range(n_train)]
    report = bucket_report(run_episodes(agent, train, rng, cap, greedy), "train")
    report.update(bucket_report(run_episodes(agent, test_mazes, rng, cap, greedy), "test"))
    return report


# ---------------------------------------------------------------- train loop

class MetricsWriter:
    def __init__(self, path: Path):
        self.path = path
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(METRIC_FIELDS)
        self.last: Optional[dict] = None

    def write(self, row: dict) -> None:
        if self.last is not None and row["env_steps"] <= self.last["env_steps"]:
            raise ValueError("metrics rows must increase in env_steps")
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row[k]) for k in METRIC_FIELDS])
        self.last = row


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(round(v, 8))
    return v


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["env"]["sizes"] = list(config.env.sizes)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    agent = d.pop("agent", {})
    env = d.pop("env", {})
    bad = set(agent) - {f.name for f in fields(AgentConfig)}
    bad |= set(env) - {f.name for f in fields(EnvConfig)}
    if bad:
        raise ValueError(f"unknown config keys: {sorted(bad)}")
    env = dict(env)
    if "sizes" in env:
        env["sizes"] = tuple(env["sizes"])
    return TrainConfig(agent=AgentConfig(**agent), env=EnvConfig(**env), **d)


def save_agent(path, agent: Agent, config: TrainConfig, optimizer: Optional[RMSProp] = None,
               env_steps: int = 0) -> None:
    save_checkpoint(path, agent.parameters(), optimizer.state_arrays() if optimizer else None,
                    seed=config.seed, extra={"config": config_to_dict(config), "env_steps": env_steps})


def train_loop(config: TrainConfig, out_dir, test_mazes: list,
               log: Callable[[str], None] = lambda s: None) -> dict:
    """Alternate rollouts and updates until ``total_steps``; returns the final eval report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_hashes = frozenset(m.id for m in test_mazes)
    agent = make_agent(config.agent, np.random.default_rng([config.seed, 1]))
    params = agent.parameters()
    optimizer = RMSProp(params, lr=config.lr, decay=config.rms_decay, eps=config.rms_eps,
                        clip_norm=config.clip_norm)
    metrics = MetricsWriter(out / "metrics.csv")
    save_agent(out / "ckpt_0.nmck", agent, config, optimizer, 0)
    trainable = bool(params) and config.total_steps > 0
    steps, start = 0, time.perf_counter()
    episodes: deque = deque(maxlen=100)
    next_eval = config.eval_interval
    leaked = 0
    if trainable:
        vec = VecEnv(config.n_envs, config.seed, config.env, test_hashes)
        rng = np.random.default_rng([config.seed, 2])
        carry = agent.initial_carry(config.n_envs)
        evals = []
        while steps < config.total_steps:
            buffer, carry, finished = collect_rollout(vec, agent, carry, config.rollout_length, rng)
            steps += len(buffer)
            episodes.extend(finished)
            try:
                parts = a2c_update(buffer, optimizer, config)
            except NumericError as exc:
                raise NumericError(f"{exc}; last metrics: {metrics.last}") from exc
            carry = agent.detach_carry(carry)
            row = {"env_steps": steps,
                   "mean_episode_return": _mean(e["return"] for e in episodes),
                   "success_rate": _mean(e["outcome"] == "correct-goal" for e in episodes),
                   "mean_episode_length": _mean(e["length"] for e in episodes),
                   "policy_loss": parts["policy_loss"], "value_loss": parts["value_loss"],
                   "entropy": parts["entropy"], "grad_norm": parts["grad_norm"],
                   "wall_clock": round(time.perf_counter() - start, 3)}
            metrics.write(row)
            if config.eval_interval and steps >= next_eval and steps < config.total_steps:
                next_eval += config.eval_interval
                save_agent(out / f"ckpt_{steps}.nmck", agent, config, optimizer, steps)
                ev = bucket_report(run_episodes(agent, test_mazes, np.random.default_rng([config.seed, 9]),
                                                config.eval_cap, config.greedy_eval), "test")
                evals.append({"env_steps": steps, "test_total": ev["test_total"]["success_rate"]})
                (out / "evals.json").write_text(json.dumps(evals, indent=1))
                log(f"steps={steps} train_success={row['success_rate']:.3f} "
                    f"test_success={ev['test_total']['success_rate']:.3f}")
        leaked = vec.leaked
        if leaked:
            raise RuntimeError(f"{leaked} training mazes collided with the held-out set")
        save_agent(out / f"ckpt_{steps}.nmck", agent, config, optimizer, steps)
    report = evaluate(agent, test_mazes, config.seed, config.eval_cap, config.greedy_eval,
                      config.env.sizes, config.eval_train_mazes, test_hashes)
    report = {k: report[k] for k in REPORT_KEYS}
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def _mean(it) -> float:
    vals = [float(v) for v in it]
    return float(np.mean(vals)) if vals else float("nan")
