import csv
import json

import numpy as np
import pytest

from neuralmap.agents import (AgentConfig, EmptyCarry, LSTMCarry, MQNParams, Percept, StateError,
                              embed_observation, make_agent, mqn_lookup)
from neuralmap.autodiff import Value, ops, precision
from neuralmap.autodiff.gradcheck import check_gradients
from neuralmap.maze import OBS_SHAPE, build_test_set, generate_maze
from neuralmap.trainer import (METRIC_FIELDS, REPORT_KEYS, EnvConfig, TrainConfig, VecEnv, a2c_losses,
                               bucket_report, collect_rollout, compute_returns, config_from_dict,
                               config_to_dict, run_episodes, train_loop)

from oracles import discounted_returns
from stubs import bandit_probability

TINY_MAP = dict(channels=8, height=7, width=7, hidden=16, conv_channels=2)


def tiny(kind="neural-map", **kw):
    return AgentConfig(kind=kind, map=dict(TINY_MAP, **kw), embed_dim=8, hidden=16, lstm_units=8, mqn_slots=4)


def percept(n, rng):
    obs = (rng.random((n,) + OBS_SHAPE) < 0.2).astype(np.float32)
    return Percept(obs, rng.integers(0, 7, (n, 2)), rng.integers(-1, 2, (n, 2)))


# -------------------------------------------------------------- returns

def test_returns_hand_cases():
    g, adv = compute_returns([[0.0], [0.0], [1.0]], [[0], [0], [1]], [[0.0], [0.0], [0.0]], [5.0], 0.9)
    np.testing.assert_allclose(g[:, 0], [0.81, 0.9, 1.0])
    r = np.random.default_rng(0).standard_normal((4, 3))
    g, _ = compute_returns(r, np.zeros((4, 3)), np.zeros((4, 3)), np.ones(3), 0.0)
    np.testing.assert_array_equal(g, r)
    g, _ = compute_returns(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(3), 0.99)
    assert not g.any()


def test_returns_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        T, B = rng.integers(1, 12), rng.integers(1, 5)
        r = rng.standard_normal((T, B))
        d = rng.random((T, B)) < 0.2
        boot = rng.standard_normal(B)
        gamma = rng.random()
        g, adv = compute_returns(r, d, np.zeros((T, B)), boot, gamma)
        np.testing.assert_allclose(g, discounted_returns(r, d, boot, gamma), atol=1e-6)


# ------------------------------------------------------------------ loss

def test_loss_entropy_only_and_uniform_entropy():
    n, T = 3, 2
    logits = Value(np.zeros((n, 3)))
    outs = []
    for _ in range(T):
        from neuralmap.agents import PolicyOutput
        outs.append(PolicyOutput(logits, Value(np.ones(n)), ops.log_softmax(logits)))
    loss, parts = a2c_losses(outs, np.zeros((T, n), dtype=int), np.ones((T, n)), np.zeros((T, n)), 0.5, 0.01)
    assert parts["policy_loss"] == 0.0 and parts["value_loss"] == 0.0
    assert parts["entropy"] == pytest.approx(np.log(3), rel=1e-6)
    assert parts["loss"] == pytest.approx(-0.01 * np.log(3), rel=1e-6)


def test_bandit_converges():
    p, hit = bandit_probability(0)
    assert hit is not None and hit <= 2000 and p >= 0.95


# ---------------------------------------------------------------- agents

def test_embedding_shapes_and_gradient():
    rng = np.random.default_rng(2)
    from neuralmap.agents import Embedding
    with precision(np.float64):
        emb = Embedding(rng, 32, 16)
        z = embed_observation(np.zeros(OBS_SHAPE), emb).data
        assert z.shape == (32,)
        np.testing.assert_array_equal(z, embed_observation(np.zeros(OBS_SHAPE), emb).data)
        x = Value(rng.standard_normal(OBS_SHAPE))
        r = Value(rng.standard_normal(32))
        err = max(e for e, _ in check_gradients(lambda: ops.sum(ops.mul(embed_observation(x, emb), r)), [x]))
        assert err <= 1e-4
    with pytest.raises(ValueError):
        embed_observation(np.zeros((5, 15, 4)), emb)


def test_mqn_lookup_cases():
    rng = np.random.default_rng(3)
    params = MQNParams(8, rng)
    e = Value(rng.standard_normal(8))
    _, w = mqn_lookup([e], Value(rng.standard_normal(8)), params)
    assert w.tolist() == [1.0]
    _, w = mqn_lookup([e, Value(e.data.copy())], Value(rng.standard_normal(8)), params)
    np.testing.assert_allclose(w, [0.5, 0.5])
    buf = [Value(rng.standard_normal(8)) for _ in range(32)]
    _, w = mqn_lookup(buf, Value(rng.standard_normal(8)), params)
    assert abs(w.astype(np.float64).sum() - 1) <= 1e-6
    with pytest.raises(StateError):
        mqn_lookup([], e, params)


def test_random_agent_uniform_even_when_greedy():
    agent = make_agent(AgentConfig(kind="random"), np.random.default_rng(0))
    rng = np.random.default_rng(4)
    p = Percept(np.zeros((30_000,) + OBS_SHAPE, dtype=np.float32), np.zeros((30_000, 2)), np.zeros((30_000, 2)))
    acts, _, _ = agent.act(EmptyCarry(30_000), p, rng, greedy=True)
    frac = np.bincount(acts, minlength=3) / 30_000
    assert np.all(np.abs(frac - 1 / 3) < 0.02)


@pytest.mark.parametrize("kind", ["neural-map", "lstm", "mqn"])
def test_agent_interface_and_determinism(kind):
    cfg = tiny(kind)
    agent = make_agent(cfg, np.random.default_rng(5))
    p = percept(3, np.random.default_rng(6))
    a1, o1, _ = agent.act(agent.initial_carry(3), p, np.random.default_rng(7))
    a2, o2, _ = agent.act(agent.initial_carry(3), p, np.random.default_rng(7))
    np.testing.assert_array_equal(a1, a2)
    assert o1.logits.shape == (3, 3) and o1.value.shape == (3,)
    np.testing.assert_allclose(o1.probs().sum(axis=1), 1, atol=1e-6)


def test_carry_mismatch_raises():
    agent = make_agent(tiny(), np.random.default_rng(8))
    with pytest.raises(StateError):
        agent.act(LSTMCarry(Value(np.zeros((1, 8))), Value(np.zeros((1, 8)))), percept(1, np.random.default_rng(0)),
                  np.random.default_rng(0))


def test_mqn_buffer_capped():
    agent = make_agent(tiny("mqn"), np.random.default_rng(9))
    carry = agent.initial_carry(2)
    rng = np.random.default_rng(10)
    for _ in range(10):
        _, _, carry = agent.act(carry, percept(2, rng), rng)
        assert len(carry.embeddings) <= 4


def test_lstm_carry_stays_finite():
    agent = make_agent(tiny("lstm"), np.random.default_rng(11))
    carry = agent.initial_carry(2)
    rng = np.random.default_rng(12)
    for _ in range(500):
        _, _, carry = agent.act(carry, percept(2, rng), rng)
        carry = agent.detach_carry(carry)
    assert np.all(np.isfinite(carry.h.data)) and np.all(np.isfinite(carry.c.data))


def test_written_columns_bounded_by_distinct_positions():
    agent = make_agent(tiny(), np.random.default_rng(13))
    rng = np.random.default_rng(14)
    carry = agent.initial_carry(1)
    seen = set()
    for _ in range(12):
        p = percept(1, rng)
        seen.add(tuple(p.positions[0]))
        _, _, carry = agent.act(carry, p, rng)
    cols = np.any(carry.map.memory.data[0] != 0, axis=0).sum()
    assert cols <= len(seen)


# -------------------------------------------------------------- rollout

def test_rollout_size_and_reset():
    cfg = TrainConfig(n_envs=2, rollout_length=3, agent=tiny(), env=EnvConfig(sizes=(5,)))
    agent = make_agent(cfg.agent, np.random.default_rng(0))
    vec = VecEnv(2, 0, cfg.env)
    buf, carry, _ = collect_rollout(vec, agent, agent.initial_carry(2), 3, np.random.default_rng(1))
    assert len(buf) == 6
    done = np.array([True, False])
    carry = agent.reset_carry(carry, done)
    assert not carry.map.memory.data[0].any()


def test_rollout_deterministic():
    def once():
        cfg = TrainConfig(n_envs=2, agent=tiny(), env=EnvConfig(sizes=(5, 7)))
        agent = make_agent(cfg.agent, np.random.default_rng(0))
        vec = VecEnv(2, 3, cfg.env)
        buf, _, _ = collect_rollout(vec, agent, agent.initial_carry(2), 8, np.random.default_rng(1))
        return buf
    a, b = once(), once()
    for k in ("observations", "actions", "rewards", "dones", "values", "log_probs"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_gradient_sees_first_observation():
    cfg = TrainConfig(n_envs=1, agent=tiny(), env=EnvConfig(sizes=(5,)))
    agent = make_agent(cfg.agent, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    ps = [percept(1, rng) for _ in range(4)]

    def grads(first_obs):
        for q in agent.parameters():
            q.zero_grad()
        carry = agent.initial_carry(1)
        seq = [Percept(first_obs, ps[0].positions, ps[0].velocities)] + ps[1:]
        for p in seq:
            out, carry = agent.policy(carry, p)
        from neuralmap.autodiff import backward
        backward(ops.sum(out.logits))
        return np.concatenate([q.grad.reshape(-1) for q in agent.parameters()])

    g0 = grads(ps[0].obs)
    bumped = ps[0].obs.copy()
    bumped[0, 0, 3, 1] = 1 - bumped[0, 0, 3, 1]
    assert not np.array_equal(g0, grads(bumped))


# ------------------------------------------------------------ evaluation

def test_oracle_scores_everything_and_buckets_partition():
    mazes = build_test_set(30, np.random.default_rng(2))
    agent = make_agent(AgentConfig(kind="oracle"), np.random.default_rng(0))
    recs = run_episodes(agent, mazes, np.random.default_rng(3), cap=500)
    rep = bucket_report(recs, "test")
    assert rep["test_total"]["success_rate"] == 1.0
    assert rep["test_small"]["count"] + rep["test_large"]["count"] == rep["test_total"]["count"] == 30


def test_cap_one_scores_zero():
    mazes = [generate_maze(7, np.random.default_rng(i)) for i in range(10)]
    agent = make_agent(AgentConfig(kind="oracle"), np.random.default_rng(0))
    recs = run_episodes(agent, mazes, np.random.default_rng(3), cap=1)
    assert all(r["outcome"] == "timeout" for r in recs)


# ------------------------------------------------------------ train loop

def test_config_roundtrip_and_unknown_keys():
    cfg = TrainConfig(agent=tiny(), env=EnvConfig(sizes=(5, 7)))
    again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg))))
    assert again == cfg
    with pytest.raises(ValueError):
        config_from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        config_from_dict({"agent": {"colour": "red"}})


def test_train_loop_small(tmp_path):
    test = build_test_set(4, np.random.default_rng(0), sizes=(7,))
    cfg = TrainConfig(n_envs=2, rollout_length=5, total_steps=60, eval_interval=30, eval_cap=20,
                      eval_train_mazes=4, agent=tiny(), env=EnvConfig(sizes=(5,)))
    report = train_loop(cfg, tmp_path, test)
    assert set(report) == set(REPORT_KEYS)
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == METRIC_FIELDS
    steps = [int(r["env_steps"]) for r in rows]
    assert steps == sorted(set(steps)) and steps[-1] >= 60
    assert (tmp_path / "ckpt_0.nmck").exists() and (tmp_path / f"ckpt_{steps[-1]}.nmck").exists()


def test_train_loop_zero_steps(tmp_path):
    test = build_test_set(2, np.random.default_rng(0), sizes=(7,))
    cfg = TrainConfig(total_steps=0, eval_cap=5, eval_train_mazes=2, agent=tiny(), env=EnvConfig(sizes=(5,)))
    train_loop(cfg, tmp_path, test)
    assert sorted(p.name for p in tmp_path.glob("*.nmck")) == ["ckpt_0.nmck"]
