"""Soft actor-critic with an explicit state-value network.

Critics are twin Q nets plus a value net ``V`` and its Polyak-averaged copy;
Q targets bootstrap from the copy, ``V`` regresses onto the soft value
``min(Q1, Q2)(s, a~) - delta * log pi(a~|s)``. Actions are tanh-squashed
Gaussians scaled to ``[-umax, umax]``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .approx import Adam, Mlp, load_arrays, save_arrays
from .env import FlockingEnv

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class SacConfig:
    gamma: float = 0.99
    delta: float = 0.2
    tau: float = 0.005
    batch_size: int = 128
    total_steps: int = 30_000
    warmup_steps: int = 1000
    updates_per_step: int = 1
    buffer_capacity: int = 100_000
    hidden: tuple = (64, 64)
    lr: float = 3e-4
    reward_scale: float = 1.0

    def validate(self):
        if not 0 < self.gamma < 1:
            raise ValueError("sac.gamma must be in (0, 1)")
        if self.delta < 0:
            raise ValueError("sac.delta must be >= 0")
        if not 0 < self.tau <= 1:
            raise ValueError("sac.tau must be in (0, 1]")
        if self.batch_size < 1 or self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("sac budgets must be non-negative (batch_size >= 1)")
        return self


def _log1m_tanh2(z):
    # log(1 - tanh(z)^2), stable for large |z|
    return 2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))


class Policy:
    """Squashed-Gaussian policy over accelerations.

    ``net`` maps the normalised state to ``[mean, log_std]`` of the
    pre-squash Gaussian; actions are ``action_scale * tanh(z)``.
    """

    def __init__(self, net: Mlp, action_scale, obs_center, obs_scale):
        self.net = net
        self.action_scale = float(action_scale)
        self.obs_center = np.asarray(obs_center, dtype=np.float64)
        self.obs_scale = np.asarray(obs_scale, dtype=np.float64)
        self.action_dim = net.n_out // 2

    @classmethod
    def create(cls, state_dim, action_dim, action_scale, obs_center=None, obs_scale=None,
               hidden=(64, 64), rng=None):
        net = Mlp([state_dim, *hidden, 2 * action_dim], "relu", rng=rng)
        center = np.zeros(state_dim) if obs_center is None else obs_center
        scale = np.ones(state_dim) if obs_scale is None else obs_scale
        return cls(net, action_scale, center, scale)

    def normalize(self, s):
        return (np.asarray(s, dtype=np.float64) - self.obs_center) / self.obs_scale

    def _head(self, out):
        d = self.action_dim
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("policy network produced non-finite output")
        raw = out[..., d:]
        return out[..., :d], np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)

    def log_prob_of_z(self, z, mean, log_std):
        """Log-density of ``u = scale * tanh(z)`` when ``z ~ N(mean, exp(log_std)^2)``."""
        eps = (z - mean) / np.exp(log_std)
        per = -0.5 * eps * eps - log_std - HALF_LOG_2PI - _log1m_tanh2(z) - math.log(self.action_scale)
        return per.sum(axis=-1)

    def act(self, s, rng=None, mode="STOCHASTIC"):
        """Batched actions and their log-probabilities."""
        mean, log_std, _ = self._head(self.net.forward(self.normalize(s)))
        if mode == "MEAN":
            z = mean
        elif mode == "STOCHASTIC":
            z = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return self.action_scale * np.tanh(z), self.log_prob_of_z(z, mean, log_std)

    def mean_action(self, s):
        return self.act(s, mode="MEAN")[0]

    def copy(self):
        return Policy(self.net.copy(), self.action_scale, self.obs_center.copy(), self.obs_scale.copy())

    def save(self, path):
        arrays = self.net.to_arrays()
        arrays.update(action_scale=np.asarray(self.action_scale), obs_center=self.obs_center,
                      obs_scale=self.obs_scale)
        save_arrays(path, "policy", arrays)

    @classmethod
    def load(cls, path):
        a = load_arrays(path, "policy")
        return cls(Mlp.from_arrays(a), float(a["action_scale"]), a["obs_center"], a["obs_scale"])


def select_action(policy: Policy, s, mode="STOCHASTIC", rng=None):
    """Single-state convenience wrapper around :meth:`Policy.act`."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite state")
    u, logp = policy.act(s[None, :], rng, mode)
    return u[0], float(logp[0])


class ReplayBuffer:
    def __init__(self, capacity, state_dim, action_dim):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def push(self, s, a, r, s2, done):
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def __len__(self):
        return self.size


@dataclass
class SacAgent:
    policy: Policy
    q1: Mlp
    q2: Mlp
    v: Mlp
    v_target: Mlp
    cfg: SacConfig
    opts: dict = field(default_factory=dict)

    @classmethod
    def create(cls, state_dim, action_dim, action_scale, cfg: SacConfig, rng,
               obs_center=None, obs_scale=None):
        policy = Policy.create(state_dim, action_dim, action_scale, obs_center, obs_scale, cfg.hidden, rng)
        q_sizes = [state_dim + action_dim, *cfg.hidden, 1]
        q1 = Mlp(q_sizes, "relu", rng=rng)
        q2 = Mlp(q_sizes, "relu", rng=rng)
        v = Mlp([state_dim, *cfg.hidden, 1], "relu", rng=rng)
        agent = cls(policy, q1, q2, v, v.copy(), cfg)
        agent.opts = {name: Adam(net.params.size, lr=cfg.lr)
                      for name, net in (("policy", policy.net), ("q1", q1), ("q2", q2), ("v", v))}
        return agent

    def soft_update(self, tau=None):
        tau = self.cfg.tau if tau is None else tau
        self.v_target.params *= 1.0 - tau
        self.v_target.params += tau * self.v.params


def _check(name, loss):
    if not np.isfinite(loss):
        raise FloatingPointError(f"{name} loss diverged (value {loss})")


def q_target(r, v_next, gamma):
    return r + gamma * v_next


def update(agent: SacAgent, batch, rng):
    """One gradient step on Q1, Q2, V and the policy, then the target update.

    ``batch`` is ``(s, a, r, s2, done)`` as returned by :meth:`ReplayBuffer.sample`.
    ``done`` does not cut bootstrapping: episodes end on a time limit only.
    """
    cfg = agent.cfg
    pol = agent.policy
    s, a, r, s2, _ = batch
    n = s.shape[0]
    o = pol.normalize(s)
    o2 = pol.normalize(s2)
    scale = pol.action_scale

    y = q_target(cfg.reward_scale * r, agent.v_target.forward(o2)[:, 0], cfg.gamma)
    qa_in = np.hstack([o, a / scale])
    grads, losses = {}, {}
    for name in ("q1", "q2"):
        net = getattr(agent, name)
        q, cache = net.forward_cache(qa_in)
        err = q[:, 0] - y
        losses[name] = float(np.mean(err * err))
        grads[name] = net.backward(cache, (2.0 / n) * err[:, None])[0]

    out, pcache = pol.net.forward_cache(o)
    mean, log_std, unclamped = pol._head(out)
    std = np.exp(log_std)
    eps = rng.standard_normal(mean.shape)
    z = mean + std * eps
    tz = np.tanh(z)
    logp = pol.log_prob_of_z(z, mean, log_std)

    pa_in = np.hstack([o, tz])
    q1v, c1 = agent.q1.forward_cache(pa_in)
    q2v, c2 = agent.q2.forward_cache(pa_in)
    use1 = q1v[:, 0] <= q2v[:, 0]
    qmin = np.where(use1, q1v[:, 0], q2v[:, 0])

    v_pred, vcache = agent.v.forward_cache(o)
    v_err = v_pred[:, 0] - (qmin - cfg.delta * logp)
    losses["v"] = float(np.mean(v_err * v_err))
    grads["v"] = agent.v.backward(vcache, (2.0 / n) * v_err[:, None])[0]

    losses["policy"] = float(np.mean(cfg.delta * logp - qmin))
    g1 = agent.q1.backward(c1, -(use1 / n)[:, None])[1]
    g2 = agent.q2.backward(c2, -(~use1 / n)[:, None])[1]
    d = mean.shape[1]
    # q nets see tanh(z) (= a / scale), so d(input)/dz = 1 - tanh^2
    g_z = (g1[:, -d:] + g2[:, -d:]) * (1.0 - tz * tz) + (cfg.delta / n) * 2.0 * tz
    g_mean = g_z
    g_log_std = (g_z * std * eps - cfg.delta / n) * unclamped
    grads["policy"] = pol.net.backward(pcache, np.hstack([g_mean, g_log_std]))[0]

    for name, loss in losses.items():
        _check(name, loss)
    for name, net in (("q1", agent.q1), ("q2", agent.q2), ("v", agent.v), ("policy", pol.net)):
        agent.opts[name].step(net.params, grads[name])
    agent.soft_update()
    losses["entropy"] = float(-np.mean(logp))
    return losses


def train(env, cfg: SacConfig, rng, agent: SacAgent | None = None, on_episode=None):
    """Run SAC for ``cfg.total_steps`` environment steps.

    ``env`` follows the small gym-like protocol of :class:`FlockingEnv`
    (``reset(rng)``, ``step(action, rng)``, ``state_dim``, ``action_dim``,
    ``action_scale``). Returns ``(agent, episode_returns)``.
    """
    cfg.validate()
    if agent is None:
        agent = SacAgent.create(env.state_dim, env.action_dim, env.action_scale, cfg, rng,
                                getattr(env, "obs_center", None), getattr(env, "obs_scale", None))
    buffer = ReplayBuffer(min(cfg.buffer_capacity, max(cfg.total_steps, 1)), env.state_dim, env.action_dim)
    curve = []
    if cfg.total_steps == 0:
        return agent, curve
    s = env.reset(rng)
    ep_ret = 0.0
    start_learning = max(cfg.warmup_steps, cfg.batch_size)
    for step in range(cfg.total_steps):
        if step < cfg.warmup_steps:
            u = rng.uniform(-env.action_scale, env.action_scale, size=env.action_dim)
        else:
            u = agent.policy.act(s[None, :], rng)[0][0]
        s2, r, done, _ = env.step(u, rng)
        buffer.push(s, u, r, s2, done)
        ep_ret += r
        s = s2
        if done:
            curve.append(ep_ret)
            if on_episode is not None:
                on_episode(len(curve), ep_ret)
            ep_ret = 0.0
            s = env.reset(rng)
        if step + 1 >= start_learning:
            for _ in range(cfg.updates_per_step):
                update(agent, buffer.sample(cfg.batch_size, rng), rng)
    return agent, curve


def best_response(env_cfg, pop_sample, init_sampler, cfg: SacConfig, rng):
    """Train a policy against the frozen population ``pop_sample``; episodes
    start from ``init_sampler``. Returns ``(policy, episode_returns)``."""
    env = FlockingEnv(env_cfg, pop_sample, init_sampler)
    agent, curve = train(env, cfg, rng)
    return agent.policy, curve


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return"])
        for i, ret in enumerate(curve):
            w.writerow([i, repr(float(ret))])
