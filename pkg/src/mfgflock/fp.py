"""Fictitious play for the flocking mean-field game.

Each iteration ``j`` computes a SAC best response against the current mean
distribution, estimates the discounted occupancy distribution it induces with
a normalizing flow, and refits the mean distribution on a uniform mixture of
the per-iteration flows.

Run directory layout::

    run/
      config.yaml            scenario, all defaults materialised
      state.json             completed iterations and root seed
      metrics.csv            performance matrix entries, j,i,M_ij
      exploitability.csv     j,e_raw,e_smoothed
      iter_<j>/
        policy.npz flow.npz mean_flow.npz pop_sample.csv metrics.csv
        learning_curve.csv info.json
"""
from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import flows as nf
from .env import EnvConfig, PopulationSample, sample_states, step_batch
from .metrics import PerformanceMatrix, evaluate_entry, smooth
from .sac import Policy, SacConfig, best_response, write_curve_csv

log = logging.getLogger(__name__)


def stream(seed, *names):
    """Independent generator for a named purpose, e.g. ``stream(seed, 3, "sac")``."""
    key = tuple(n if isinstance(n, int) else zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass
class InitialDistribution:
    """Analytic initial distribution over ``(x, v)``.

    Positions are uniform on ``bounds`` or Gaussian around ``pos_center``
    (``pos_std`` may be a scalar or one value per coordinate); velocities
    are ``N(vel_bias, vel_std^2)`` per coordinate.
    """

    d: int = 2
    bounds: tuple = (-100.0, 100.0)
    position: str = "uniform"
    pos_center: list = None
    pos_std: object = 10.0
    vel_bias: list = None
    vel_std: float = 0.5

    def __post_init__(self):
        if self.position not in ("uniform", "gaussian"):
            raise ValueError(f"mu0.position must be 'uniform' or 'gaussian', got {self.position!r}")
        self.bounds = (float(self.bounds[0]), float(self.bounds[1]))
        self.pos_center = [0.0] * self.d if self.pos_center is None else [float(c) for c in np.broadcast_to(self.pos_center, (self.d,))]
        self.pos_std = [float(c) for c in np.broadcast_to(self.pos_std, (self.d,))]
        self.vel_bias = [0.0] * self.d if self.vel_bias is None else [float(c) for c in np.broadcast_to(self.vel_bias, (self.d,))]

    def sample(self, n, rng):
        lo, hi = self.bounds
        if self.position == "uniform":
            x = rng.uniform(lo, hi, size=(n, self.d))
        else:
            x = np.asarray(self.pos_center) + np.asarray(self.pos_std) * rng.standard_normal((n, self.d))
        v = np.asarray(self.vel_bias) + self.vel_std * rng.standard_normal((n, self.d))
        return np.hstack([x, v])


@dataclass
class FpConfig:
    J: int = 20
    pop_size: int = 300
    n_station_samples: int = 20_000
    station_horizon: int = 200
    gamma: float = 0.99
    n_eval: int = 100
    mixture: str = "latest"
    mean_samples: int = 20_000
    seed: int = 0
    mu0: InitialDistribution = field(default_factory=InitialDistribution)
    env: EnvConfig = field(default_factory=EnvConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    flow: nf.FlowConfig = field(default_factory=nf.FlowConfig)

    def validate(self):
        if self.J < 1:
            raise ValueError("fp.J must be >= 1")
        if self.mixture not in ("latest", "previous"):
            raise ValueError("fp.mixture must be 'latest' or 'previous'")
        D = 2 * self.env.d
        if self.n_station_samples < 2 * D or self.mean_samples < 2 * D:
            raise ValueError(f"fp.n_station_samples and fp.mean_samples must be >= {2 * D}")
        if self.pop_size < 1 or self.n_eval < 1 or self.station_horizon < 1:
            raise ValueError("fp.pop_size, fp.n_eval and fp.station_horizon must be >= 1")
        if self.mu0.d != self.env.d:
            raise ValueError("mu0 dimension does not match env.d")
        self.env.validate()
        self.sac.validate()
        return self


@dataclass
class FpState:
    j: int = 0
    seed: int = 0
    policies: list = field(default_factory=list)
    flows: list = field(default_factory=list)
    mean_flows: list = field(default_factory=list)
    pop_samples: list = field(default_factory=list)
    matrix: PerformanceMatrix = None

    @property
    def mean_flow(self):
        return self.mean_flows[-1] if self.mean_flows else None


def sample_time_indices(n, horizon, gamma, rng):
    """``t`` in ``0..horizon-1`` with ``P(t)`` proportional to ``gamma**t``."""
    w = gamma ** np.arange(horizon, dtype=np.float64)
    return rng.choice(horizon, size=n, p=w / w.sum())


def estimate_stationary_distribution(policy, env_cfg: EnvConfig, pop_sample, init_sampler, n, horizon,
                                     gamma, rng, mode="STOCHASTIC"):
    """Samples of the discounted occupancy measure of ``policy``.

    Each sample is an independent episode started from ``init_sampler`` and
    stopped at a geometric time index; ``pop_sample`` is kept for interface
    symmetry (the dynamics do not depend on the population).
    """
    del pop_sample
    ts = sample_time_indices(n, horizon, gamma, rng)
    x, v = sample_states(init_sampler, n, env_cfg, rng)
    out = np.empty((n, 2 * env_cfg.d))
    done = ts == 0
    out[done] = np.hstack([x[done], v[done]])
    alive = np.flatnonzero(~done)
    x, v, rem = x[alive], v[alive], ts[alive]
    while alive.size:
        s = np.hstack([x, v])
        u = policy.act(s, rng, mode)[0] if hasattr(policy, "act") else policy(s)
        noise = (env_cfg.sigma_noise * rng.standard_normal(x.shape) if env_cfg.sigma_noise > 0
                 else np.zeros_like(x))
        x, v, _, _ = step_batch(x, v, u, noise, env_cfg)
        rem = rem - 1
        fin = rem == 0
        out[alive[fin]] = np.hstack([x[fin], v[fin]])
        keep = ~fin
        alive, x, v, rem = alive[keep], x[keep], v[keep], rem[keep]
    return out


def update_mean_distribution(components, flow_cfg: nf.FlowConfig, n_samples, rng, fit_rng=None):
    """Refit a single flow on a uniform mixture of ``components``."""
    data = nf.mixture_sample(components, n_samples, rng)
    model, _ = nf.fit(data, flow_cfg, fit_rng if fit_rng is not None else rng)
    return model


class _EnvSampler:
    """Wraps a sampler so its draws are mapped into the state space (torus, clip)."""

    def __init__(self, base, env_cfg):
        self.base, self.env_cfg = base, env_cfg

    def sample(self, n, rng):
        x, v = sample_states(self.base, n, self.env_cfg, rng)
        return np.hstack([x, v])


def _iter_dir(out_dir, j):
    return os.path.join(out_dir, f"iter_{j}")


def _save_state(out_dir, state: FpState):
    with open(os.path.join(out_dir, "state.json"), "w") as fh:
        json.dump({"j": state.j, "seed": state.seed}, fh)


def load_state(out_dir, cfg: FpConfig) -> FpState:
    """Reload completed iterations from a run directory."""
    path = os.path.join(out_dir, "state.json")
    state = FpState(seed=cfg.seed, matrix=PerformanceMatrix.empty(0, n_eval=cfg.n_eval, gamma=cfg.gamma,
                                                                 horizon=cfg.env.horizon))
    if not os.path.exists(path):
        return state
    with open(path) as fh:
        meta = json.load(fh)
    for j in range(1, meta["j"] + 1):
        d = _iter_dir(out_dir, j)
        state.policies.append(Policy.load(os.path.join(d, "policy.npz")))
        state.flows.append(nf.FlowModel.load(os.path.join(d, "flow.npz")))
        state.mean_flows.append(nf.FlowModel.load(os.path.join(d, "mean_flow.npz")))
        state.pop_samples.append(PopulationSample.from_csv(os.path.join(d, "pop_sample.csv")))
        row = PerformanceMatrix.from_csv(os.path.join(d, "metrics.csv"))
        for k in range(1, j + 1):
            state.matrix.set(j, k, row.get(j, k))
    state.j = meta["j"]
    state.seed = meta["seed"]
    return state


def distribution_before(state: FpState, cfg: FpConfig, j):
    """Mean distribution used by iteration ``j`` (the initial one for ``j = 1``)."""
    return cfg.mu0 if j == 1 else state.mean_flows[j - 2]


def run(cfg: FpConfig, out_dir=None, resume=False, on_iteration=None) -> FpState:
    """Run fictitious play up to ``cfg.J`` iterations.

    With ``out_dir`` every completed iteration is checkpointed; ``resume``
    picks up from the last completed one. ``on_iteration(j, state, e_j)`` is
    called after each iteration (``e_j`` is ``None`` for ``j = 1``).
    """
    cfg.validate()
    env_cfg = cfg.env
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if resume and out_dir is not None:
        state = load_state(out_dir, cfg)
    else:
        state = FpState(seed=cfg.seed, matrix=PerformanceMatrix.empty(0, n_eval=cfg.n_eval, gamma=cfg.gamma,
                                                                       horizon=env_cfg.horizon))
    seed = cfg.seed
    for j in range(state.j + 1, cfg.J + 1):
        prev = distribution_before(state, cfg, j)
        init_sampler = _EnvSampler(prev, env_cfg)
        x, v = sample_states(prev, cfg.pop_size, env_cfg, stream(seed, j, "pop"))
        pop = PopulationSample(x, v)

        policy, curve = best_response(env_cfg, pop, init_sampler, cfg.sac, stream(seed, j, "sac"))
        data = estimate_stationary_distribution(policy, env_cfg, pop, init_sampler, cfg.n_station_samples,
                                                cfg.station_horizon, cfg.gamma, stream(seed, j, "station"))
        flow, fit_info = nf.fit(data, cfg.flow, stream(seed, j, "flow"))

        flows_now = state.flows + [flow]
        if cfg.mixture == "latest":
            components = flows_now
        else:
            components = [cfg.mu0] + state.flows
        components = [_EnvSampler(c, env_cfg) for c in components]
        mean_flow = update_mean_distribution(components, cfg.flow, cfg.mean_samples,
                                             stream(seed, j, "mixture"), stream(seed, j, "mean_fit"))

        state.policies.append(policy)
        state.flows.append(flow)
        state.mean_flows.append(mean_flow)
        state.pop_samples.append(pop)
        for k in range(1, j + 1):
            state.matrix.set(j, k, evaluate_entry(state.policies[k - 1], init_sampler, pop, env_cfg, cfg.n_eval,
                                                  cfg.gamma, stream(seed, j, k, "eval")))
        state.j = j
        e_j = state.matrix.get(j, j) - np.mean([state.matrix.get(j, k) for k in range(1, j)]) if j > 1 else None

        if out_dir is not None:
            _write_iteration(out_dir, j, state, curve, fit_info)
            write_run_metrics(out_dir, state.matrix)
            _save_state(out_dir, state)
        log.info("iteration %d done, e_j=%s", j, e_j)
        if on_iteration is not None:
            on_iteration(j, state, e_j)
    return state


def _write_iteration(out_dir, j, state: FpState, curve, fit_info):
    d = _iter_dir(out_dir, j)
    os.makedirs(d, exist_ok=True)
    state.policies[-1].save(os.path.join(d, "policy.npz"))
    state.flows[-1].save(os.path.join(d, "flow.npz"))
    state.mean_flows[-1].save(os.path.join(d, "mean_flow.npz"))
    state.pop_samples[-1].to_csv(os.path.join(d, "pop_sample.csv"))
    row = PerformanceMatrix.empty(j)
    for k in range(1, j + 1):
        row.set(j, k, state.matrix.get(j, k))
    row.to_csv(os.path.join(d, "metrics.csv"))
    write_curve_csv(os.path.join(d, "learning_curve.csv"), curve)
    with open(os.path.join(d, "info.json"), "w") as fh:
        json.dump({k: (float(v) if not isinstance(v, bool) else v) for k, v in fit_info.items()}, fh, indent=1)


def write_run_metrics(out_dir, matrix: PerformanceMatrix):
    matrix.to_csv(os.path.join(out_dir, "metrics.csv"))
    smooth(matrix).to_csv(os.path.join(out_dir, "exploitability.csv"))
