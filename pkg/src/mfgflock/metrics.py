"""Performance matrix and approximate exploitability.

``M[i, j]`` (1-based, stored 0-based) is the discounted return of policy
``pi_j`` when starting from, and rewarded against, the mean distribution of
iteration ``i - 1``. Missing entries are ``nan``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, PopulationSample, reward_batch, sample_states, step_batch


def simulate_returns(policy, init_sampler, pop: PopulationSample, cfg: EnvConfig, n, gamma, rng,
                     mode="STOCHASTIC", horizon=None):
    """Discounted returns of ``n`` independent episodes, simulated as one batch.

    Returns ``(returns, hit_fraction)``. ``policy`` is a :class:`~mfgflock.sac.Policy`
    or any callable mapping a ``(n, 2d)`` state batch to actions.
    """
    T = cfg.horizon if horizon is None else horizon
    x, v = sample_states(init_sampler, n, cfg, rng)
    ret = np.zeros(n)
    hits = 0
    disc = 1.0
    for _ in range(T):
        s = np.hstack([x, v])
        u = policy.act(s, rng, mode)[0] if hasattr(policy, "act") else policy(s)
        noise = cfg.sigma_noise * rng.standard_normal(x.shape) if cfg.sigma_noise > 0 else np.zeros_like(x)
        x2, v2, hit, penalty = step_batch(x, v, u, noise, cfg)
        ret += disc * reward_batch(x, v, u, pop, cfg, penalty)
        hits += int(hit.sum())
        disc *= gamma
        x, v = x2, v2
    return ret, hits / (n * T)


def evaluate_entry(policy, init_sampler, pop: PopulationSample, cfg: EnvConfig, n_eval, gamma, rng,
                   mode="STOCHASTIC"):
    """Monte-Carlo estimate of one performance-matrix entry."""
    ret, _ = simulate_returns(policy, init_sampler, pop, cfg, n_eval, gamma, rng, mode)
    return float(ret.mean())


def evaluate_entry_stats(policy, init_sampler, pop, cfg, n_eval, gamma, rng, mode="STOCHASTIC"):
    """``(mean, standard error)`` of the entry estimate."""
    ret, _ = simulate_returns(policy, init_sampler, pop, cfg, n_eval, gamma, rng, mode)
    return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(len(ret))) if len(ret) > 1 else 0.0


@dataclass
class PerformanceMatrix:
    M: np.ndarray
    n_eval: int = 100
    gamma: float = 0.99
    horizon: int = 200

    @classmethod
    def empty(cls, J, **kw):
        return cls(np.full((J, J), np.nan), **kw)

    @property
    def J(self):
        return self.M.shape[0]

    def grow(self, J):
        if J > self.J:
            M = np.full((J, J), np.nan)
            M[:self.J, :self.J] = self.M
            self.M = M
        return self

    def set(self, i, j, value):
        """Set ``M[i, j]`` with 1-based indices."""
        self.grow(max(i, j))
        self.M[i - 1, j - 1] = value

    def get(self, i, j):
        return self.M[i - 1, j - 1]

    def to_csv(self, path):
        """Long format: ``j,i,M_ij`` (``j`` indexes the policy, ``i`` the distribution)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "i", "M_ij"])
            for i in range(1, self.J + 1):
                for j in range(1, self.J + 1):
                    val = self.get(i, j)
                    if np.isfinite(val):
                        w.writerow([j, i, repr(float(val))])

    @classmethod
    def from_csv(cls, path, J=None, **kw):
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((int(rec["i"]), int(rec["j"]), float(rec["M_ij"])))
        size = max([J or 0] + [max(i, j) for i, j, _ in rows])
        pm = cls.empty(size, **kw)
        for i, j, val in rows:
            pm.set(i, j, val)
        return pm

    def to_grid_csv(self, path):
        """Dense ``J x J`` matrix, one row per distribution index ``i``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i"] + [f"pi_{j}" for j in range(1, self.J + 1)])
            for i in range(1, self.J + 1):
                w.writerow([i] + [repr(float(self.get(i, j))) for j in range(1, self.J + 1)])


def exploitability(M, j):
    """``e_j = M[j, j] - mean(M[j, 1..j-1])`` (1-based)."""
    M = np.asarray(M.M if isinstance(M, PerformanceMatrix) else M, dtype=np.float64)
    if j < 2:
        raise ValueError("exploitability is defined from j = 2 on")
    row = M[j - 1]
    return float(row[j - 1] - row[:j - 1].mean())


def trailing_average(series, window=10):
    """Mean of the last ``min(window, available)`` points at each position."""
    series = np.asarray(series, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    idx = np.arange(1, len(series) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


@dataclass
class ExploitabilitySeries:
    js: np.ndarray
    raw: np.ndarray
    smoothed: np.ndarray
    window: int = 10
    br_window: int = 5

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "e_raw", "e_smoothed"])
            for j, r, s in zip(self.js, self.raw, self.smoothed):
                w.writerow([int(j), repr(float(r)), repr(float(s))])


def smooth(M, window=10, br_window=5, best_of="row"):
    """Smoothed exploitability for every ``j >= 2`` with a complete row.

    The best-response value ``M[j, j]`` is replaced by the best of the last
    ``min(br_window, j)`` policies before differencing: with ``best_of="row"``
    that is ``max_k M[j, k]`` over those policies (all scored against the same
    distribution); ``best_of="diagonal"`` uses ``max_k M[k, k]`` instead. The
    resulting series is then passed through :func:`trailing_average`.
    """
    M = np.asarray(M.M if isinstance(M, PerformanceMatrix) else M, dtype=np.float64)
    if best_of not in ("row", "diagonal"):
        raise ValueError(f"unknown best_of {best_of!r}")
    js, raw, br = [], [], []
    for j in range(2, M.shape[0] + 1):
        row = M[j - 1, :j]
        if not np.all(np.isfinite(row)):
            continue
        lo = max(1, j - br_window + 1)
        if best_of == "row":
            best = row[lo - 1:j].max()
        else:
            best = max(M[k - 1, k - 1] for k in range(lo, j + 1))
        baseline = row[:j - 1].mean()
        js.append(j)
        raw.append(row[j - 1] - baseline)
        br.append(best - baseline)
    br = np.asarray(br)
    return ExploitabilitySeries(np.asarray(js, dtype=int), np.asarray(raw), trailing_average(br, window) if len(br) else br,
                                window, br_window)


def mean_pairwise_cosine(v):
    """Average cosine similarity over all ordered pairs ``i != j`` of velocity rows.

    Zero vectors count as orthogonal to everything.
    """
    v = np.asarray(v, dtype=np.float64)
    n = len(v)
    if n < 2:
        raise ValueError("need at least two velocities")
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    unit = np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)
    total = unit.sum(axis=0)
    return float((total @ total - np.sum(unit * unit)) / (n * (n - 1)))


def nearest_corner(v_mean, vmax=1.0):
    """Closest vertex of the velocity cube and its sup-norm distance."""
    v_mean = np.asarray(v_mean, dtype=np.float64)
    corner = np.where(v_mean >= 0, vmax, -vmax)
    return corner, float(np.max(np.abs(v_mean - corner)))


def fraction_near_lines(x2, lines=(-50.0, 50.0), tol=10.0, bounds=None):
    """Share of coordinates within ``tol`` of any of ``lines`` (torus distance if ``bounds``)."""
    x2 = np.asarray(x2, dtype=np.float64)
    dist = np.abs(x2[:, None] - np.asarray(lines)[None, :])
    if bounds is not None:
        period = bounds[1] - bounds[0]
        dist = np.minimum(dist, period - dist)
    return float(np.mean(dist.min(axis=1) <= tol))
