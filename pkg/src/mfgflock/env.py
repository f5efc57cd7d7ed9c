"""Flocking environment: torus box, clipped double-integrator dynamics,
box obstacles with reflective contact, and the reward variants.

Everything is vectorised over agents. States are ``(x, v)`` pairs of arrays
with shape ``(n, d)``; the single-agent helpers at the bottom of the module
are thin wrappers used by the gym-style :class:`FlockingEnv`.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

REWARD_VARIANTS = ("SIMPLE", "TWO_LINES", "OBSTACLES")
SPEED_NORMS = ("L2SQ", "LINF")
MAX_REFLECTIONS = 8


@dataclass
class Obstacle:
    lo: Sequence[float]
    hi: Sequence[float]
    penalty: float = 10.0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.penalty = float(self.penalty)

    def contains(self, x):
        """Strict interior test; ``x`` has shape ``(..., d)``."""
        return np.all((x > self.lo) & (x < self.hi), axis=-1)


@dataclass
class RewardSpec:
    variant: str = "SIMPLE"
    beta: float = 0.0
    w_flock: float = 1.0
    w_ctrl: float = 1.0
    w_speed: float = 1.0
    w_attract: float = 1.0
    speed_norm: str = "L2SQ"
    line_offset: float = 50.0


@dataclass
class EnvConfig:
    d: int = 2
    dt: float = 0.1
    sigma_noise: float = 0.0
    bounds: tuple = (-100.0, 100.0)
    vmax: float = 1.0
    umax: float = 1.0
    horizon: int = 200
    obstacles: list = field(default_factory=list)
    reward: RewardSpec = field(default_factory=RewardSpec)

    def __post_init__(self):
        self.bounds = (float(self.bounds[0]), float(self.bounds[1]))
        self.obstacles = [o if isinstance(o, Obstacle) else Obstacle(**o) for o in self.obstacles]
        if isinstance(self.reward, dict):
            self.reward = RewardSpec(**self.reward)

    @property
    def period(self):
        return self.bounds[1] - self.bounds[0]

    def validate(self):
        """Raise ``ValueError`` naming the first offending field."""
        lo, hi = self.bounds
        if not self.d >= 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not lo < hi:
            raise ValueError(f"bounds: xmin {lo} must be < xmax {hi}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be non-negative")
        if not (self.vmax > 0 and self.umax > 0):
            raise ValueError("vmax and umax must be positive")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        r = self.reward
        if r.variant not in REWARD_VARIANTS:
            raise ValueError(f"reward.variant must be one of {REWARD_VARIANTS}, got {r.variant!r}")
        if r.speed_norm not in SPEED_NORMS:
            raise ValueError(f"reward.speed_norm must be one of {SPEED_NORMS}, got {r.speed_norm!r}")
        if r.beta < 0:
            raise ValueError("reward.beta must be >= 0")
        for name in ("w_flock", "w_ctrl", "w_speed", "w_attract"):
            if getattr(r, name) < 0:
                raise ValueError(f"reward.{name} must be >= 0")
        if r.variant != "SIMPLE" and self.d < 2:
            raise ValueError(f"reward variant {r.variant} needs d >= 2")
        for i, ob in enumerate(self.obstacles):
            if ob.lo.shape != (self.d,) or ob.hi.shape != (self.d,):
                raise ValueError(f"obstacle {i}: corners must have {self.d} components")
            if not np.all(ob.lo < ob.hi):
                raise ValueError(f"obstacle {i}: lo must be < hi componentwise")
            if np.any(ob.lo < lo) or np.any(ob.hi > hi):
                raise ValueError(f"obstacle {i}: must lie within bounds {self.bounds}")
            if ob.penalty < 0:
                raise ValueError(f"obstacle {i}: penalty must be >= 0")
        return self


@dataclass
class AgentState:
    x: np.ndarray
    v: np.ndarray

    def as_vector(self):
        return np.concatenate([self.x, self.v])


@dataclass
class PopulationSample:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=np.float64))
        if self.x.shape != self.v.shape or self.x.shape[0] < 1:
            raise ValueError(f"population needs matching non-empty x/v, got {self.x.shape} and {self.v.shape}")

    @property
    def n(self):
        return self.x.shape[0]

    @classmethod
    def from_states(cls, states):
        d = states.shape[1] // 2
        return cls(states[:, :d], states[:, d:])

    def to_csv(self, path):
        write_state_csv(path, self.x, self.v)

    @classmethod
    def from_csv(cls, path):
        x, v = read_state_csv(path)
        return cls(x, v)


def wrap_position(x, bounds):
    lo, hi = bounds
    x = np.asarray(x, dtype=np.float64)
    # points already in the box are returned untouched (the modulo would round them)
    return np.where((x >= lo) & (x < hi), x, lo + np.mod(x - lo, hi - lo))


def torus_displacement(a, b, bounds):
    """Shortest per-coordinate displacement ``a - b`` on the torus."""
    period = bounds[1] - bounds[0]
    delta = a - b
    return delta - period * np.round(delta / period)


# -- obstacles ---------------------------------------------------------------

def _first_entry(p0, p1, boxes):
    """Earliest entry of segment p0->p1 into the open interior of one of ``boxes``.

    Returns ``(t, axis, box_index)`` or ``None``. Ties in ``t`` go to the lowest axis.
    """
    seg = p1 - p0
    best = None
    for k, (lo, hi) in enumerate(boxes):
        t_near, t_far, axis = -np.inf, np.inf, -1
        for a in range(len(p0)):
            if seg[a] == 0.0:
                if not lo[a] < p0[a] < hi[a]:
                    break
                continue
            t1 = (lo[a] - p0[a]) / seg[a]
            t2 = (hi[a] - p0[a]) / seg[a]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > t_near:
                t_near, axis = t1, a
            t_far = min(t_far, t2)
        else:
            if axis < 0 or not (t_near < t_far and 0.0 <= t_near < 1.0 and t_far > 0.0):
                continue
            if best is None or t_near < best[0] or (t_near == best[0] and axis < best[1]):
                best = (t_near, axis, k)
    return best


def _candidate_boxes(p1, obstacles, bounds):
    """Obstacle boxes plus copies shifted by one period where the segment leaves the box."""
    lo_b, hi_b = bounds
    period = hi_b - lo_b
    shifts = []
    for a in range(len(p1)):
        opts = [0.0]
        if p1[a] >= hi_b:
            opts.append(period)
        elif p1[a] < lo_b:
            opts.append(-period)
        shifts.append(opts)
    boxes, owners = [], []
    for shift in itertools.product(*shifts):
        shift = np.asarray(shift)
        for i, ob in enumerate(obstacles):
            boxes.append((ob.lo + shift, ob.hi + shift))
            owners.append(i)
    return boxes, owners


def resolve_obstacle(x_old, x_new, v, obstacles, bounds=None):
    """Reflect the move ``x_old -> x_new`` off box obstacles like a billiard ball.

    ``x_new`` is the unwrapped end point. Returns ``(x, v, hit, penalty)`` where
    ``penalty`` is the largest penalty among obstacles touched. After more than
    ``MAX_REFLECTIONS`` bounces the agent is parked at the last contact point
    with its velocity reversed.
    """
    p0 = np.array(x_old, dtype=np.float64)
    p1 = np.array(x_new, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    if not obstacles:
        return p1, v, False, 0.0
    if bounds is None:
        boxes, owners = [(o.lo, o.hi) for o in obstacles], list(range(len(obstacles)))
    else:
        boxes, owners = _candidate_boxes(p1, obstacles, bounds)
    hit, penalty = False, 0.0
    for n_refl in range(MAX_REFLECTIONS + 1):
        entry = _first_entry(p0, p1, boxes)
        if entry is None:
            return p1, v, hit, penalty
        t, axis, k = entry
        hit = True
        penalty = max(penalty, obstacles[owners[k]].penalty)
        contact = p0 + t * (p1 - p0)
        if n_refl == MAX_REFLECTIONS:
            return contact, -v, True, penalty
        lo, hi = boxes[k]
        plane = lo[axis] if p1[axis] > p0[axis] else hi[axis]
        contact[axis] = plane
        p1 = p1.copy()
        p1[axis] = 2.0 * plane - p1[axis]
        v[axis] = -v[axis]
        p0 = contact
    return p1, v, hit, penalty


_CHUNK = 1024
_BOX_CACHE = {}


def _periodic_boxes(obstacles, bounds, margin):
    """Corner arrays of the obstacles plus every periodic copy that comes
    within ``margin`` of the box, with the matching penalties."""
    lo = np.array([o.lo for o in obstacles])
    hi = np.array([o.hi for o in obstacles])
    pen = np.array([o.penalty for o in obstacles])
    margin = float(np.ceil(margin))
    key = (lo.tobytes(), hi.tobytes(), pen.tobytes(), tuple(bounds), margin)
    if key in _BOX_CACHE:
        return _BOX_CACHE[key]
    lo_b, hi_b = bounds
    period = hi_b - lo_b
    parts = [(lo, hi, pen)]
    for shift in itertools.product((-period, 0.0, period), repeat=lo.shape[1]):
        if not any(shift):
            continue
        slo, shi = lo + shift, hi + shift
        keep = np.all((shi > lo_b - margin) & (slo < hi_b + margin), axis=1)
        if keep.any():
            parts.append((slo[keep], shi[keep], pen[keep]))
    boxes = tuple(np.concatenate(p) for p in zip(*parts))
    if len(_BOX_CACHE) > 64:
        _BOX_CACHE.clear()
    _BOX_CACHE[key] = boxes
    return boxes


def resolve_obstacles_batch(x_old, x_new, v, lo, hi, pen):
    """Vectorised :func:`resolve_obstacle` for ``n`` agents against boxes ``lo``, ``hi`` of shape ``(m, d)``.

    The boxes are used as given; periodic copies must already be included.
    """
    p0 = np.array(x_old, dtype=np.float64)
    p1 = np.array(x_new, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    n, d = p0.shape
    hit = np.zeros(n, dtype=bool)
    penalty = np.zeros(n)
    near = np.all((np.maximum(p0, p1)[:, None, :] > lo) & (np.minimum(p0, p1)[:, None, :] < hi), axis=2)
    active = np.flatnonzero(near.any(axis=1))
    for n_refl in range(MAX_REFLECTIONS + 1):
        if active.size == 0:
            break
        start = p0[active][:, None, :]
        seg = p1[active][:, None, :] - start
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - start) / seg
            t2 = (hi - start) / seg
        still = seg == 0.0
        inside = (lo < start) & (start < hi)
        t_min = np.where(still, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        t_max = np.where(still, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = t_min.max(axis=2)
        axis = t_min.argmax(axis=2)
        t_far = t_max.min(axis=2)
        ok = (t_near < t_far) & (t_near >= 0.0) & (t_near < 1.0) & (t_far > 0.0)
        t_key = np.where(ok, t_near, np.inf)
        best = t_key.min(axis=1)
        sel = np.isfinite(best)
        if not sel.any():
            break
        # earliest contact; ties go to the lowest axis, then the first box
        k = np.where(t_key == best[:, None], axis, d).argmin(axis=1)
        idx, k, t = active[sel], k[sel], best[sel]
        ax = axis[sel, k]
        hit[idx] = True
        penalty[idx] = np.maximum(penalty[idx], pen[k])
        contact = p0[idx] + t[:, None] * (p1[idx] - p0[idx])
        if n_refl == MAX_REFLECTIONS:
            p1[idx] = contact
            v[idx] = -v[idx]
            break
        rows = np.arange(idx.size)
        plane = np.where(p1[idx, ax] > p0[idx, ax], lo[k, ax], hi[k, ax])
        contact[rows, ax] = plane
        p1[idx, ax] = 2.0 * plane - p1[idx, ax]
        v[idx, ax] = -v[idx, ax]
        p0[idx] = contact
        active = idx
    return p1, v, hit, penalty


def inside_any(x, obstacles):
    if not obstacles:
        return np.zeros(x.shape[:-1], dtype=bool)
    return np.any([ob.contains(x) for ob in obstacles], axis=0)


# -- dynamics ----------------------------------------------------------------

def step_batch(x, v, u, noise, cfg: EnvConfig):
    """Advance agents one step. Returns ``(x', v', hit, penalty)``.

    ``u`` is clipped to the action box here; ``noise`` is added to the velocity.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = np.clip(np.asarray(u, dtype=np.float64), -cfg.umax, cfg.umax)
    noise = np.asarray(noise, dtype=np.float64)
    if not (x.shape == v.shape == u.shape == noise.shape) or x.shape[-1] != cfg.d:
        raise ValueError(
            f"dimension mismatch: x{x.shape} v{v.shape} u{u.shape} noise{noise.shape}, d={cfg.d}")
    x_new = x + v * cfg.dt
    v_new = np.clip(v + u * cfg.dt + noise, -cfg.vmax, cfg.vmax)
    n = x.shape[0]
    hit = np.zeros(n, dtype=bool)
    penalty = np.zeros(n)
    if cfg.obstacles and n:
        margin = float(np.max(np.abs(x_new - x))) + 1.0
        lo, hi, pen = _periodic_boxes(cfg.obstacles, cfg.bounds, margin)
        for start in range(0, n, _CHUNK):
            sl = slice(start, start + _CHUNK)
            x_new[sl], v_new[sl], hit[sl], penalty[sl] = resolve_obstacles_batch(
                x[sl], x_new[sl], v_new[sl], lo, hi, pen)
    return wrap_position(x_new, cfg.bounds), v_new, hit, penalty


def step(s: AgentState, u, noise, cfg: EnvConfig):
    """Single-agent step. Returns ``(AgentState, hit)``."""
    x, v, hit, _ = step_batch(np.atleast_2d(s.x), np.atleast_2d(s.v),
                              np.atleast_2d(u), np.atleast_2d(noise), cfg)
    return AgentState(x[0], v[0]), bool(hit[0])


# -- rewards -----------------------------------------------------------------

def flocking_term_batch(x, v, pop: PopulationSample, beta, bounds, chunk=2048):
    """``-|| mean_j (v - v_j) / (1 + |x - x_j|^2)^beta ||^2`` for each agent."""
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    n_pop = pop.n
    if beta == 0:
        s = v - pop.v.mean(axis=0)
        return -np.sum(s * s, axis=1)
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        xs, vs = x[start:start + chunk], v[start:start + chunk]
        disp = torus_displacement(xs[:, None, :], pop.x[None, :, :], bounds)
        w = np.exp(-beta * np.log1p(np.sum(disp * disp, axis=2)))
        s = np.einsum("ij,ijk->ik", w, vs[:, None, :] - pop.v[None, :, :]) / n_pop
        out[start:start + chunk] = -np.sum(s * s, axis=1)
    return out


def flocking_term(s: AgentState, pop: PopulationSample, beta, bounds=(-100.0, 100.0)):
    return float(flocking_term_batch(s.x[None], s.v[None], pop, beta, bounds)[0])


def _speed(v, norm):
    if norm == "LINF":
        return np.max(np.abs(v), axis=1)
    return np.sum(v * v, axis=1)


def reward_batch(x, v, u, pop: PopulationSample, cfg: EnvConfig, penalty=None):
    """Per-agent reward at the pre-step state.

    ``penalty`` is the obstacle penalty incurred by the transition (``c`` when
    an obstacle was hit, else 0); only the OBSTACLES variant uses it.
    """
    spec = cfg.reward
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    u = np.clip(np.atleast_2d(u), -cfg.umax, cfg.umax)
    if spec.variant != "SIMPLE" and x.shape[1] < 2:
        raise ValueError(f"reward variant {spec.variant} needs d >= 2")
    r = -spec.w_ctrl * np.sum(u * u, axis=1) + spec.w_speed * _speed(v, spec.speed_norm)
    if spec.w_flock:
        r += spec.w_flock * flocking_term_batch(x, v, pop, spec.beta, cfg.bounds)
    if spec.variant == "TWO_LINES":
        x2 = x[:, 1]
        r -= spec.w_attract * np.minimum(np.abs(x2 - spec.line_offset), np.abs(x2 + spec.line_offset))
    elif spec.variant == "OBSTACLES":
        r -= spec.w_attract * np.abs(x[:, 1])
        if penalty is not None:
            r -= penalty
    return r


def reward(s: AgentState, u, pop: PopulationSample, cfg: EnvConfig, hit=False, penalty=None):
    if penalty is None:
        penalty = max((o.penalty for o in cfg.obstacles), default=0.0) if hit else 0.0
    return float(reward_batch(s.x[None], s.v[None], np.atleast_2d(u), pop, cfg, np.array([penalty]))[0])


# -- initial states ----------------------------------------------------------

def to_states(samples, cfg: EnvConfig):
    """Map raw ``(n, 2d)`` samples into the state space: wrap x, clip v."""
    samples = np.atleast_2d(samples)
    d = cfg.d
    x = wrap_position(samples[:, :d], cfg.bounds)
    v = np.clip(samples[:, d:2 * d], -cfg.vmax, cfg.vmax)
    return x, v


def sample_states(sampler, n, cfg: EnvConfig, rng, max_rounds=100):
    """Draw ``n`` valid states from ``sampler``, redrawing any that land inside an obstacle."""
    x, v = to_states(sampler.sample(n, rng), cfg)
    for _ in range(max_rounds):
        bad = np.flatnonzero(inside_any(x, cfg.obstacles))
        if bad.size == 0:
            return x, v
        x[bad], v[bad] = to_states(sampler.sample(bad.size, rng), cfg)
    raise RuntimeError("could not draw initial states outside obstacles")


def discounted_return(rewards, gamma):
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


# -- gym-style single agent --------------------------------------------------

class FlockingEnv:
    """One representative agent facing a frozen population sample.

    Episodes last ``cfg.horizon`` steps and start from ``init_sampler``.
    Observations are the concatenated state ``(x, v)``.
    """

    def __init__(self, cfg: EnvConfig, pop: PopulationSample, init_sampler):
        self.cfg = cfg
        self.pop = pop
        self.init_sampler = init_sampler
        self.state_dim = 2 * cfg.d
        self.action_dim = cfg.d
        self.action_scale = cfg.umax
        half = 0.5 * cfg.period
        self.obs_center = np.concatenate([np.full(cfg.d, 0.5 * (cfg.bounds[0] + cfg.bounds[1])), np.zeros(cfg.d)])
        self.obs_scale = np.concatenate([np.full(cfg.d, half), np.full(cfg.d, cfg.vmax)])
        self.horizon = cfg.horizon
        self.t = 0
        self.x = self.v = None

    def reset(self, rng):
        x, v = sample_states(self.init_sampler, 1, self.cfg, rng)
        self.x, self.v = x, v
        self.t = 0
        return np.concatenate([x[0], v[0]])

    def step(self, action, rng):
        cfg = self.cfg
        u = np.atleast_2d(action)
        noise = cfg.sigma_noise * rng.standard_normal((1, cfg.d)) if cfg.sigma_noise > 0 else np.zeros((1, cfg.d))
        x, v, hit, penalty = step_batch(self.x, self.v, u, noise, cfg)
        r = reward_batch(self.x, self.v, u, self.pop, cfg, penalty)[0]
        self.x, self.v = x, v
        self.t += 1
        done = self.t >= self.horizon
        return np.concatenate([x[0], v[0]]), float(r), done, {"hit": bool(hit[0])}


def rollout(policy: Callable, pop: PopulationSample, init_sampler, cfg: EnvConfig, rng):
    """One episode of ``cfg.horizon`` transitions ``(s, u, r, s')`` under ``policy(state) -> u``."""
    env = FlockingEnv(cfg, pop, init_sampler)
    s = env.reset(rng)
    out = []
    done = False
    while not done:
        u = np.clip(np.asarray(policy(s), dtype=np.float64), -cfg.umax, cfg.umax)
        s_next, r, done, _ = env.step(u, rng)
        out.append((s, u, r, s_next))
        s = s_next
    return out


# -- csv ---------------------------------------------------------------------

def write_state_csv(path, x, v):
    d = x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)])
        for row in np.hstack([x, v]):
            w.writerow([repr(float(c)) for c in row])


def read_state_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = data.shape[1] // 2
    return data[:, :d], data[:, d:]


def write_trajectory_csv(path, xs, vs, episode=0):
    """Write frames ``xs[t]``, ``vs[t]`` (each ``(n_agents, d)``) as
    ``episode,t,agent_id,x1..xd,v1..vd`` rows."""
    d = xs[0].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t", "agent_id"] + [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)])
        for t, (x, v) in enumerate(zip(xs, vs)):
            for a in range(x.shape[0]):
                w.writerow([episode, t, a] + [repr(float(c)) for c in x[a]] + [repr(float(c)) for c in v[a]])
