"""Neural spline flows built from rational-quadratic coupling layers.

Direction conventions: ``forward`` maps base noise to data (used for
sampling), ``inverse`` maps data to base noise (used for densities). Only the
density direction is differentiated, since fitting maximises log-likelihood.

Spline parameters for one coordinate are ``3K - 1`` raw reals laid out as
``[widths (K), heights (K), interior derivatives (K - 1)]``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .approx import Adam, Mlp, load_arrays, save_arrays

LOG_2PI = math.log(2.0 * math.pi)
IDENTITY_DERIV = math.log(math.e - 1.0)  # softplus(IDENTITY_DERIV) == 1


def softplus(z):
    return np.logaddexp(0.0, z)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RqSplineParams:
    """Raw parameters of a single scalar spline (handy for tests and one-offs)."""

    theta: np.ndarray
    K: int
    B: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.K < 2 or self.B <= 0 or self.theta.shape != (3 * self.K - 1,):
            raise ValueError(f"need K >= 2, B > 0 and {3 * self.K - 1} raw parameters")

    @classmethod
    def identity(cls, K=8, B=4.0):
        return cls(np.concatenate([np.zeros(2 * K), np.full(K - 1, IDENTITY_DERIV)]), K, B)


class _Knots:
    """Knot geometry for a batch of splines; ``theta`` has shape ``(n, 3K-1)``."""

    def __init__(self, theta, K, B):
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite spline parameters")
        self.K, self.B = K, B
        self.theta_d = theta[:, 2 * K:]
        self.pw = _softmax(theta[:, :K])
        self.ph = _softmax(theta[:, K:2 * K])
        self.W = 2.0 * B * self.pw
        self.H = 2.0 * B * self.ph
        n = theta.shape[0]
        self.xs = np.empty((n, K + 1))
        self.ys = np.empty((n, K + 1))
        self.xs[:, 0] = self.ys[:, 0] = -B
        self.xs[:, 1:] = -B + np.cumsum(self.W, axis=1)
        self.ys[:, 1:] = -B + np.cumsum(self.H, axis=1)
        self.xs[:, -1] = self.ys[:, -1] = B
        self.D = np.ones((n, K + 1))
        self.D[:, 1:K] = softplus(self.theta_d)

    def locate(self, knots, z):
        k = np.sum(z[:, None] >= knots[:, 1:self.K], axis=1)
        rows = np.arange(z.shape[0])
        return k, rows

    def local(self, k, rows):
        return (self.xs[rows, k], self.W[rows, k], self.ys[rows, k], self.H[rows, k],
                self.D[rows, k], self.D[rows, k + 1])

    def scatter(self, k, rows, g_xk, g_w, g_yk, g_h, g_dk, g_dk1):
        """Pull gradients of the bin-local quantities back to the raw parameters."""
        K = self.K
        n = k.shape[0]
        below = np.arange(K)[None, :] < k[:, None]
        g_W = g_xk[:, None] * below
        g_W[rows, k] += g_w
        g_H = g_yk[:, None] * below
        g_H[rows, k] += g_h
        g_D = np.zeros((n, K + 1))
        g_D[rows, k] += g_dk
        g_D[rows, k + 1] += g_dk1
        gw = g_W * self.W
        gh = g_H * self.H
        out = np.empty((n, 3 * K - 1))
        out[:, :K] = gw - self.pw * gw.sum(axis=1, keepdims=True)
        out[:, K:2 * K] = gh - self.ph * gh.sum(axis=1, keepdims=True)
        out[:, 2 * K:] = g_D[:, 1:K] * expit(self.theta_d)
        return out


def _rq(x, xk, w, yk, h, dk, dk1):
    """Rational-quadratic map on one bin: value, log-derivative and the pieces
    needed by :func:`_rq_vjp`."""
    xi = (x - xk) / w
    s = h / w
    om = 1.0 - xi
    t = xi * om
    A = dk1 + dk - 2.0 * s
    den = s + A * t
    num = h * (s * xi * xi + dk * t)
    dn = dk1 * xi * xi + 2.0 * s * t + dk * om * om
    y = yk + num / den
    logd = 2.0 * np.log(s) + np.log(dn) - 2.0 * np.log(den)
    return y, logd, (xi, s, om, t, A, den, num, dn, w, h, dk, dk1)


def _rq_vjp(parts, gy, gl):
    """Cotangents of ``(y, logd)`` pulled back to ``(x, xk, w, yk, h, dk, dk1)``."""
    xi, s, om, t, A, den, num, dn, w, h, dk, dk1 = parts
    g_num = gy / den
    g_den = -gy * num / (den * den) - 2.0 * gl / den
    g_s = 2.0 * gl / s
    g_dn = gl / dn
    g_dk1 = g_dn * xi * xi
    g_xi = g_dn * 2.0 * dk1 * xi
    g_s += g_dn * 2.0 * t
    g_t = g_dn * 2.0 * s
    g_dk = g_dn * om * om
    g_om = g_dn * 2.0 * dk * om
    g_h = g_num * (s * xi * xi + dk * t)
    g_s += g_num * h * xi * xi
    g_xi += g_num * h * 2.0 * s * xi
    g_dk += g_num * h * t
    g_t += g_num * h * dk
    g_s += g_den
    g_A = g_den * t
    g_t += g_den * A
    g_dk1 += g_A
    g_dk += g_A
    g_s -= 2.0 * g_A
    g_xi += g_t * om
    g_om += g_t * xi
    g_xi -= g_om
    g_h += g_s / w
    g_w = -g_s * h / (w * w) - g_xi * xi / w
    g_x = g_xi / w
    return g_x, -g_x, g_w, gy, g_h, g_dk, g_dk1


def spline_forward_batch(x, theta, K, B):
    """Elementwise spline ``y = g(x)`` with ``log g'(x)``; identity outside ``[-B, B]``."""
    x = np.asarray(x, dtype=np.float64)
    y, logdet = x.copy(), np.zeros_like(x)
    idx = np.flatnonzero((x >= -B) & (x <= B))
    if idx.size:
        kn = _Knots(theta[idx], K, B)
        k, rows = kn.locate(kn.xs, x[idx])
        y[idx], logdet[idx], _ = _rq(x[idx], *kn.local(k, rows))
    return y, logdet


def spline_inverse_batch(y, theta, K, B, with_cache=False):
    """Elementwise ``x = g^{-1}(y)`` and ``log |dx/dy|``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite spline input")
    x, logdet = y.copy(), np.zeros_like(y)
    inside = (y >= -B) & (y <= B)
    idx = np.flatnonzero(inside)
    cache = None
    if idx.size:
        kn = _Knots(theta[idx], K, B)
        k, rows = kn.locate(kn.ys, y[idx])
        xk, w, yk, h, dk, dk1 = kn.local(k, rows)
        s = h / w
        yr = y[idx] - yk
        A = dk1 + dk - 2.0 * s
        a = h * (s - dk) + yr * A
        b = h * dk - yr * A
        c = -s * yr
        disc = np.maximum(b * b - 4.0 * a * c, 0.0)
        xi = 2.0 * c / (-b - np.sqrt(disc))
        xi = np.clip(xi, 0.0, 1.0)
        xin = xk + xi * w
        _, logd, parts = _rq(xin, xk, w, yk, h, dk, dk1)
        x[idx] = xin
        logdet[idx] = -logd
        cache = (idx, kn, k, rows, parts, logd)
    if with_cache:
        return x, logdet, cache
    return x, logdet


def spline_inverse_vjp(cache, shape, g_x, g_logdet, K):
    """Pull cotangents on ``(x, logdet)`` of :func:`spline_inverse_batch` back
    to ``(y, theta)``. Outside the spline interval the map is the identity."""
    g_y = np.array(g_x, dtype=np.float64, copy=True)
    g_theta = np.zeros(shape + (3 * K - 1,))
    if cache is None:
        return g_y, g_theta
    idx, kn, k, rows, parts, logd = cache
    gx, gl = g_x[idx], g_logdet[idx]
    zero = np.zeros_like(gx)
    dlogd_dx = _rq_vjp(parts, zero, np.ones_like(gx))[0]
    gprime = np.exp(logd)
    c = gx - gl * dlogd_dx
    g_y[idx] = c / gprime
    local = _rq_vjp(parts, -c / gprime, -gl)
    g_theta[idx] = kn.scatter(k, rows, *local[1:])
    return g_y, g_theta


def spline_forward(x, p: RqSplineParams):
    y, ld = spline_forward_batch(np.array([float(x)]), p.theta[None, :], p.K, p.B)
    return float(y[0]), float(ld[0])


def spline_inverse(y, p: RqSplineParams):
    x, ld = spline_inverse_batch(np.array([float(y)]), p.theta[None, :], p.K, p.B)
    return float(x[0]), float(ld[0])


class CouplingLayer:
    """Copies ``x[:split]`` and splines ``x[split:]`` with parameters from a conditioner
    net applied to ``x[:split]``; the output is then permuted by ``perm``."""

    def __init__(self, D, split, K, B, conditioner: Mlp, perm):
        if D > 1 and not 1 <= split < D:
            raise ValueError(f"split must be in [1, {D}), got {split}")
        if conditioner.n_in != split or conditioner.n_out != (D - split) * (3 * K - 1):
            raise ValueError("conditioner shape does not match the layer")
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(D)):
            raise ValueError("perm must be a permutation")
        self.D, self.split, self.K, self.B = D, split, K, B
        self.net = conditioner
        self.perm = perm
        self.inv_perm = np.argsort(perm)

    def _theta(self, x_id):
        out, cache = self.net.forward_cache(x_id)
        return out.reshape(x_id.shape[0], self.D - self.split, 3 * self.K - 1), cache

    def forward(self, x):
        """Base-to-data direction. Returns ``(y, logdet)``."""
        x = np.atleast_2d(x)
        if x.shape[1] != self.D:
            raise ValueError(f"expected {self.D} columns, got {x.shape[1]}")
        theta, _ = self._theta(x[:, :self.split])
        tr = x[:, self.split:]
        y_t, ld = spline_forward_batch(tr.ravel(), theta.reshape(-1, 3 * self.K - 1), self.K, self.B)
        y = np.hstack([x[:, :self.split], y_t.reshape(tr.shape)])
        return y[:, self.perm], ld.reshape(tr.shape).sum(axis=1)

    def inverse(self, y, with_cache=False):
        """Data-to-base direction. Returns ``(x, logdet)`` (and a cache for :meth:`inverse_vjp`)."""
        y = np.atleast_2d(y)
        if y.shape[1] != self.D:
            raise ValueError(f"expected {self.D} columns, got {y.shape[1]}")
        v = y[:, self.inv_perm]
        v_id = v[:, :self.split]
        theta, net_cache = self._theta(v_id)
        tr = v[:, self.split:]
        x_t, ld, sp_cache = spline_inverse_batch(tr.ravel(), theta.reshape(-1, 3 * self.K - 1),
                                                 self.K, self.B, with_cache=True)
        x = np.hstack([v_id, x_t.reshape(tr.shape)])
        logdet = ld.reshape(tr.shape).sum(axis=1)
        if with_cache:
            return x, logdet, (net_cache, sp_cache, tr.shape)
        return x, logdet

    def inverse_vjp(self, cache, g_x, g_logdet):
        """Returns ``(g_y, g_params)`` for cotangents on the inverse's outputs."""
        net_cache, sp_cache, shape = cache
        n, m = shape
        g_xt = g_x[:, self.split:].ravel()
        g_ld = np.repeat(g_logdet, m)
        g_vt, g_theta = spline_inverse_vjp(sp_cache, (n * m,), g_xt, g_ld, self.K)
        g_params, g_vid = self.net.backward(net_cache, g_theta.reshape(n, -1))
        g_v = np.hstack([g_x[:, :self.split] + g_vid, g_vt.reshape(n, m)])
        return g_v[:, self.perm], g_params


@dataclass
class FlowConfig:
    n_layers: int = 4
    K: int = 8
    B: float = 4.0
    hidden: int = 8
    activation: str = "tanh"
    lr: float = 1e-3
    batch_size: int = 256
    n_steps: int = 2000
    min_scale: float = 1e-6


class FlowModel:
    """Standardisation followed by coupling layers over a standard normal base."""

    def __init__(self, D, layers, mean=None, scale=None, params=None):
        self.D = D
        self.layers = layers
        self.mean = np.zeros(D) if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = np.ones(D) if scale is None else np.asarray(scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("standardiser scales must be positive")
        self.params = params

    @classmethod
    def create(cls, D, cfg: FlowConfig = FlowConfig(), rng=None, identity=True):
        """Fresh flow. With ``identity=True`` every conditioner's last layer
        outputs identity-spline parameters, so the flow starts as the identity."""
        rng = np.random.default_rng(0) if rng is None else rng
        K = cfg.K
        split = D // 2
        sizes = [split, cfg.hidden, (D - split) * (3 * K - 1)]
        per = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        params = np.zeros(per * cfg.n_layers)
        layers = []
        for i in range(cfg.n_layers):
            view = params[i * per:(i + 1) * per]
            net = Mlp(sizes, cfg.activation, params=view)
            net.init_params(rng)
            if identity:
                net.weights[-1][...] = 0.0
                net.biases[-1][...] = np.tile(
                    np.concatenate([np.zeros(2 * K), np.full(K - 1, IDENTITY_DERIV)]), D - split)
            layers.append(CouplingLayer(D, split, K, cfg.B, net, np.arange(D)[::-1]))
        return cls(D, layers, params=params)

    def _check(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.D:
            raise ValueError(f"expected points of dimension {self.D}, got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input")
        return x

    def to_base(self, x):
        """Map data to base space; returns ``(z, log|det dz/dx|)``."""
        x = self._check(x)
        z = (x - self.mean) / self.scale
        total = np.full(x.shape[0], -np.sum(np.log(self.scale)))
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z)
            total += ld
        return z, total

    def from_base(self, z):
        x = np.atleast_2d(z)
        for layer in self.layers:
            x, _ = layer.forward(x)
        return self.mean + self.scale * x

    def log_prob(self, x):
        z, logdet = self.to_base(x)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.D * LOG_2PI + logdet

    def log_prob_and_grad(self, x):
        """Mean log-likelihood over the batch and its gradient w.r.t. ``params``."""
        x = self._check(x)
        n = x.shape[0]
        z = (x - self.mean) / self.scale
        total = np.full(n, -np.sum(np.log(self.scale)))
        caches = []
        for layer in reversed(self.layers):
            z, ld, cache = layer.inverse(z, with_cache=True)
            total += ld
            caches.append(cache)
        ll = -0.5 * np.sum(z * z, axis=1) - 0.5 * self.D * LOG_2PI + total
        g = -z / n
        g_ld = np.full(n, 1.0 / n)
        grads = []
        for layer, cache in zip(self.layers, reversed(caches)):
            g, gp = layer.inverse_vjp(cache, g, g_ld)
            grads.append(gp)
        return float(ll.mean()), np.concatenate(grads)

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("n must be >= 1")
        return self.from_base(rng.standard_normal((n, self.D)))

    # -- persistence ---------------------------------------------------------

    def to_arrays(self):
        first = self.layers[0]
        arrays = {
            "D": np.asarray(self.D), "K": np.asarray(first.K), "B": np.asarray(first.B),
            "split": np.asarray(first.split), "n_layers": np.asarray(len(self.layers)),
            "mean": self.mean, "scale": self.scale,
            "perms": np.stack([l.perm for l in self.layers]),
        }
        for i, layer in enumerate(self.layers):
            arrays.update(layer.net.to_arrays(prefix=f"layer{i}_"))
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        D, K, B = int(arrays["D"]), int(arrays["K"]), float(arrays["B"])
        split, n_layers = int(arrays["split"]), int(arrays["n_layers"])
        nets = [Mlp.from_arrays(arrays, prefix=f"layer{i}_") for i in range(n_layers)]
        params = np.concatenate([n.params for n in nets])
        layers, off = [], 0
        for i, net in enumerate(nets):
            size = net.params.size
            net = Mlp(net.layer_sizes, net.activation, params=params[off:off + size])
            off += size
            layers.append(CouplingLayer(D, split, K, B, net, arrays["perms"][i]))
        return cls(D, layers, arrays["mean"], arrays["scale"], params=params)

    def save(self, path):
        save_arrays(path, "flow", self.to_arrays())

    @classmethod
    def load(cls, path):
        return cls.from_arrays(load_arrays(path, "flow"))


def fit(dataset, cfg: FlowConfig = FlowConfig(), rng=None, model=None):
    """Maximum-likelihood fit by minibatch Adam.

    Returns ``(model, info)`` with ``info`` holding the initial and final mean
    train log-likelihood and a ``degenerate`` flag set when some coordinate had
    (near) zero variance and its scale was clamped.
    """
    data = np.asarray(dataset, dtype=np.float64)
    data = data.reshape(-1, 1) if data.ndim == 1 else data
    n, D = data.shape
    if n < 2 * D:
        raise ValueError(f"need at least {2 * D} points to fit a {D}-d flow, got {n}")
    rng = np.random.default_rng(0) if rng is None else rng
    if model is None:
        model = FlowModel.create(D, cfg, rng)
    std = data.std(axis=0)
    degenerate = bool(np.any(std < cfg.min_scale))
    if degenerate:
        warnings.warn("zero-variance coordinate in flow training data; scale clamped", RuntimeWarning)
    model.mean = data.mean(axis=0)
    model.scale = np.maximum(std, cfg.min_scale)
    initial = float(model.log_prob(data).mean())
    opt = Adam(model.params.size, lr=cfg.lr)
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.n_steps):
        batch = data[rng.integers(0, n, size=bs)]
        _, grad = model.log_prob_and_grad(batch)
        opt.step(model.params, -grad)
    final = float(model.log_prob(data).mean())
    return model, {"initial_ll": initial, "final_ll": final, "degenerate": degenerate}


def mixture_sample(components, n, rng):
    """Draw ``n`` points, each from a uniformly chosen component.

    Components only need a ``sample(n, rng)`` method, so analytic samplers can
    sit alongside flows.
    """
    if not components:
        raise ValueError("need at least one component")
    if len(components) == 1:
        return components[0].sample(n, rng)
    choice = rng.integers(0, len(components), size=n)
    out = None
    for i, comp in enumerate(components):
        idx = np.flatnonzero(choice == i)
        if idx.size == 0:
            continue
        pts = comp.sample(idx.size, rng)
        if out is None:
            out = np.empty((n, pts.shape[1]))
        out[idx] = pts
    return out


def mixture_log_prob(flows, x):
    """Exact log-density of the uniform mixture of ``flows``."""
    lp = np.stack([f.log_prob(x) for f in flows])
    return logsumexp(lp, axis=0) - math.log(len(flows))
