"""Small dense networks with hand-written reverse-mode gradients, plus Adam.

Parameter layout of an :class:`Mlp` is one flat float64 vector. For each layer
``l`` mapping ``n_in -> n_out`` it stores the weight matrix (``n_in x n_out``,
row-major) followed by the bias (``n_out``), layers in order. Weight and bias
arrays exposed on the net are views into that vector, so an optimizer that
updates the flat vector in place updates the net.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("tanh", "relu")


def n_params(layer_sizes) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


class Mlp:
    """Fully connected net; hidden layers use ``activation``, the last layer is affine."""

    def __init__(self, layer_sizes, activation="tanh", params=None, rng=None):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or any(n < 0 for n in layer_sizes) or min(layer_sizes[1:]) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        size = n_params(layer_sizes)
        if params is None:
            params = np.zeros(size)
            self.params = params
            self._bind()
            self.init_params(rng if rng is not None else np.random.default_rng(0))
        else:
            if params.shape != (size,):
                raise ValueError(f"expected {size} params, got shape {params.shape}")
            self.params = params
            self._bind()

    def _bind(self):
        self.weights, self.biases = [], []
        off = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(self.params[off:off + n_in * n_out].reshape(n_in, n_out))
            off += n_in * n_out
            self.biases.append(self.params[off:off + n_out])
            off += n_out

    def init_params(self, rng):
        """Glorot-uniform weights, zero biases."""
        for w, b in zip(self.weights, self.biases):
            n_in, n_out = w.shape
            lim = np.sqrt(6.0 / max(n_in + n_out, 1))
            w[...] = rng.uniform(-lim, lim, size=w.shape)
            b[...] = 0.0

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def _act(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def forward(self, x):
        return self.forward_cache(x)[0]

    def forward_cache(self, x):
        """Forward pass keeping the layer inputs needed by :meth:`backward`.

        ``x`` may be a single vector or a batch with shape ``(n, n_in)``.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.n_in:
            raise ValueError(f"input has {h.shape[-1]} features, net expects {self.n_in}")
        inputs, acts = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                h = self._act(z)
                acts.append(h)
            else:
                h = z
        out = h[0] if single else h
        return out, (single, inputs, acts)

    def backward(self, cache, grad_out):
        """Return ``(param_grad, input_grad)`` for the cotangent ``grad_out``.

        Gradients of a batch are summed over the batch.
        """
        single, inputs, acts = cache
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None, :] if single else g
        if g.shape != (inputs[0].shape[0], self.n_out):
            raise ValueError(f"cotangent shape {g.shape} does not match output")
        grad = np.empty_like(self.params)
        off_end = grad.size
        for i in range(len(self.weights) - 1, -1, -1):
            w = self.weights[i]
            n_in, n_out = w.shape
            if i < len(self.weights) - 1:
                a = acts[i]
                g = g * (1.0 - a * a) if self.activation == "tanh" else g * (a > 0)
            grad[off_end - n_out:off_end] = g.sum(axis=0)
            off_end -= n_out
            grad[off_end - n_in * n_out:off_end] = (inputs[i].T @ g).ravel()
            off_end -= n_in * n_out
            g = g @ w.T
        return grad, (g[0] if single else g)

    def copy(self):
        return Mlp(self.layer_sizes, self.activation, params=self.params.copy())

    def to_arrays(self, prefix=""):
        return {
            f"{prefix}layer_sizes": np.asarray(self.layer_sizes, dtype=np.int64),
            f"{prefix}activation": np.asarray(self.activation),
            f"{prefix}params": self.params.copy(),
        }

    @classmethod
    def from_arrays(cls, arrays, prefix=""):
        return cls(
            arrays[f"{prefix}layer_sizes"].tolist(),
            str(arrays[f"{prefix}activation"]),
            params=np.array(arrays[f"{prefix}params"], dtype=np.float64),
        )


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, x, grad_out):
    _, cache = net.forward_cache(x)
    return net.backward(cache, grad_out)


@dataclass
class Adam:
    """Bias-corrected Adam that minimizes; negate gradients to maximize."""

    size: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, params, grad):
        """Update ``params`` in place and return it."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape or params.shape != self.m.shape:
            raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {self.m.shape}")
        bad = ~np.isfinite(grad)
        if bad.any():
            raise FloatingPointError(f"non-finite gradient at index {int(np.flatnonzero(bad)[0])}")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def adam_step(state: Adam, params, grad):
    return state.step(params, grad)


def save_arrays(path, kind, arrays):
    """Write a checkpoint: ``format_version`` and ``kind`` header entries plus arrays, as ``.npz``."""
    payload = {"format_version": np.asarray(CHECKPOINT_VERSION), "kind": np.asarray(kind)}
    payload.update(arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_arrays(path, kind):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    version = int(arrays.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if str(arrays["kind"]) != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {str(arrays['kind'])!r}")
    return arrays


def save_mlp(path, net: Mlp):
    save_arrays(path, "mlp", net.to_arrays())


def load_mlp(path) -> Mlp:
    return Mlp.from_arrays(load_arrays(path, "mlp"))
