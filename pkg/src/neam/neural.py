"""Small fully-connected replacement modules: init, forward, backward.

Each module is a 4-layer MLP (three hidden layers, leaky-ReLU after all
but the last). Weights are float64 throughout; batched inputs have shape
[B, d_in].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

DEFAULT_HIDDEN = (16, 32, 16)
DEFAULT_LEAKY_SLOPE = 0.01


@dataclass
class NeuralModule:
    dims: tuple  # (d_in, h1, h2, h3, d_out)
    weights: list = field(repr=False)  # per layer, shape [fan_in, fan_out]
    biases: list = field(repr=False)
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    @property
    def d_in(self):
        return self.dims[0]

    @property
    def d_out(self):
        return self.dims[-1]

    def n_weights(self):
        return weight_count(self.dims)

    def copy(self):
        return NeuralModule(
            self.dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.leaky_slope,
        )


def module_dims(d_in, d_out, hidden=DEFAULT_HIDDEN):
    if len(hidden) != 3:
        raise DimensionMismatch("modules are 4-layer networks: exactly 3 hidden sizes")
    return (d_in, *hidden, d_out)


def weight_count(dims):
    """Total trainable scalars: sum over layers of fan_in*fan_out + fan_out."""
    return int(sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1)))


def init_xavier(dims, seed, leaky_slope=DEFAULT_LEAKY_SLOPE):
    """Uniform Xavier weights, zero biases; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NeuralModule(tuple(dims), weights, biases, leaky_slope)


def zero_module(dims, leaky_slope=DEFAULT_LEAKY_SLOPE):
    weights = [np.zeros((i, o)) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    return NeuralModule(tuple(dims), weights, biases, leaky_slope)


def mlp_forward(m: NeuralModule, x):
    """Plain forward pass; x is [B, d_in] (or a single d_in vector)."""
    single = np.asarray(x).ndim == 1
    y, _ = mlp_forward_cached(m, np.atleast_2d(x))
    return y[0] if single else y


def mlp_forward_cached(m: NeuralModule, x):
    """Forward pass keeping per-layer activations for the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.d_in:
        raise DimensionMismatch(f"expected [B, {m.d_in}] input, got {x.shape}")
    acts = [x]
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = acts[-1] @ w
        z += b
        if i != last:
            # leaky ReLU: max(z, slope*z) picks z on the positive branch
            t = z * m.leaky_slope
            np.maximum(z, t, out=t)
            z = t
        acts.append(z)
    return acts[-1], acts


def mlp_backward(m: NeuralModule, acts, grad_out):
    """Exact gradients given cached activations.

    Returns (d_weights, d_biases, d_x); weight/bias gradients are summed
    over the batch, d_x is per-sample [B, d_in]. The leaky-ReLU derivative
    at exactly zero pre-activation is the slope.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    d_weights = [None] * len(m.weights)
    d_biases = [None] * len(m.biases)
    g = grad_out
    for i in range(len(m.weights) - 1, -1, -1):
        if i != len(m.weights) - 1:
            # acts[i+1] holds post-activation values; positives passed slope 1
            g = np.where(acts[i + 1] > 0, g, m.leaky_slope * g)
        d_weights[i] = acts[i].T @ g
        d_biases[i] = g.sum(axis=0)
        g = g @ m.weights[i].T
    return d_weights, d_biases, g
