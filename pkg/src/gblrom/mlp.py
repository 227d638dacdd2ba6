"""Feed-forward networks with LeakyReLU hidden layers, written on plain numpy.

Forward pass, mean-squared-error loss, and reverse-accumulation gradients.
Everything is float64 and deterministic; the networks are small enough that
vectorized numpy is the whole story.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mlp:
    weights: list  # per layer, shape (fan_out, fan_in)
    biases: list   # per layer, shape (fan_out,)
    hidden_slope: float = 0.01

    def __post_init__(self):
        sizes = self.layer_sizes
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ValueError(f"layer {k} has inconsistent shapes")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k} has non-finite parameters")

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_mlp(sizes, hidden_slope: float = 0.01, seed: int = 0) -> Mlp:
    """Uniform fan-in-scaled initialization, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(weights=weights, biases=biases, hidden_slope=hidden_slope)


def leaky_relu(x, slope: float):
    return np.where(x >= 0, x, slope * x)


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network; accepts a single vector or a (batch, in) matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"input size {a.shape[1]} does not match {net.layer_sizes[0]}")
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w.T + b
        if k < last:
            a = leaky_relu(a, net.hidden_slope)
    return a[0] if single else a


def mse_loss(net: Mlp, x, y) -> float:
    pred = forward(net, x)
    diff = pred - np.asarray(y, dtype=np.float64)
    return float(np.mean(diff ** 2))


def loss_and_gradient(net: Mlp, x, y) -> tuple[float, list]:
    """Mean-squared error over the batch and its exact parameter gradient.

    The mean runs over every entry (batch times output components), so
    duplicating the batch leaves both loss and gradient unchanged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    last = len(net.weights) - 1
    pre = []
    a = x
    acts = [a]
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = leaky_relu(z, net.hidden_slope) if k < last else z
        acts.append(a)
    diff = acts[-1] - y
    loss = float(np.mean(diff ** 2))

    grads = [None] * len(net.weights)
    delta = (2.0 / diff.size) * diff
    for k in range(last, -1, -1):
        if k < last:
            delta = delta * np.where(pre[k] >= 0, 1.0, net.hidden_slope)
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = delta @ net.weights[k]
    return loss, grads


def input_backward(net: Mlp, x, seed) -> np.ndarray:
    """Vector-Jacobian product with respect to the input: d(seed . f(x))/dx.

    Used by the observation-matching refinement, where the objective gradient
    needs the residual pulled back through the forward map.
    """
    x = np.asarray(x, dtype=np.float64)
    seed = np.asarray(seed, dtype=np.float64)
    last = len(net.weights) - 1
    pre = []
    a = x
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = leaky_relu(z, net.hidden_slope) if k < last else z
    delta = seed
    for k in range(last, -1, -1):
        if k < last:
            delta = delta * np.where(pre[k] >= 0, 1.0, net.hidden_slope)
        delta = delta @ net.weights[k]
    return delta


def get_params(net: Mlp) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in
                           zip(net.weights, net.biases)])


def set_params(net: Mlp, vec: np.ndarray) -> None:
    pos = 0
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        net.weights[k] = vec[pos:pos + w.size].reshape(w.shape).copy()
        pos += w.size
        net.biases[k] = vec[pos:pos + b.size].copy()
        pos += b.size
    if pos != vec.size:
        raise ValueError("parameter vector length mismatch")


def flatten_gradient(grads: list) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
