"""Minimal dense-network substrate: forward, hand-written backward, Adam.

Everything is plain numpy. Parameters are stored as float32 for training;
gradient checks upcast the whole model to float64 (see ``cast_params``) so
central finite differences stay meaningful at tight tolerances.

Parameters live in flat ``{name: ndarray}`` dicts throughout the project,
which keeps optimizers, checkpoints and gradient oracles generic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "softplus", "sigmoid", "identity")


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0)
    if name == "softplus":
        return np.logaddexp(0, pre)
    if name == "sigmoid":
        return expit(pre)
    if name == "identity":
        return pre
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    """d(activation)/d(pre-activation), elementwise."""
    if name == "relu":
        return (pre > 0).astype(pre.dtype)
    if name == "softplus":
        return expit(pre)
    if name == "sigmoid":
        return out * (1 - out)
    if name == "identity":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {name!r}")


class ConfigurationError(ValueError):
    """A layer/network was built or fed with inconsistent dimensions."""


class UsageError(RuntimeError):
    """An API contract was violated (e.g. backward with a stale cache)."""


@dataclass
class DenseLayer:
    """One fully connected layer: ``out = act(x @ weights.T + bias)``."""

    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ConfigurationError("weights must be 2-d and bias 1-d")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ConfigurationError(
                f"bias dim {self.bias.shape[0]} does not match "
                f"output dim {self.weights.shape[0]}"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ConfigurationError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class MlpCache:
    """Activations retained by ``forward`` for a later ``backward``."""

    mlp: "Mlp"
    inputs: list  # per layer: input to the layer, (B, in_dim)
    pres: list  # per layer: pre-activation, (B, out_dim)
    outs: list  # per layer: post-activation, (B, out_dim)


class Mlp:
    """An ordered stack of dense layers with explicit backpropagation."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer output dim {a.out_dim} feeds layer input dim {b.in_dim}"
                )
        self.layers = layers

    @classmethod
    def create(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        dtype=np.float32,
    ) -> "Mlp":
        """Build an MLP with fan-in-scaled uniform init, U(-1/sqrt(n), 1/sqrt(n))."""
        if len(dims) < 2:
            raise ConfigurationError("need at least input and output dims")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
            b = rng.uniform(-bound, bound, size=(n_out,)).astype(dtype)
            act = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer(w, b, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, inputs: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        """Run the network on a batch (B, in_dim); retain activations."""
        x = np.atleast_2d(inputs)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"input dim {x.shape[-1]} does not match first layer ({self.in_dim})"
            )
        cache = MlpCache(self, [], [], [])
        for layer in self.layers:
            pre = x @ layer.weights.T + layer.bias
            out = _activate(layer.activation, pre)
            cache.inputs.append(x)
            cache.pres.append(pre)
            cache.outs.append(out)
            x = out
        return x, cache

    def backward(
        self, cache: MlpCache, upstream: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Chain-rule through all layers.

        Returns ``(grads, d_input)`` where ``grads[i]`` is ``(dW, db)`` for
        layer i and ``d_input`` is the gradient w.r.t. the forward input.
        """
        if cache.mlp is not self:
            raise UsageError("cache was produced by a different network")
        if len(cache.inputs) != len(self.layers):
            raise UsageError("cache does not match network depth")
        dout = np.atleast_2d(upstream)
        if dout.shape != cache.outs[-1].shape:
            raise UsageError(
                f"upstream gradient shape {dout.shape} does not match "
                f"forward output {cache.outs[-1].shape}"
            )
        grads: list = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dpre = dout * _activation_grad(layer.activation, cache.pres[i], cache.outs[i])
            dw = dpre.T @ cache.inputs[i]
            db = dpre.sum(axis=0)
            dout = dpre @ layer.weights
            grads[i] = (dw, db)
        return grads, dout

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        """Live views of all parameters, keyed ``{prefix}.w{i}`` / ``{prefix}.b{i}``."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.w{i}"] = layer.weights
            out[f"{prefix}.b{i}"] = layer.bias
        return out

    def grad_dict(self, grads, prefix: str) -> dict[str, np.ndarray]:
        """Name the per-layer gradients from ``backward`` like ``parameters``."""
        out = {}
        for i, (dw, db) in enumerate(grads):
            out[f"{prefix}.w{i}"] = dw
            out[f"{prefix}.b{i}"] = db
        return out


@dataclass
class AdamState:
    """Adam optimizer state for a collection of named parameter groups."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Every key of ``params`` must have a gradient (pass explicit zeros for
    groups whose loss terms vanished this step, so momentum behaves the
    same as a full evaluation would).
    """
    for name in params:
        if name not in grads:
            raise UsageError(f"missing gradient for parameter group {name!r}")
        if not np.isfinite(grads[name]).all():
            raise ValueError(f"non-finite gradient in parameter group {name!r}")
        if grads[name].shape != params[name].shape:
            raise UsageError(
                f"gradient shape {grads[name].shape} does not match parameter "
                f"{name!r} shape {params[name].shape}"
            )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
        v = state.second_moment.get(name)
        if v is None:
            v = state.second_moment[name] = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        m_hat = m / bias1
        v_hat = v / bias2
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(
            p.dtype, copy=False
        )
    return state


def finite_difference_grad(
    loss_fn: Callable[[dict], float],
    params: dict[str, np.ndarray],
    h: float = 1e-4,
    indices: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradients of a pure scalar loss, per parameter.

    ``loss_fn`` is called with the (mutated-in-place, then restored) params
    dict. Pass ``indices`` ({name: flat indices}) to probe a subset of the
    entries of large groups; unprobed entries are returned as zero.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        if indices is not None and name in indices:
            probe = np.asarray(indices[name], dtype=np.intp)
        else:
            probe = np.arange(flat.size)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn(params)
            flat[i] = orig - h
            lo = loss_fn(params)
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2.0 * h)
        out[name] = g
    return out


def grad_relative_error(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    indices: dict[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Per-group relative error ||a - n|| / max(||a||, ||n||).

    Zero-against-zero groups report 0. When ``indices`` is given only those
    entries are compared (matching a sampled finite-difference run).
    """
    errs = {}
    for name, a in analytic.items():
        n = numeric[name]
        a = a.reshape(-1).astype(np.float64)
        n = n.reshape(-1).astype(np.float64)
        if indices is not None and name in indices:
            sel = np.asarray(indices[name], dtype=np.intp)
            a, n = a[sel], n[sel]
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        errs[name] = 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)
    return errs


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    """Copy a parameter dict to another dtype (float64 for gradient checks)."""
    return {k: v.astype(dtype) for k, v in params.items()}
