"""Minimal feed-forward nets with hand-rolled reverse-mode gradients.

No autodiff: every forward pass can record a cache, and `Mlp.backward` replays it
exactly.  Training code owns all parameter mutation; forward/backward never touch
the parameter arrays.  f64 is used in tests (finite-difference checks need it),
f32 in training loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class NonFiniteGradError(RuntimeError):
    """Adam update rejected because a gradient contained NaN/Inf."""


def _act(name: str, z: np.ndarray, inplace: bool = False) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0, out=z if inplace else None)
    if name == "tanh":
        return np.tanh(z, out=z if inplace else None)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class Mlp:
    """Dense layers with per-layer activations and uniform +-1/sqrt(fan_in) init.

    Parameters live in `weights` / `biases` lists; `param_list()` flattens them in
    a fixed order (w0, b0, w1, b1, ...) shared by Adam states, soft updates, and
    checkpoints.
    """

    def __init__(
        self,
        widths: tuple[int, ...],
        activations: tuple[str, ...] | None = None,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        dtype=np.float64,
        rng: np.random.Generator | None = None,
        final_scale: float = 1.0,
    ):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        n_layers = len(widths) - 1
        if activations is None:
            activations = (hidden_activation,) * (n_layers - 1) + (output_activation,)
        if len(activations) != n_layers:
            raise ValueError("one activation per layer required")
        for name in activations:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        rng = rng or np.random.default_rng()
        self.widths = tuple(int(w) for w in widths)
        self.activations = tuple(activations)
        self.dtype = np.dtype(dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(n_layers):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == n_layers - 1 and final_scale != 1.0:
                w *= final_scale
                b *= final_scale
            self.weights.append(w.astype(self.dtype))
            self.biases.append(b.astype(self.dtype))

    # -- parameter plumbing -------------------------------------------------

    def param_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = params[2 * i].astype(self.dtype, copy=False)
            self.biases[i] = params[2 * i + 1].astype(self.dtype, copy=False)

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.widths = self.widths
        clone.activations = self.activations
        clone.dtype = self.dtype
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x, keep_cache=False)
        return y

    def forward_cached(self, x: np.ndarray, keep_cache: bool = True):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ValueError(f"expected input of width {self.widths[0]}, got {x.shape}")
        pre, post = [], []
        h = x
        for w, b, name in zip(self.weights, self.biases, self.activations):
            z = h @ w
            z += b
            h = _act(name, z, inplace=not keep_cache)
            if keep_cache:
                pre.append(z)
                post.append(h)
        cache = (x, pre, post) if keep_cache else None
        return h, cache

    def backward(self, cache, upstream: np.ndarray):
        """Gradients of sum(output * upstream) w.r.t. parameters and the input.

        Returns (param_grads, input_grad) with param_grads ordered like
        `param_list()`.
        """
        x, pre, post = cache
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != (x.shape[0], self.widths[-1]):
            raise ValueError("upstream gradient shape mismatch")
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = upstream
        for i in range(len(self.weights) - 1, -1, -1):
            delta = delta * _act_grad(self.activations[i], pre[i], post[i])
            inputs = x if i == 0 else post[i - 1]
            grads_w[i] = inputs.T @ delta
            grads_b[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        flat = []
        for gw, gb in zip(grads_w, grads_b):
            flat.append(gw)
            flat.append(gb)
        return flat, delta

    def input_grad(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Gradient of sum(output * upstream) w.r.t. the input only (no param grads)."""
        _, pre, post = cache
        delta = np.asarray(upstream, dtype=self.dtype)
        for i in range(len(self.weights) - 1, -1, -1):
            delta = delta * _act_grad(self.activations[i], pre[i], post[i])
            delta = delta @ self.weights[i].T
        return delta


@dataclass
class AdamState:
    """Bias-corrected Adam moments, shaped like the parameter list they update."""

    lr: float
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """One in-place Adam update.  Rejects non-finite gradients."""
    for g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteGradError("gradient contains NaN/Inf; update rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def soft_update(target_params: list[np.ndarray], online_params: list[np.ndarray], tau: float):
    """target <- tau*online + (1-tau)*target, elementwise and in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for t, o in zip(target_params, online_params):
        t *= 1.0 - tau
        t += tau * o
    return target_params


def soft_clamp(raw: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Smooth tanh rescale of raw values onto (lo, hi); returns (value, dvalue/draw).

    Used wherever a log-std must stay inside a range: unlike a hard clip the
    gradient never dies, so finite-difference oracles stay exact everywhere.
    """
    t = np.tanh(raw)
    value = lo + 0.5 * (hi - lo) * (t + 1.0)
    grad = 0.5 * (hi - lo) * (1.0 - t * t)
    return value, grad


def soft_clamp_inverse(value: float, lo: float, hi: float) -> float:
    """Raw input for which soft_clamp returns `value` (head initialization)."""
    return float(np.arctanh((value - lo) / (hi - lo) * 2.0 - 1.0))


def finite_difference_grads(loss_fn, params: list[np.ndarray], step: float = 1e-5):
    """Central finite differences of a scalar loss w.r.t. each parameter array."""
    grads = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            hi = loss_fn()
            flat_p[i] = orig - step
            lo = loss_fn()
            flat_p[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """max |a - n| / max(1, |a|, |n|) over all parameter entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
