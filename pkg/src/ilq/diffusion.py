"""Conditional denoising model of the behavior policy and the limitation value.

A K-step reverse chain (K=5 by default) denoises Gaussian noise into an action
conditioned on the state.  The noise-prediction net sees (noisy action, state,
sinusoidal embedding of the step index).  The limitation value draws M actions
from the chain and takes min over critics of the max over draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import TransitionDataset
from .nn import AdamState, Mlp, adam_step

TIME_EMBED_DIM = 8


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step variances beta_1..beta_K with cached alpha products."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D array")
        if (betas <= 0.0).any() or (betas >= 1.0).any():
            raise ScheduleError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if (np.diff(alpha_bars) >= 0.0).any():
            raise ScheduleError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def K(self) -> int:
        return self.betas.size

    @classmethod
    def vp(cls, K: int = 5, beta_min: float = 0.1, beta_max: float = 10.0) -> "VarianceSchedule":
        """Variance-preserving schedule: beta_k = 1 - exp(-bmin/K - (bmax-bmin)(2k-1)/(2K^2))."""
        k = np.arange(1, K + 1, dtype=np.float64)
        exponent = -beta_min / K - 0.5 * (beta_max - beta_min) * (2.0 * k - 1.0) / K**2
        return cls(1.0 - np.exp(exponent))


def time_embedding(k, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer step indices; shape (len(k), dim)."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / half)
    angles = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def forward_noise(a0: np.ndarray, k: int, xi: np.ndarray, schedule: VarianceSchedule) -> np.ndarray:
    """Noise an action to diffusion step k: sqrt(abar_k)*a0 + sqrt(1-abar_k)*xi."""
    if not 1 <= k <= schedule.K:
        raise ScheduleError(f"step {k} outside [1, {schedule.K}]")
    abar = schedule.alpha_bars[k - 1]
    return np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * xi


class DiffusionBehavior:
    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        schedule: VarianceSchedule | None = None,
        hidden: tuple[int, ...] = (64, 64),
        action_low: float = -1.0,
        action_high: float = 1.0,
        dtype=np.float64,
        rng: np.random.Generator | None = None,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.schedule = schedule or VarianceSchedule.vp()
        self.action_low = action_low
        self.action_high = action_high
        self.noise_net = Mlp(
            (act_dim + obs_dim + TIME_EMBED_DIM, *hidden, act_dim),
            hidden_activation="relu",
            dtype=dtype,
            rng=rng,
        )
        self.trained = False
        # embeddings for k = 1..K, precomputed once
        self._embeds = time_embedding(np.arange(1, self.schedule.K + 1)).astype(dtype)

    def _net_input(self, noisy_act, obs, k_index):
        emb = self._embeds[k_index]
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (noisy_act.shape[0], emb.size))
        return np.concatenate([noisy_act, obs, emb], axis=1).astype(self.noise_net.dtype)

    def predict_noise(self, noisy_act, obs, k) -> np.ndarray:
        """The net's noise estimate at integer step k (same k for all rows)."""
        return self.noise_net.forward(self._net_input(noisy_act, obs, k - 1))

    # -- training ------------------------------------------------------------

    def loss(self, obs: np.ndarray, act: np.ndarray, rng: np.random.Generator):
        """Denoising score-matching loss with exact grads.

        Per row: k ~ uniform{1..K}, xi ~ N(0, I); the loss is the mean over rows
        of the squared norm of (xi - predicted xi at the noised action).
        """
        n = obs.shape[0]
        dtype = self.noise_net.dtype
        k_rows = rng.integers(1, self.schedule.K + 1, size=n)
        xi = rng.standard_normal((n, self.act_dim)).astype(dtype)
        abar = self.schedule.alpha_bars[k_rows - 1][:, None].astype(dtype)
        noisy = np.sqrt(abar) * np.asarray(act, dtype=dtype) + np.sqrt(1.0 - abar) * xi
        x = self._net_input(noisy, obs, k_rows - 1)
        pred, cache = self.noise_net.forward_cached(x)
        resid = pred - xi.astype(pred.dtype)
        loss = float((resid * resid).sum(axis=1).mean())
        grads, _ = self.noise_net.backward(cache, 2.0 * resid / n)
        return loss, grads

    # -- sampling ------------------------------------------------------------

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One action per row of obs via the full reverse chain, clipped to bounds."""
        dtype = self.noise_net.dtype
        obs = np.atleast_2d(np.asarray(obs)).astype(dtype, copy=False)
        n = obs.shape[0]
        a = rng.standard_normal((n, self.act_dim)).astype(dtype)
        sched = self.schedule
        # one reusable input buffer; python-float constants keep everything in dtype
        x = np.empty((n, self.act_dim + self.obs_dim + TIME_EMBED_DIM), dtype=dtype)
        x[:, self.act_dim : self.act_dim + self.obs_dim] = obs
        if sched.K > 1:
            chain_noise = rng.standard_normal((sched.K - 1, n, self.act_dim)).astype(dtype)
        for k in range(sched.K, 0, -1):
            beta = float(sched.betas[k - 1])
            noise_coef = float(beta / np.sqrt(1.0 - sched.alpha_bars[k - 1]))
            inv_sqrt_alpha = float(1.0 / np.sqrt(sched.alphas[k - 1]))
            x[:, : self.act_dim] = a
            x[:, self.act_dim + self.obs_dim :] = self._embeds[k - 1]
            xi_hat = self.noise_net.forward(x)
            mean = (a - noise_coef * xi_hat) * inv_sqrt_alpha
            if k > 1:
                a = mean + float(np.sqrt(beta)) * chain_noise[k - 2]
            else:
                a = mean
        return np.clip(a, self.action_low, self.action_high)

    def sample_many(self, obs: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
        """m draws per row; shape (n, m, act_dim).  Tiles rows through one chain."""
        obs = np.atleast_2d(np.asarray(obs))
        n = obs.shape[0]
        tiled = np.repeat(obs, m, axis=0)
        return self.sample(tiled, rng).reshape(n, m, self.act_dim)

    # -- persistence -----------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {"betas": self.schedule.betas}
        for i, p in enumerate(self.noise_net.param_list()):
            tensors[f"noise_net.{i}"] = p
        return tensors

    def meta(self) -> dict:
        return {
            "kind": "diffusion_behavior",
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "hidden": list(self.noise_net.widths[1:-1]),
            "action_low": self.action_low,
            "action_high": self.action_high,
            "dtype": self.noise_net.dtype.name,
            "trained": self.trained,
        }

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], meta: dict) -> "DiffusionBehavior":
        model = cls(
            meta["obs_dim"],
            meta["act_dim"],
            schedule=VarianceSchedule(tensors["betas"]),
            hidden=tuple(meta["hidden"]),
            action_low=meta["action_low"],
            action_high=meta["action_high"],
            dtype=np.dtype(meta["dtype"]),
        )
        params = [tensors[f"noise_net.{i}"] for i in range(len(model.noise_net.param_list()))]
        model.noise_net.set_params(params)
        model.trained = bool(meta.get("trained", False))
        return model


def limitation_value(
    model: DiffusionBehavior,
    critic_fn,
    obs: np.ndarray,
    m: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """min over critics of (max over m behavior draws of Q_j(s, a_hat)).

    critic_fn(obs_rows, act_rows) must return a tuple of per-row value arrays,
    one per critic.  Returns one value per row of obs.
    """
    if m < 1:
        raise ValueError("need at least one behavior sample")
    obs = np.atleast_2d(np.asarray(obs))
    n = obs.shape[0]
    obs_rep = np.repeat(obs, m, axis=0)
    actions = model.sample(obs_rep, rng)
    q_values = critic_fn(obs_rep, actions)
    per_critic_max = [q.reshape(n, m).max(axis=1) for q in q_values]
    return np.minimum.reduce(per_critic_max)


def train_behavior(
    model: DiffusionBehavior,
    dataset: TransitionDataset,
    steps: int = 30_000,
    batch_size: int = 256,
    lr: float = 3e-4,
    seed: int = 0,
) -> DiffusionBehavior:
    """Minibatch Adam on the denoising loss for a fixed number of steps."""
    if dataset.n == 0:
        raise ValueError("cannot train on an empty dataset")
    obs = dataset.observations.astype(model.noise_net.dtype)
    act = dataset.actions.astype(model.noise_net.dtype)
    params = model.noise_net.param_list()
    opt = AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    n = obs.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        _, grads = model.loss(obs[idx], act[idx], rng)
        adam_step(opt, params, grads)
    model.trained = True
    return model
