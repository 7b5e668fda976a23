"""Diagonal-Gaussian dynamics model: predicts (next-state residual, reward) from (s, a).

The trunk emits means and raw log-stds for the concatenated target
[s' - s, r] in z-normalized space; raw log-stds are smoothly rescaled onto
[-10, 2] (tanh, not a hard clip, so gradients stay exact everywhere).  An
optional reward penalty subtracts lambda * max-dimension predicted std from
the de-normalized reward.
"""

from __future__ import annotations

import math

import numpy as np

from .envs import TransitionDataset
from .nn import AdamState, Mlp, adam_step, soft_clamp, soft_clamp_inverse

LOG_STD_RANGE = (-10.0, 2.0)
STD_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class DynamicsError(RuntimeError):
    pass



class GaussianDynamics:
    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        hidden: tuple[int, ...] = (64, 64),
        penalty_lambda: float = 0.0,
        dtype=np.float64,
        rng: np.random.Generator | None = None,
    ):
        if penalty_lambda < 0:
            raise ValueError("penalty_lambda must be nonnegative")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.target_dim = obs_dim + 1
        self.penalty_lambda = penalty_lambda
        self.trunk = Mlp(
            (obs_dim + act_dim, *hidden, 2 * self.target_dim),
            hidden_activation="relu",
            dtype=dtype,
            rng=rng,
        )
        # start at unit predicted std so the inverse-variance term is tame early on
        self.trunk.biases[-1][self.target_dim :] += soft_clamp_inverse(0.0, *LOG_STD_RANGE)
        self.in_mean = np.zeros(obs_dim + act_dim, dtype=dtype)
        self.in_std = np.ones(obs_dim + act_dim, dtype=dtype)
        self.t_mean = np.zeros(self.target_dim, dtype=dtype)
        self.t_std = np.ones(self.target_dim, dtype=dtype)
        self.trained = False

    # -- normalization -------------------------------------------------------

    def fit_normalization(self, dataset: TransitionDataset) -> None:
        dtype = self.trunk.dtype
        inputs = np.concatenate([dataset.observations, dataset.actions], axis=1)
        targets = np.concatenate(
            [
                dataset.next_observations - dataset.observations,
                dataset.rewards[:, None],
            ],
            axis=1,
        )
        self.in_mean = inputs.mean(axis=0).astype(dtype)
        self.in_std = np.maximum(inputs.std(axis=0), STD_FLOOR).astype(dtype)
        self.t_mean = targets.mean(axis=0).astype(dtype)
        self.t_std = np.maximum(targets.std(axis=0), STD_FLOOR).astype(dtype)

    def normalize_batch(self, obs, act, next_obs, rewards):
        x = (np.concatenate([obs, act], axis=1) - self.in_mean) / self.in_std
        t = (
            np.concatenate([next_obs - obs, np.asarray(rewards)[:, None]], axis=1)
            - self.t_mean
        ) / self.t_std
        dtype = self.trunk.dtype
        return x.astype(dtype), t.astype(dtype)

    # -- loss ------------------------------------------------------------------

    def nll_loss(self, x_norm: np.ndarray, t_norm: np.ndarray):
        """Mean Gaussian negative log-likelihood and exact trunk-parameter grads."""
        if not (np.isfinite(x_norm).all() and np.isfinite(t_norm).all()):
            raise DynamicsError("non-finite batch rejected")
        n = x_norm.shape[0]
        out, cache = self.trunk.forward_cached(x_norm)
        mu = out[:, : self.target_dim]
        raw = out[:, self.target_dim :]
        log_std, dclamp = soft_clamp(raw, *LOG_STD_RANGE)
        inv_var = np.exp(-2.0 * log_std)
        resid = t_norm - mu
        per_sample = 0.5 * LOG_2PI * self.target_dim + (
            log_std + 0.5 * resid * resid * inv_var
        ).sum(axis=1)
        loss = float(per_sample.mean())

        d_mu = -(resid * inv_var) / n
        d_log_std = (1.0 - resid * resid * inv_var) / n
        upstream = np.concatenate([d_mu, d_log_std * dclamp], axis=1)
        grads, _ = self.trunk.backward(cache, upstream)
        return loss, grads

    # -- prediction --------------------------------------------------------------

    def predict(self, obs, act, mode: str = "mean", rng: np.random.Generator | None = None):
        """(s_hat_next, r_hat) in environment units; batched over rows."""
        obs = np.atleast_2d(np.asarray(obs))
        act = np.atleast_2d(np.asarray(act))
        x = ((np.concatenate([obs, act], axis=1) - self.in_mean) / self.in_std).astype(
            self.trunk.dtype
        )
        out = self.trunk.forward(x)
        mu = out[:, : self.target_dim]
        log_std, _ = soft_clamp(out[:, self.target_dim :], *LOG_STD_RANGE)
        std = np.exp(log_std)
        if mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            point = mu + std * rng.standard_normal(mu.shape).astype(mu.dtype)
        elif mode == "mean":
            point = mu
        else:
            raise ValueError(f"unknown predict mode {mode!r}")
        target = point * self.t_std + self.t_mean
        s_next = obs + target[:, : self.obs_dim]
        r_hat = target[:, self.obs_dim]
        if self.penalty_lambda > 0.0:
            std_denorm = std * self.t_std
            r_hat = r_hat - self.penalty_lambda * std_denorm.max(axis=1)
        return s_next, r_hat

    # -- persistence ---------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {
            "in_mean": self.in_mean,
            "in_std": self.in_std,
            "t_mean": self.t_mean,
            "t_std": self.t_std,
        }
        for i, p in enumerate(self.trunk.param_list()):
            tensors[f"trunk.{i}"] = p
        return tensors

    def meta(self) -> dict:
        return {
            "kind": "gaussian_dynamics",
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "hidden": list(self.trunk.widths[1:-1]),
            "penalty_lambda": self.penalty_lambda,
            "dtype": self.trunk.dtype.name,
            "trained": self.trained,
        }

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], meta: dict) -> "GaussianDynamics":
        model = cls(
            meta["obs_dim"],
            meta["act_dim"],
            hidden=tuple(meta["hidden"]),
            penalty_lambda=meta["penalty_lambda"],
            dtype=np.dtype(meta["dtype"]),
        )
        params = [tensors[f"trunk.{i}"] for i in range(len(model.trunk.param_list()))]
        model.trunk.set_params(params)
        model.in_mean = tensors["in_mean"]
        model.in_std = tensors["in_std"]
        model.t_mean = tensors["t_mean"]
        model.t_std = tensors["t_std"]
        model.trained = bool(meta.get("trained", False))
        return model


def train_dynamics(
    model: GaussianDynamics,
    dataset: TransitionDataset,
    epochs: int = 40,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
) -> GaussianDynamics:
    """Shuffled minibatch Adam over the mean NLL; sets normalization first."""
    if dataset.n == 0:
        raise DynamicsError("cannot train on an empty dataset")
    if epochs == 0:
        return model
    model.fit_normalization(dataset)
    x, t = model.normalize_batch(
        dataset.observations, dataset.actions, dataset.next_observations, dataset.rewards
    )
    params = model.trunk.param_list()
    opt = AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads = model.nll_loss(x[idx], t[idx])
            adam_step(opt, params, grads)
    model.trained = True
    return model


def epoch_nll(model: GaussianDynamics, dataset: TransitionDataset, batch_size: int = 1024) -> float:
    """Dataset-averaged NLL without gradient work (evaluation helper)."""
    x, t = model.normalize_batch(
        dataset.observations, dataset.actions, dataset.next_observations, dataset.rewards
    )
    total, n = 0.0, x.shape[0]
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        loss, _ = model.nll_loss(x[start:stop], t[start:stop])
        total += loss * (stop - start)
    return total / n
