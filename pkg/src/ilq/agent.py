"""The deep imagination-limited Q-learner: double critics, tanh-Gaussian actor,
OOD targets clipped by the behavior ceiling, and the offline training loop.

Target recipe per batch:
  in-sample rows   r + gamma*(1-done)*(min_j Q_j^target(s', a') - alpha*logpi)
  OOD rows         min(y_img, y_lmt) + delta, where
                     y_img  bootstraps one step through the dynamics model, and
                     y_lmt  is min over critics of the max target-critic value
                            over M behavior-model draws at s.
Critic loss is eta * in-sample MSE + (1-eta) * OOD MSE, targets held constant.
The actor maximizes min_j Q_j minus an entropy term (reparameterized).

Randomness is split into named streams derived from one root seed, so disabling
any OOD computation (eta=1 equivalence, ablations) leaves every other stream's
draws untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import DiffusionBehavior, limitation_value
from .dynamics import GaussianDynamics
from .envs import evaluate_policy, normalized_score
from .nn import AdamState, Mlp, adam_step, soft_clamp, soft_update

ACTOR_LOG_STD_RANGE = (-5.0, 2.0)
SQUASH_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)

ABLATIONS = ("none", "no-imagination", "no-limitation")

STREAM_NAMES = (
    "batch",
    "next_action",
    "ood_action",
    "img_next_action",
    "limitation",
    "actor",
    "dynamics_sample",
    "eval",
)


class ConfigurationError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, snapshot: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.snapshot = snapshot


@dataclass
class IlqConfig:
    eta: float = 0.9
    delta: float = 0.0
    m_samples: int = 10
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    critic_lr: float = 3e-4
    actor_lr: float = 1e-4
    entropy_auto: bool = True
    init_alpha: float = 0.2
    train_steps: int = 50_000
    eval_interval: int = 1_000
    eval_episodes: int = 10
    hidden: tuple[int, ...] = (64, 64)
    dtype: str = "float32"
    seed: int = 0
    ablation: str = "none"
    dynamics_mode: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("eta must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.m_samples < 1:
            raise ConfigurationError("m_samples must be at least 1")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}")
        if self.dynamics_mode not in ("mean", "sample"):
            raise ConfigurationError("dynamics_mode must be 'mean' or 'sample'")


# ---------------------------------------------------------------------------
# Actor
# ---------------------------------------------------------------------------


class GaussianActor:
    """tanh-squashed diagonal Gaussian policy over [-1, 1]^act_dim."""

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), dtype=np.float64, rng=None):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.net = Mlp((obs_dim, *hidden, 2 * act_dim), dtype=dtype, rng=rng)

    def _heads(self, out):
        mu = out[:, : self.act_dim]
        log_std, dclamp = soft_clamp(out[:, self.act_dim :], *ACTOR_LOG_STD_RANGE)
        return mu, log_std, dclamp

    def sample(self, obs, rng: np.random.Generator, cache: bool = False):
        """Reparameterized draw.  Returns (action, log_prob) plus internals when
        `cache` is set (needed to push gradients back through the draw)."""
        obs = np.asarray(obs, dtype=self.net.dtype)
        out, net_cache = self.net.forward_cached(obs, keep_cache=cache)
        mu, log_std, dclamp = self._heads(out)
        std = np.exp(log_std)
        xi = rng.standard_normal(mu.shape).astype(mu.dtype)
        u = mu + std * xi
        tanh_u = np.tanh(u)
        gauss = -0.5 * (xi * xi) - log_std - 0.5 * LOG_2PI
        correction = np.log(1.0 - tanh_u * tanh_u + SQUASH_EPS)
        log_prob = (gauss - correction).sum(axis=1)
        action = tanh_u
        if not cache:
            return action, log_prob
        internals = {
            "net_cache": net_cache,
            "xi": xi,
            "std": std,
            "tanh_u": tanh_u,
            "dclamp": dclamp,
        }
        return action, log_prob, internals

    def mean_action(self, obs) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=self.net.dtype))
        out = self.net.forward(obs)
        return np.tanh(out[:, : self.act_dim])


# ---------------------------------------------------------------------------
# Critics
# ---------------------------------------------------------------------------


class CriticPair:
    def __init__(self, obs_dim, act_dim, hidden=(64, 64), dtype=np.float64, rng=None):
        kw = dict(hidden_activation="relu", dtype=dtype, final_scale=0.1)
        self.q1 = Mlp((obs_dim + act_dim, *hidden, 1), rng=rng, **kw)
        self.q2 = Mlp((obs_dim + act_dim, *hidden, 1), rng=rng, **kw)
        self.t1 = self.q1.copy()
        self.t2 = self.q2.copy()

    @staticmethod
    def _join(obs, act, dtype):
        return np.concatenate([obs, act], axis=1).astype(dtype)

    def online(self, obs, act):
        x = self._join(obs, act, self.q1.dtype)
        return self.q1.forward(x)[:, 0], self.q2.forward(x)[:, 0]

    def target(self, obs, act):
        x = self._join(obs, act, self.t1.dtype)
        return self.t1.forward(x)[:, 0], self.t2.forward(x)[:, 0]

    def target_min(self, obs, act):
        v1, v2 = self.target(obs, act)
        return np.minimum(v1, v2)

    def soft_update_targets(self, tau: float):
        soft_update(self.t1.param_list(), self.q1.param_list(), tau)
        soft_update(self.t2.param_list(), self.q2.param_list(), tau)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

TAG_IN_SAMPLE = 0
TAG_OOD_IMG = 1
TAG_OOD_LMT = 2


@dataclass
class TargetBundle:
    values: np.ndarray
    tags: np.ndarray
    y_img: np.ndarray
    y_lmt: np.ndarray
    delta: float

    def validate(self):
        finite_img = np.isfinite(self.y_img)
        finite_lmt = np.isfinite(self.y_lmt)
        base = self.values - self.delta
        # tolerance scales with magnitude: subtracting delta back out of a
        # float32 sum can miss the raw branch value by an ulp at that scale
        for finite, ceiling, label in (
            (finite_img, self.y_img, "imagined value"),
            (finite_lmt, self.y_lmt, "behavior ceiling"),
        ):
            if not finite.any():
                continue
            slack = 1e-5 * np.maximum(1.0, np.abs(ceiling[finite]))
            if (base[finite] > ceiling[finite] + slack).any():
                raise AssertionError(f"OOD target exceeds the {label}")
        return self


def in_sample_target(critics, actor, batch, alpha, config, rng):
    """r + gamma*(1-done)*(min target Q at a fresh policy action), soft when
    entropy tuning is on."""
    next_obs = batch["next_observations"]
    a_next, logp = actor.sample(next_obs, rng)
    q_min = critics.target_min(next_obs, a_next)
    boot = q_min - alpha * logp if config.entropy_auto else q_min
    not_done = 1.0 - batch["terminals"].astype(boot.dtype)
    return batch["rewards"] + config.gamma * not_done * boot


def ood_target(critics, actor, dynamics, behavior, obs, ood_actions, config, streams):
    """Imagination value vs behavior ceiling, per row, per the active ablation."""
    n = obs.shape[0]
    dtype = critics.q1.dtype
    y_img = np.full(n, np.nan, dtype=dtype)
    y_lmt = np.full(n, np.nan, dtype=dtype)

    if config.ablation != "no-imagination":
        rng_sample = streams["dynamics_sample"] if config.dynamics_mode == "sample" else None
        s_hat, r_hat = dynamics.predict(
            obs, ood_actions, mode=config.dynamics_mode, rng=rng_sample
        )
        a_img, _ = actor.sample(s_hat, streams["img_next_action"])
        y_img = (r_hat + config.gamma * critics.target_min(s_hat, a_img)).astype(dtype)

    if config.ablation != "no-limitation":
        y_lmt = limitation_value(
            behavior,
            lambda o, a: critics.target(o, a),
            obs,
            config.m_samples,
            streams["limitation"],
        ).astype(dtype)

    if config.ablation == "no-imagination":
        values = y_lmt + config.delta
        tags = np.full(n, TAG_OOD_LMT, dtype=np.int8)
    elif config.ablation == "no-limitation":
        values = y_img + config.delta
        tags = np.full(n, TAG_OOD_IMG, dtype=np.int8)
    else:
        values = np.minimum(y_img, y_lmt) + config.delta
        tags = np.where(y_img <= y_lmt, TAG_OOD_IMG, TAG_OOD_LMT).astype(np.int8)
    return TargetBundle(values, tags, y_img, y_lmt, config.delta).validate()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def critic_loss_and_grads(critics, obs, act, targets_in, ood_actions, targets_ood, eta):
    """Weighted two-term MSE over both critics; targets are constants.

    Returns (loss, grads_q1, grads_q2, q_in_rows, q_ood_rows).  The in-sample
    and OOD passes stay separate so an eta=1 run that skips the OOD pass
    reproduces identical arithmetic on the in-sample side.
    """
    n_in = obs.shape[0]
    loss = 0.0
    all_grads = []
    q_in_rows = None
    q_ood_rows = None
    for net in (critics.q1, critics.q2):
        x_in = CriticPair._join(obs, act, net.dtype)
        q_in, cache_in = net.forward_cached(x_in)
        err_in = q_in[:, 0] - targets_in
        loss_in = float((err_in * err_in).mean())
        grads_in, _ = net.backward(cache_in, (2.0 * eta / n_in) * err_in[:, None])

        if targets_ood is not None:
            n_ood = ood_actions.shape[0]
            x_ood = CriticPair._join(obs, ood_actions, net.dtype)
            q_ood, cache_ood = net.forward_cached(x_ood)
            err_ood = q_ood[:, 0] - targets_ood
            loss_ood = float((err_ood * err_ood).mean())
            grads_ood, _ = net.backward(
                cache_ood, (2.0 * (1.0 - eta) / n_ood) * err_ood[:, None]
            )
            grads = [gi + go for gi, go in zip(grads_in, grads_ood)]
            loss += eta * loss_in + (1.0 - eta) * loss_ood
            if q_ood_rows is None:
                q_ood_rows = q_ood[:, 0]
        else:
            grads = grads_in
            loss += eta * loss_in
        if q_in_rows is None:
            q_in_rows = q_in[:, 0]
        all_grads.append(grads)
    return loss, all_grads[0], all_grads[1], q_in_rows, q_ood_rows


def actor_loss_and_grads(critics, actor, obs, alpha, rng):
    """mean(alpha*logpi - min_j Q_j(s, a)) with a reparameterized through tanh.

    Gradients flow through the action into the critics' inputs but never into
    critic parameters.  Returns (loss, actor_grads, mean_log_prob).
    """
    n = obs.shape[0]
    action, log_prob, internals = actor.sample(obs, rng, cache=True)
    xi = internals["xi"]
    std = internals["std"]
    tanh_u = internals["tanh_u"]
    dclamp = internals["dclamp"]

    x = CriticPair._join(obs, action, critics.q1.dtype)
    q1, c1 = critics.q1.forward_cached(x)
    q2, c2 = critics.q2.forward_cached(x)
    q1 = q1[:, 0]
    q2 = q2[:, 0]
    q_min = np.minimum(q1, q2)
    loss = float((alpha * log_prob - q_min).mean())

    pick_q1 = (q1 <= q2)[:, None].astype(x.dtype)
    ones = np.ones((n, 1), dtype=x.dtype)
    gin1 = critics.q1.input_grad(c1, ones)
    gin2 = critics.q2.input_grad(c2, ones)
    dq_da = np.where(pick_q1 > 0, gin1, gin2)[:, actor.obs_dim :]

    one_minus_t2 = 1.0 - tanh_u * tanh_u
    corr = one_minus_t2 / (one_minus_t2 + SQUASH_EPS)
    dlogp_du = 2.0 * tanh_u * corr
    d_mu = (alpha * dlogp_du - dq_da * one_minus_t2) / n
    dlogp_dlogstd = -1.0 + dlogp_du * std * xi
    d_logstd = (alpha * dlogp_dlogstd - dq_da * one_minus_t2 * std * xi) / n

    upstream = np.concatenate([d_mu, d_logstd * dclamp], axis=1)
    grads, _ = actor.net.backward(internals["net_cache"], upstream)
    return loss, grads, float(log_prob.mean())


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------


class IlqAgent:
    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        config: IlqConfig,
        dynamics: GaussianDynamics | None,
        behavior: DiffusionBehavior | None,
    ):
        needs_img = config.ablation != "no-imagination" and config.eta < 1.0
        needs_lmt = config.ablation != "no-limitation" and config.eta < 1.0
        if needs_img and (dynamics is None or not dynamics.trained):
            raise ConfigurationError("dynamics model must be pre-trained before agent training")
        if needs_lmt and (behavior is None or not behavior.trained):
            raise ConfigurationError("behavior model must be pre-trained before agent training")
        self.config = config
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.dynamics = dynamics
        self.behavior = behavior
        dtype = np.dtype(config.dtype)
        init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x11]))
        self.actor = GaussianActor(obs_dim, act_dim, config.hidden, dtype, init_rng)
        self.critics = CriticPair(obs_dim, act_dim, config.hidden, dtype, init_rng)
        self.opt_q1 = AdamState.for_params(self.critics.q1.param_list(), config.critic_lr)
        self.opt_q2 = AdamState.for_params(self.critics.q2.param_list(), config.critic_lr)
        self.opt_actor = AdamState.for_params(self.actor.net.param_list(), config.actor_lr)
        self.log_alpha = np.array([math.log(config.init_alpha)], dtype=np.float64)
        self.opt_alpha = AdamState.for_params([self.log_alpha], config.actor_lr)
        self.target_entropy = -float(act_dim)
        self.steps_done = 0
        self.max_abs_q = 0.0
        self.max_q_signed = -math.inf

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def update_alpha(self, mean_log_prob: float) -> None:
        """One temperature step toward the entropy target: the gradient of
        -log_alpha * (mean_log_prob + target_entropy) w.r.t. log_alpha."""
        grad = -(mean_log_prob + self.target_entropy)
        adam_step(self.opt_alpha, [self.log_alpha], [np.array([grad])])

    def act(self, obs) -> np.ndarray:
        """Deterministic (mean) action for evaluation."""
        return self.actor.mean_action(obs)[0]

    def policy(self):
        return lambda obs: self.act(obs)

    # -- one optimization step -------------------------------------------------

    def train_step(self, data: dict, streams: dict, skip_ood: bool = False) -> dict:
        cfg = self.config
        n = data["observations"].shape[0]
        idx = streams["batch"].integers(0, n, size=cfg.batch_size)
        batch = {k: v[idx] for k, v in data.items()}
        obs = batch["observations"]

        targets_in = in_sample_target(
            self.critics, self.actor, batch, self.alpha, cfg, streams["next_action"]
        )

        bundle = None
        ood_actions = None
        targets_ood = None
        if not skip_ood:
            ood_actions, _ = self.actor.sample(obs, streams["ood_action"])
            bundle = ood_target(
                self.critics, self.actor, self.dynamics, self.behavior,
                obs, ood_actions, cfg, streams,
            )
            targets_ood = bundle.values

        # overflow to inf/nan is the divergence signal, not a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            loss_q, g1, g2, q_in, q_ood = critic_loss_and_grads(
                self.critics, obs, batch["actions"], targets_in, ood_actions, targets_ood, cfg.eta
            )
            loss_pi, g_actor, mean_logp = actor_loss_and_grads(
                self.critics, self.actor, obs, self.alpha, streams["actor"]
            )
        if not (math.isfinite(loss_q) and math.isfinite(loss_pi)):
            raise TrainingDivergedError(self.steps_done, self._snapshot(loss_q, loss_pi, q_in))

        adam_step(self.opt_q1, self.critics.q1.param_list(), g1)
        adam_step(self.opt_q2, self.critics.q2.param_list(), g2)
        adam_step(self.opt_actor, self.actor.net.param_list(), g_actor)
        if cfg.entropy_auto:
            self.update_alpha(mean_logp)
        self.critics.soft_update_targets(cfg.tau)
        self.steps_done += 1

        step_max = float(np.abs(q_in).max())
        step_signed = float(q_in.max())
        if q_ood is not None:
            step_max = max(step_max, float(np.abs(q_ood).max()))
            step_signed = max(step_signed, float(q_ood.max()))
        self.max_abs_q = max(self.max_abs_q, step_max)
        self.max_q_signed = max(self.max_q_signed, step_signed)

        metrics = {
            "critic_loss": loss_q,
            "actor_loss": loss_pi,
            "q_in_mean": float(q_in.mean()),
            "q_ood_mean": float(q_ood.mean()) if q_ood is not None else math.nan,
            "y_img_mean": math.nan,
            "y_lmt_mean": math.nan,
            "frac_lmt": math.nan,
            "alpha": self.alpha,
            "max_abs_q": step_max,
        }
        if bundle is not None:
            if np.isfinite(bundle.y_img).any():
                metrics["y_img_mean"] = float(bundle.y_img.mean())
            if np.isfinite(bundle.y_lmt).any():
                metrics["y_lmt_mean"] = float(bundle.y_lmt.mean())
            metrics["frac_lmt"] = float((bundle.tags == TAG_OOD_LMT).mean())
            metrics["target_ood_mean"] = float(bundle.values.mean())
        else:
            metrics["target_ood_mean"] = math.nan
        return metrics

    def _snapshot(self, loss_q, loss_pi, q_in) -> dict:
        return {
            "step": self.steps_done,
            "critic_loss": loss_q,
            "actor_loss": loss_pi,
            "q_in_mean": float(np.mean(q_in)) if q_in is not None else math.nan,
            "max_abs_q": self.max_abs_q,
            "alpha": self.alpha,
        }

    # -- persistence ------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {"log_alpha": self.log_alpha}
        groups = {
            "actor": self.actor.net,
            "q1": self.critics.q1,
            "q2": self.critics.q2,
            "t1": self.critics.t1,
            "t2": self.critics.t2,
        }
        for prefix, net in groups.items():
            for i, p in enumerate(net.param_list()):
                tensors[f"{prefix}.{i}"] = p
        return tensors

    def meta(self) -> dict:
        cfg = self.config
        return {
            "kind": "ilq_agent",
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "steps_done": self.steps_done,
            "config": {
                "eta": cfg.eta, "delta": cfg.delta, "m_samples": cfg.m_samples,
                "gamma": cfg.gamma, "tau": cfg.tau, "batch_size": cfg.batch_size,
                "critic_lr": cfg.critic_lr, "actor_lr": cfg.actor_lr,
                "entropy_auto": cfg.entropy_auto, "init_alpha": cfg.init_alpha,
                "train_steps": cfg.train_steps, "eval_interval": cfg.eval_interval,
                "eval_episodes": cfg.eval_episodes, "hidden": list(cfg.hidden),
                "dtype": cfg.dtype, "seed": cfg.seed, "ablation": cfg.ablation,
                "dynamics_mode": cfg.dynamics_mode,
            },
        }

    @classmethod
    def from_state(cls, tensors, meta, dynamics=None, behavior=None) -> "IlqAgent":
        raw = dict(meta["config"])
        raw["hidden"] = tuple(raw["hidden"])
        config = IlqConfig(**raw)
        agent = cls.__new__(cls)
        agent.config = config
        agent.obs_dim = meta["obs_dim"]
        agent.act_dim = meta["act_dim"]
        agent.dynamics = dynamics
        agent.behavior = behavior
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(0)
        agent.actor = GaussianActor(agent.obs_dim, agent.act_dim, config.hidden, dtype, rng)
        agent.critics = CriticPair(agent.obs_dim, agent.act_dim, config.hidden, dtype, rng)
        groups = {
            "actor": agent.actor.net,
            "q1": agent.critics.q1,
            "q2": agent.critics.q2,
            "t1": agent.critics.t1,
            "t2": agent.critics.t2,
        }
        for prefix, net in groups.items():
            net.set_params([tensors[f"{prefix}.{i}"] for i in range(len(net.param_list()))])
        agent.opt_q1 = AdamState.for_params(agent.critics.q1.param_list(), config.critic_lr)
        agent.opt_q2 = AdamState.for_params(agent.critics.q2.param_list(), config.critic_lr)
        agent.opt_actor = AdamState.for_params(agent.actor.net.param_list(), config.actor_lr)
        agent.log_alpha = tensors["log_alpha"].astype(np.float64).copy()
        agent.opt_alpha = AdamState.for_params([agent.log_alpha], config.actor_lr)
        agent.target_entropy = -float(agent.act_dim)
        agent.steps_done = int(meta.get("steps_done", 0))
        agent.max_abs_q = 0.0
        return agent


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    diverged: bool = False
    divergence_step: int | None = None
    max_abs_q: float = 0.0
    max_q_signed: float = -math.inf
    eval_returns: list[float] = field(default_factory=list)


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named, independent generators derived from one root seed."""
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(child) for name, child in zip(STREAM_NAMES, children)}


def train(
    agent: IlqAgent,
    dataset,
    spec=None,
    random_ref: float | None = None,
    expert_ref: float | None = None,
    skip_ood: bool = False,
    on_row=None,
    stop_when_max_q_exceeds: float | None = None,
) -> TrainResult:
    """Run config.train_steps optimization steps with periodic evaluation.

    Divergence (non-finite loss) is caught, recorded, and ends the run early;
    the result carries everything observed up to that point.
    """
    cfg = agent.config
    data = {
        "observations": dataset.observations.astype(np.dtype(cfg.dtype)),
        "actions": dataset.actions.astype(np.dtype(cfg.dtype)),
        "rewards": dataset.rewards.astype(np.dtype(cfg.dtype)),
        "next_observations": dataset.next_observations.astype(np.dtype(cfg.dtype)),
        "terminals": dataset.terminals,
    }
    streams = make_streams(cfg.seed)
    result = TrainResult()
    acc: dict[str, list] = {}

    def flush_row(step):
        row = {"step": step}
        for key in ("critic_loss", "actor_loss", "q_in_mean", "q_ood_mean",
                    "y_img_mean", "y_lmt_mean", "frac_lmt", "target_ood_mean",
                    "alpha"):
            vals = [v for v in acc.get(key, []) if not math.isnan(v)]
            row[key] = float(np.mean(vals)) if vals else math.nan
        max_vals = [v for v in acc.get("max_abs_q", []) if not math.isnan(v)]
        row["max_abs_q"] = float(np.max(max_vals)) if max_vals else math.nan
        if spec is not None:
            eval_seed = int(streams["eval"].integers(0, 2**31 - 1))
            mean_ret, _ = evaluate_policy(spec, agent.policy(), cfg.eval_episodes, eval_seed)
            row["eval_return"] = mean_ret
            result.eval_returns.append(mean_ret)
            if random_ref is not None and expert_ref is not None:
                row["normalized_score"] = normalized_score(mean_ret, random_ref, expert_ref)
            else:
                row["normalized_score"] = math.nan
        else:
            row["eval_return"] = math.nan
            row["normalized_score"] = math.nan
        acc.clear()
        result.rows.append(row)
        if on_row is not None:
            on_row(row)

    for step in range(1, cfg.train_steps + 1):
        try:
            metrics = agent.train_step(data, streams, skip_ood=skip_ood)
        except TrainingDivergedError as exc:
            result.diverged = True
            result.divergence_step = exc.step
            break
        for key, value in metrics.items():
            acc.setdefault(key, []).append(value)
        if step % cfg.eval_interval == 0:
            flush_row(step)
        if stop_when_max_q_exceeds is not None and agent.max_abs_q > stop_when_max_q_exceeds:
            break
    result.max_abs_q = agent.max_abs_q
    result.max_q_signed = agent.max_q_signed
    return result
