"""In-repo environments, behavior policies, offline dataset generation, and scoring.

Two desk-scale tasks: a slippery gridworld (discrete) and a 2-D point mass with
acceleration actions (continuous).  Behavior levels emulate the usual offline-RL
data regimes: random, medium, and two mixtures.  Episode timeout never marks a
transition terminal (bootstrapping continues through timeouts); goal absorption
does.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class EnvError(ValueError):
    pass


class UndefinedMetricError(EnvError):
    """Normalized score with equal random/expert references."""


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

GRID_ACTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))  # right, left, up, down


@dataclass(frozen=True)
class GridworldSpec:
    width: int = 8
    height: int = 8
    walls: frozenset = frozenset()
    goal: tuple[int, int] = (7, 7)
    step_reward: float = -0.05
    goal_reward: float = 1.0
    slip_prob: float = 0.1
    horizon: int = 100

    def __post_init__(self):
        if self.goal in self.walls:
            raise EnvError("goal cell sits inside a wall")
        if not 0.0 <= self.slip_prob < 1.0:
            raise EnvError("slip_prob must lie in [0, 1)")

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def act_dim(self) -> int:
        return 1

    @property
    def r_max(self) -> float:
        return max(abs(self.step_reward), abs(self.goal_reward))


@dataclass(frozen=True)
class PointMassSpec:
    """Position/velocity box world; reward is -distance to goal plus a goal bonus."""

    v_max: float = 1.0
    dt: float = 0.1
    goal: tuple[float, float] = (0.6, 0.6)
    goal_radius: float = 0.15
    goal_bonus: float = 5.0
    horizon: int = 60
    obs_noise_std: float = 0.0
    start_low: tuple[float, float] = (-0.9, -0.9)
    start_high: tuple[float, float] = (0.9, 0.9)

    def __post_init__(self):
        if self.obs_noise_std < 0:
            raise EnvError("obs_noise_std must be nonnegative")

    @property
    def obs_dim(self) -> int:
        return 4

    @property
    def act_dim(self) -> int:
        return 2

    @property
    def r_max(self) -> float:
        return 2.0 * math.sqrt(2.0) + self.goal_bonus


@dataclass
class TransitionDataset:
    """Flat offline transitions; all arrays are float32/bool with leading dim n."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    terminals: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def validate(self) -> "TransitionDataset":
        arrays = (
            self.observations,
            self.actions,
            self.rewards,
            self.next_observations,
            self.terminals,
        )
        n = self.observations.shape[0]
        if any(a.shape[0] != n for a in arrays):
            raise EnvError("dataset arrays disagree on leading dimension")
        if self.obs_dim < 1 or self.act_dim < 1:
            raise EnvError("dataset dims undefined (empty source?)")
        for a in arrays[:4]:
            if not np.isfinite(a).all():
                raise EnvError("dataset contains non-finite entries")
        return self


@dataclass(frozen=True)
class BehaviorPolicyLevel:
    """A data-collection regime: base controller noise plus optional mixing."""

    kind: str
    noise_std: float = 0.0
    mixture_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in LEVELS_ORDER:
            raise EnvError(f"unknown behavior level {self.kind!r}")
        if self.mixture_weights is not None:
            if abs(sum(self.mixture_weights) - 1.0) > 1e-9:
                raise EnvError("mixture weights must sum to 1")


LEVELS_ORDER = ("random", "medium", "medium_replay_mixture", "medium_expert_mixture")

EXPERT_NOISE_STD = 0.02
MEDIUM_NOISE_STD = 1.3

LEVELS = {
    "random": BehaviorPolicyLevel("random"),
    "medium": BehaviorPolicyLevel("medium", noise_std=MEDIUM_NOISE_STD),
    "medium_replay_mixture": BehaviorPolicyLevel(
        "medium_replay_mixture", noise_std=MEDIUM_NOISE_STD, mixture_weights=(0.5, 0.5)
    ),
    "medium_expert_mixture": BehaviorPolicyLevel(
        "medium_expert_mixture", noise_std=MEDIUM_NOISE_STD, mixture_weights=(0.5, 0.5)
    ),
}


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def env_step(spec, state, action, rng: np.random.Generator, t: int = 0):
    """One transition.  `done` is True at the goal or when t+1 reaches the horizon."""
    if isinstance(spec, PointMassSpec):
        return _point_mass_step(spec, state, action, t)
    if isinstance(spec, GridworldSpec):
        return _gridworld_step(spec, state, action, rng, t)
    raise EnvError(f"unknown spec type {type(spec).__name__}")


def _point_mass_step(spec: PointMassSpec, state, action, t):
    state = np.asarray(state, dtype=np.float64)
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    vel = np.clip(state[2:] + a * spec.dt, -spec.v_max, spec.v_max)
    pos = np.clip(state[:2] + vel * spec.dt, -1.0, 1.0)
    next_state = np.concatenate([pos, vel])
    dist = float(np.linalg.norm(pos - np.asarray(spec.goal)))
    at_goal = dist <= spec.goal_radius
    reward = -dist + (spec.goal_bonus if at_goal else 0.0)
    done = at_goal or (t + 1 >= spec.horizon)
    return next_state, reward, done


def _gridworld_step(spec: GridworldSpec, state, action, rng, t):
    x, y = int(state[0]), int(state[1])
    a = int(np.clip(int(np.round(float(np.asarray(action).reshape(-1)[0]))), 0, 3))
    if spec.slip_prob > 0.0 and rng.random() < spec.slip_prob:
        a = int(rng.integers(0, 4))
    dx, dy = GRID_ACTIONS[a]
    nx, ny = x + dx, y + dy
    if not (0 <= nx < spec.width and 0 <= ny < spec.height) or (nx, ny) in spec.walls:
        nx, ny = x, y
    at_goal = (nx, ny) == spec.goal
    reward = spec.goal_reward if at_goal else spec.step_reward
    done = at_goal or (t + 1 >= spec.horizon)
    return np.array([nx, ny], dtype=np.float64), reward, done


def _assert_reward_bound(spec, reward):
    if abs(reward) > spec.r_max + 1e-9:
        raise EnvError(f"emitted reward {reward} exceeds r_max {spec.r_max}")


# ---------------------------------------------------------------------------
# Behavior policies
# ---------------------------------------------------------------------------

PD_KP = 3.0
PD_KD = 1.8


def pd_action(spec: PointMassSpec, state) -> np.ndarray:
    """Proportional-derivative push toward the goal, clipped to the action box."""
    state = np.asarray(state, dtype=np.float64)
    err = np.asarray(spec.goal) - state[:2]
    return np.clip(PD_KP * err - PD_KD * state[2:], -1.0, 1.0)


def grid_distances(spec: GridworldSpec) -> np.ndarray:
    """BFS step counts to the goal over open cells (inf where unreachable)."""
    dist = np.full((spec.width, spec.height), np.inf)
    gx, gy = spec.goal
    dist[gx, gy] = 0.0
    queue = deque([(gx, gy)])
    while queue:
        cx, cy = queue.popleft()
        for dx, dy in GRID_ACTIONS:
            nx, ny = cx + dx, cy + dy
            if not (0 <= nx < spec.width and 0 <= ny < spec.height):
                continue
            if (nx, ny) in spec.walls or np.isfinite(dist[nx, ny]):
                continue
            dist[nx, ny] = dist[cx, cy] + 1.0
            queue.append((nx, ny))
    return dist


def _grid_greedy_action(spec: GridworldSpec, dist: np.ndarray, state) -> int:
    x, y = int(state[0]), int(state[1])
    best_a, best_d = 0, np.inf
    for a, (dx, dy) in enumerate(GRID_ACTIONS):
        nx, ny = x + dx, y + dy
        if not (0 <= nx < spec.width and 0 <= ny < spec.height) or (nx, ny) in spec.walls:
            nx, ny = x, y
        if dist[nx, ny] < best_d:
            best_a, best_d = a, dist[nx, ny]
    return best_a


def _component_policy(spec, name: str, noise_std: float):
    """A stochastic data-collection policy: (state, rng) -> action."""
    if isinstance(spec, PointMassSpec):
        if name == "random":
            return lambda s, rng: rng.uniform(-1.0, 1.0, size=2)
        std = EXPERT_NOISE_STD if name == "expert" else noise_std
        return lambda s, rng: np.clip(pd_action(spec, s) + rng.normal(0.0, std, size=2), -1.0, 1.0)
    dist = grid_distances(spec)
    eps = {"random": 1.0, "expert": 0.0, "medium": 0.25}[name]
    def policy(s, rng):
        if eps > 0.0 and rng.random() < eps:
            return np.array([rng.integers(0, 4)], dtype=np.float64)
        return np.array([_grid_greedy_action(spec, dist, s)], dtype=np.float64)
    return policy


MIXTURE_COMPONENTS = {
    "medium_replay_mixture": ("random", "medium"),
    "medium_expert_mixture": ("medium", "expert"),
}


def _episode_policies(spec, level: BehaviorPolicyLevel):
    if level.kind in MIXTURE_COMPONENTS:
        names = MIXTURE_COMPONENTS[level.kind]
        weights = level.mixture_weights or (0.5, 0.5)
        return [_component_policy(spec, n, level.noise_std) for n in names], weights
    return [_component_policy(spec, level.kind, level.noise_std)], (1.0,)


def reset_state(spec, rng: np.random.Generator) -> np.ndarray:
    if isinstance(spec, PointMassSpec):
        pos = rng.uniform(spec.start_low, spec.start_high)
        return np.concatenate([pos, np.zeros(2)])
    open_cells = [
        (x, y)
        for x in range(spec.width)
        for y in range(spec.height)
        if (x, y) not in spec.walls and (x, y) != spec.goal
    ]
    return np.array(open_cells[rng.integers(len(open_cells))], dtype=np.float64)


def _observe(spec, state, rng):
    if isinstance(spec, PointMassSpec) and spec.obs_noise_std > 0.0:
        return state + rng.normal(0.0, spec.obs_noise_std, size=state.shape)
    return state.copy()


# ---------------------------------------------------------------------------
# Dataset generation / evaluation
# ---------------------------------------------------------------------------


def generate_dataset(spec, level, n_transitions: int, seed: int) -> TransitionDataset:
    """Roll the level's policy until n_transitions are collected (reproducible)."""
    if n_transitions <= 0:
        raise EnvError("n_transitions must be positive")
    if isinstance(level, str):
        level = LEVELS[level]
    policies, weights = _episode_policies(spec, level)
    seq = np.random.SeedSequence(seed)
    picker = np.random.default_rng(seq.spawn(1)[0])

    obs_rows, act_rows, rew_rows, next_rows, term_rows = [], [], [], [], []
    episode_returns = []
    while len(rew_rows) < n_transitions:
        rng = np.random.default_rng(seq.spawn(1)[0])
        policy = policies[picker.choice(len(policies), p=weights)]
        state = reset_state(spec, rng)
        obs = _observe(spec, state, rng)
        ep_return, t, done = 0.0, 0, False
        while not done:
            action = policy(obs, rng)
            next_state, reward, done = env_step(spec, state, action, rng, t)
            _assert_reward_bound(spec, reward)
            at_goal = done and (t + 1 < spec.horizon or _goal_reached(spec, next_state))
            next_obs = _observe(spec, next_state, rng)
            obs_rows.append(obs)
            act_rows.append(np.asarray(action, dtype=np.float64))
            rew_rows.append(reward)
            next_rows.append(next_obs)
            term_rows.append(at_goal)
            ep_return += reward
            state, obs, t = next_state, next_obs, t + 1
        episode_returns.append(ep_return)

    dataset = TransitionDataset(
        observations=np.asarray(obs_rows, dtype=np.float32)[:n_transitions],
        actions=np.asarray(act_rows, dtype=np.float32)[:n_transitions],
        rewards=np.asarray(rew_rows, dtype=np.float32)[:n_transitions],
        next_observations=np.asarray(next_rows, dtype=np.float32)[:n_transitions],
        terminals=np.asarray(term_rows, dtype=bool)[:n_transitions],
        metadata={
            "env_tag": type(spec).__name__,
            "source_tag": level.kind,
            "seed": seed,
            "behavior_mean_return": float(np.mean(episode_returns)),
        },
    )
    return dataset.validate()


def _goal_reached(spec, state) -> bool:
    if isinstance(spec, PointMassSpec):
        return float(np.linalg.norm(np.asarray(state[:2]) - np.asarray(spec.goal))) <= spec.goal_radius
    return (int(state[0]), int(state[1])) == spec.goal


def evaluate_policy(spec, policy, n_episodes: int, seed: int) -> tuple[float, float]:
    """Mean/std of episode returns under a deterministic policy obs -> action."""
    if n_episodes < 1:
        raise EnvError("n_episodes must be at least 1")
    seq = np.random.SeedSequence(seed)
    returns = []
    for child in seq.spawn(n_episodes):
        rng = np.random.default_rng(child)
        state = reset_state(spec, rng)
        obs = _observe(spec, state, rng)
        total, t, done = 0.0, 0, False
        while not done:
            action = policy(obs)
            state, reward, done = env_step(spec, state, action, rng, t)
            _assert_reward_bound(spec, reward)
            obs = _observe(spec, state, rng)
            total += reward
            t += 1
        returns.append(total)
    returns = np.asarray(returns)
    return float(returns.mean()), float(returns.std())


def behavior_return(spec, level, n_episodes: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo mean/std return of a data-collection level's stochastic policy."""
    if isinstance(level, str):
        level = LEVELS[level]
    policies, weights = _episode_policies(spec, level)
    seq = np.random.SeedSequence(seed)
    picker = np.random.default_rng(seq.spawn(1)[0])
    returns = []
    for child in seq.spawn(n_episodes):
        rng = np.random.default_rng(child)
        policy = policies[picker.choice(len(policies), p=weights)]
        state = reset_state(spec, rng)
        obs = _observe(spec, state, rng)
        total, t, done = 0.0, 0, False
        while not done:
            action = policy(obs, rng)
            state, reward, done = env_step(spec, state, action, rng, t)
            obs = _observe(spec, state, rng)
            total += reward
            t += 1
        returns.append(total)
    returns = np.asarray(returns)
    return float(returns.mean()), float(returns.std())


def random_reference(spec, n_episodes: int = 100, seed: int = 0) -> float:
    return behavior_return(spec, LEVELS["random"], n_episodes, seed)[0]


def expert_reference(spec, n_episodes: int = 100, seed: int = 0) -> float:
    if isinstance(spec, PointMassSpec):
        policy = lambda obs: pd_action(spec, obs)
    else:
        dist = grid_distances(spec)
        policy = lambda obs: np.array([_grid_greedy_action(spec, dist, obs)], dtype=np.float64)
    return evaluate_policy(spec, policy, n_episodes, seed)[0]


def normalized_score(learned: float, random_ref: float, expert_ref: float) -> float:
    """100 * (learned - random) / (expert - random)."""
    if expert_ref == random_ref:
        raise UndefinedMetricError("expert and random references coincide")
    return 100.0 * (learned - random_ref) / (expert_ref - random_ref)
