"""Exact finite-MDP machinery: Bellman-style backups, value iteration, and bound audits.

Everything here is dense numpy over small state/action spaces.  Q-tables are plain
float arrays of shape (n_states, n_actions); the three backups are pure functions
from a table to a fresh table.  Argmax ties break toward the lowest action index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_ATOL = 1e-12

QTable = np.ndarray  # shape (n_states, n_actions), float64


class TabularError(ValueError):
    """Invalid tabular inputs (shapes, probabilities, supports, embeddings)."""


class DimensionError(TabularError):
    pass


class InvalidSupportError(TabularError):
    pass


class InvalidEmbeddingError(TabularError):
    pass


class DivergenceError(RuntimeError):
    """Value iteration produced a non-finite table."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite Q-table at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TabularMdp:
    """A finite MDP with an action embedding for Lipschitz/divergence measurements.

    transition: P[s, a, s'] with rows summing to 1
    reward: r[s, a], bounded in [-r_max, r_max]
    action_embedding: one point in [0, 1]^d per action
    """

    transition: np.ndarray
    reward: np.ndarray
    r_max: float
    gamma: float
    initial_dist: np.ndarray
    action_embedding: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise DimensionError(f"inconsistent P/r shapes {p.shape} vs {r.shape}")
        if p.min() < 0 or np.abs(p.sum(axis=2) - 1.0).max() > PROB_ATOL:
            raise TabularError("transition rows must be probability vectors")
        if np.abs(r).max() > self.r_max + PROB_ATOL:
            raise TabularError("rewards exceed r_max")
        if not 0.0 <= self.gamma < 1.0:
            raise TabularError("gamma must lie in [0, 1)")
        rho = np.asarray(self.initial_dist, dtype=np.float64)
        if rho.shape != (p.shape[0],) or abs(rho.sum() - 1.0) > PROB_ATOL or rho.min() < 0:
            raise TabularError("initial_dist must be a probability vector over states")
        emb = np.asarray(self.action_embedding, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != p.shape[1]:
            raise DimensionError("action_embedding must have one row per action")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "action_embedding", emb)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class SupportMask:
    """Boolean table over (s, a): True iff the behavior policy can emit a at s."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise DimensionError("support mask must be 2-D")
        if not m.any(axis=1).all():
            raise InvalidSupportError("every state needs at least one supported action")
        object.__setattr__(self, "mask", m)

    @classmethod
    def full(cls, n_states: int, n_actions: int) -> "SupportMask":
        return cls(np.ones((n_states, n_actions), dtype=bool))


@dataclass(frozen=True)
class EmpiricalModel:
    """Estimated dynamics (p_hat, r_hat) plus measured concentration errors.

    Rows with zero visit counts fall back to a uniform transition row and reward 0.
    The two zeta fields are measured against the true MDP over supported pairs only.
    """

    p_hat: np.ndarray
    r_hat: np.ndarray
    counts: np.ndarray
    zeta_r_over_sqrt_d: float
    zeta_p_over_sqrt_d: float

    def __post_init__(self):
        visited = self.counts > 0
        row_sums = self.p_hat.sum(axis=2)
        if np.abs(row_sums[visited] - 1.0).max(initial=0.0) > PROB_ATOL:
            raise TabularError("visited p_hat rows must sum to 1")
        if self.zeta_r_over_sqrt_d < 0 or self.zeta_p_over_sqrt_d < 0:
            raise TabularError("measured zeta values must be nonnegative")

    @classmethod
    def exact(cls, mdp: TabularMdp) -> "EmpiricalModel":
        """The zero-error model: p_hat = P, r_hat = r, both zetas 0."""
        counts = np.ones((mdp.n_states, mdp.n_actions), dtype=np.int64)
        return cls(mdp.transition.copy(), mdp.reward.copy(), counts, 0.0, 0.0)

    @classmethod
    def from_samples(
        cls,
        mdp: TabularMdp,
        support: SupportMask,
        samples_per_pair: int,
        rng: np.random.Generator,
    ) -> "EmpiricalModel":
        """Count-based estimate from `samples_per_pair` draws at each supported pair."""
        s_n, a_n = mdp.n_states, mdp.n_actions
        p_hat = np.full((s_n, a_n, s_n), 1.0 / s_n)
        r_hat = np.zeros((s_n, a_n))
        counts = np.zeros((s_n, a_n), dtype=np.int64)
        for s in range(s_n):
            for a in range(a_n):
                if not support.mask[s, a]:
                    continue
                draws = rng.choice(s_n, size=samples_per_pair, p=mdp.transition[s, a])
                freq = np.bincount(draws, minlength=s_n) / samples_per_pair
                p_hat[s, a] = freq
                r_hat[s, a] = mdp.reward[s, a]
                counts[s, a] = samples_per_pair
        zr = float(np.abs(r_hat - mdp.reward)[support.mask].max(initial=0.0))
        zp = float(np.abs(p_hat - mdp.transition).sum(axis=2)[support.mask].max(initial=0.0))
        return cls(p_hat, r_hat, counts, zr, zp)


@dataclass(frozen=True)
class FixedPointResult:
    q: QTable
    iterations: int
    final_residual: float
    converged: bool


@dataclass(frozen=True)
class BoundReport:
    """Measured LHS/RHS of the three action-value gap bounds plus the inputs used."""

    lhs_thm2: float
    rhs_thm2: float
    lhs_thm3: float
    rhs_thm3: float
    lhs_thm4: float
    rhs_thm4: float
    epsilon_pi: float
    epsilon_p: float
    lipschitz_l: float
    satisfied: tuple[bool, bool, bool]


def _check_q(q: QTable, mdp: TabularMdp) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(f"Q shape {q.shape} does not match MDP {mdp.n_states}x{mdp.n_actions}")
    return q


def _supported_max(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-state max of q over supported actions."""
    return np.where(mask, q, -np.inf).max(axis=1)


def _expected_next(transition: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sum_s' P[s,a,s'] v[s'] via one flat matmul (faster than batched @)."""
    s_n, a_n, _ = transition.shape
    return (transition.reshape(s_n * a_n, s_n) @ v).reshape(s_n, a_n)


def bellman_backup(q: QTable, mdp: TabularMdp) -> QTable:
    """Optimality backup: out[s,a] = r[s,a] + gamma * sum_s' P[s,a,s'] max_a' q[s',a']."""
    q = _check_q(q, mdp)
    v = q.max(axis=1)
    return mdp.reward + mdp.gamma * _expected_next(mdp.transition, v)


def support_bellman_backup(q: QTable, mdp: TabularMdp, support: SupportMask) -> QTable:
    """Optimality backup with the bootstrap max restricted to supported actions."""
    q = _check_q(q, mdp)
    if support.mask.shape != q.shape:
        raise InvalidSupportError("support mask shape does not match MDP")
    v = _supported_max(q, support.mask)
    return mdp.reward + mdp.gamma * _expected_next(mdp.transition, v)


def ilb_backup(
    q: QTable,
    mdp: TabularMdp,
    model: EmpiricalModel,
    support: SupportMask,
    delta: float,
) -> QTable:
    """Imagination-limited backup.

    Supported pairs get the standard optimality backup under the true dynamics.
    Unsupported pairs get min(imagined one-step value under the empirical model,
    max supported Q at the state) + delta.  The bootstrap max runs over all
    actions (greedy policy-improvement limit).
    """
    q = _check_q(q, mdp)
    if support.mask.shape != q.shape:
        raise InvalidSupportError("support mask shape does not match MDP")
    v = q.max(axis=1)
    in_sample = mdp.reward + mdp.gamma * _expected_next(mdp.transition, v)
    y_img = model.r_hat + mdp.gamma * _expected_next(model.p_hat, v)
    y_lmt = _supported_max(q, support.mask)[:, None]
    ood = np.minimum(y_img, np.broadcast_to(y_lmt, q.shape)) + delta
    return np.where(support.mask, in_sample, ood)


def value_iterate(
    step,
    q0: QTable,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    contraction: float | None = None,
) -> FixedPointResult:
    """Iterate q <- step(q) until the sup-norm update is small enough.

    With `contraction` set to the backup's modulus gamma, the stopping threshold
    tightens to tol*(1-gamma)/2 so the returned table is within ~tol of the true
    fixed point (a raw update threshold of tol only guarantees gamma*tol/(1-gamma)).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    threshold = tol
    if contraction is not None:
        threshold = tol * (1.0 - contraction) / 2.0
    q = np.array(q0, dtype=np.float64)
    resid = np.inf
    for i in range(1, max_iter + 1):
        q_next = step(q)
        if not np.isfinite(q_next).all():
            raise DivergenceError(i)
        resid = float(np.abs(q_next - q).max())
        q = q_next
        if resid <= threshold:
            return FixedPointResult(q, i, resid, True)
    return FixedPointResult(q, max_iter, resid, False)


def lipschitz_constant(mdp: TabularMdp) -> float:
    """Smallest L with |r(s,a1)-r(s,a2)| <= L*||embed(a1)-embed(a2)||_inf everywhere."""
    emb = mdp.action_embedding
    best = 0.0
    for i in range(mdp.n_actions):
        for j in range(i + 1, mdp.n_actions):
            gap = float(np.abs(emb[i] - emb[j]).max())
            if gap == 0.0:
                raise InvalidEmbeddingError(f"actions {i} and {j} share an embedding")
            num = float(np.abs(mdp.reward[:, i] - mdp.reward[:, j]).max())
            best = max(best, num / gap)
    return best


def policy_divergences(
    mdp: TabularMdp, pi: np.ndarray, beta: np.ndarray
) -> tuple[float, float]:
    """(eps_pi, eps_p) for two deterministic state->action maps.

    eps_pi: max_s ||embed(pi(s)) - embed(beta(s))||_inf
    eps_p:  max abs row sum of P^pi - P^beta
    """
    pi = np.asarray(pi, dtype=np.int64)
    beta = np.asarray(beta, dtype=np.int64)
    states = np.arange(mdp.n_states)
    emb = mdp.action_embedding
    eps_pi = float(np.abs(emb[pi] - emb[beta]).max(axis=1).max())
    p_pi = mdp.transition[states, pi]
    p_beta = mdp.transition[states, beta]
    eps_p = float(np.abs(p_pi - p_beta).sum(axis=1).max())
    return eps_pi, eps_p


def imagination_table(q: QTable, mdp: TabularMdp, model: EmpiricalModel) -> np.ndarray:
    """y_img[s,a] = r_hat + gamma * sum_s' p_hat * max_a' q[s',a'] for every pair."""
    v = q.max(axis=1)
    return model.r_hat + mdp.gamma * _expected_next(model.p_hat, v)


AUDIT_SLACK = 1e-9


def audit_theorems(
    mdp: TabularMdp,
    model: EmpiricalModel,
    support: SupportMask,
    delta: float,
    vi_tol: float = 1e-10,
    max_iter: int = 1_000_000,
) -> BoundReport:
    """Measure both sides of the three action-value gap bounds on one instance.

    Q_beta* is the support-constrained optimality fixed point; pi is greedy over
    all actions w.r.t. it, beta greedy over supported actions.  Each bound's RHS
    is assembled from the measured Lipschitz constant, policy divergences, the
    model's measured zeta errors, and (|S|, r_max, gamma, delta).
    """
    gamma, s_n, r_max = mdp.gamma, mdp.n_states, mdp.r_max
    q_beta = value_iterate(
        lambda t: support_bellman_backup(t, mdp, support),
        np.zeros((s_n, mdp.n_actions)),
        tol=vi_tol,
        max_iter=max_iter,
        contraction=gamma,
    ).q
    pi = q_beta.argmax(axis=1)
    beta = np.where(support.mask, q_beta, -np.inf).argmax(axis=1)
    eps_pi, eps_p = policy_divergences(mdp, pi, beta)
    ell = lipschitz_constant(mdp)
    horizon = 1.0 / (1.0 - gamma)

    states = np.arange(s_n)
    lhs2 = float(np.abs(q_beta[states, pi] - q_beta[states, beta]).max())
    rhs2 = ell * eps_pi + gamma * s_n * r_max * horizon * eps_p

    zeta_r = model.zeta_r_over_sqrt_d
    zeta_p = model.zeta_p_over_sqrt_d
    unsupported = ~support.mask
    if unsupported.any():
        y_img = imagination_table(q_beta, mdp, model)
        lhs3 = float(np.abs(y_img - q_beta)[unsupported].max())
    else:
        lhs3 = 0.0
    rhs3 = (
        zeta_r
        + gamma * ell * eps_pi
        + gamma**2 * s_n * r_max * horizon * eps_p
        + gamma * zeta_p * r_max * horizon
    )

    q_ilb = value_iterate(
        lambda t: ilb_backup(t, mdp, model, support, delta),
        np.zeros((s_n, mdp.n_actions)),
        tol=vi_tol,
        max_iter=max_iter,
        contraction=gamma,
    ).q
    lhs4 = float(np.abs(q_ilb - q_beta).max())
    rhs4 = (
        horizon * zeta_r
        + horizon * ell * eps_pi
        + gamma * s_n * r_max * horizon**2 * eps_p
        + gamma * r_max * horizon**2 * zeta_p
        + horizon * abs(delta)
    )

    satisfied = (
        lhs2 <= rhs2 + AUDIT_SLACK,
        lhs3 <= rhs3 + AUDIT_SLACK,
        lhs4 <= rhs4 + AUDIT_SLACK,
    )
    return BoundReport(lhs2, rhs2, lhs3, rhs3, lhs4, rhs4, eps_pi, eps_p, ell, satisfied)


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float,
    r_max: float = 1.0,
) -> TabularMdp:
    """Dense random MDP: Dirichlet transition rows, uniform rewards in [-r_max, r_max]."""
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    if n_actions == 1:
        emb = np.zeros((1, 1))
    else:
        emb = np.linspace(0.0, 1.0, n_actions)[:, None]
    return TabularMdp(p, r, r_max, gamma, rho, emb)


def random_support(
    rng: np.random.Generator, n_states: int, n_actions: int, p_supported: float = 0.6
) -> SupportMask:
    """Random mask with each pair supported w.p. p_supported, at least one per state."""
    mask = rng.random((n_states, n_actions)) < p_supported
    for s in np.flatnonzero(~mask.any(axis=1)):
        mask[s, rng.integers(n_actions)] = True
    return SupportMask(mask)
