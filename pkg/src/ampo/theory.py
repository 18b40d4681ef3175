"""Exact checks of the return-gap bounds on finite MDPs.

Occupancy measures, values and returns are all obtained from dense linear
solves, so each side of every inequality is computed exactly (to floating
point).  Returns are normalised: ``eta = sum(rho * r)`` with ``rho`` the
discounted state-action occupancy scaled to sum to one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError, UsageError

TOL = 1e-9


@dataclass
class TabularMDP:
    transition: np.ndarray  # [s, a, s']
    reward: np.ndarray  # [s, a]
    gamma: float
    init_dist: np.ndarray

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.init_dist = np.asarray(self.init_dist, dtype=np.float64)
        S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (S, A) or self.init_dist.shape != (S,):
            raise UsageError("inconsistent MDP shapes")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=2) - 1) > 1e-12):
            raise UsageError("transition rows must be probability vectors")
        if abs(self.init_dist.sum() - 1) > 1e-12 or np.any(self.init_dist < 0):
            raise UsageError("initial distribution must be a probability vector")
        if not 0 < self.gamma < 1:
            raise UsageError("gamma must lie in (0, 1)")

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def reward_bound(self):
        return float(np.abs(self.reward).max())

    def with_transition(self, transition):
        return TabularMDP(transition, self.reward, self.gamma, self.init_dist)


@dataclass
class TabularPolicy:
    probs: np.ndarray  # [s, a]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-12):
            raise UsageError("policy rows must be probability vectors")


@dataclass
class BoundReport:
    lhs: float
    eta_hat: float
    r_eps: float
    ipm_term: float
    kl_term: float
    holds: bool
    slack: float
    kl_defined: bool = True


def state_transition_matrix(mdp, policy):
    return np.einsum("sa,sap->sp", policy.probs, mdp.transition)


def occupancy(mdp, policy):
    """Normalised discounted state visitation ``nu`` and state-action occupancy ``rho``."""
    P = state_transition_matrix(mdp, policy)
    A = np.eye(mdp.n_states) - mdp.gamma * P.T
    try:
        nu = np.linalg.solve(A, (1 - mdp.gamma) * mdp.init_dist)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"occupancy system is singular: {exc}") from exc
    nu = nu / nu.sum()
    rho = nu[:, None] * policy.probs
    return nu, rho


def policy_value(mdp, policy):
    """Unnormalised ``V^pi`` solving ``(I - gamma P_pi) V = r_pi``."""
    P = state_transition_matrix(mdp, policy)
    r_pi = (policy.probs * mdp.reward).sum(axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P, r_pi)


def expected_return(mdp, policy):
    _, rho = occupancy(mdp, policy)
    return float((rho * mdp.reward).sum())


def tv_distance(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise UsageError(f"shape mismatch {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def kl_rows(p, q):
    """Row-wise ``KL(p || q)`` over the last axis; ``inf`` where q misses p's support."""
    p, q = np.asarray(p), np.asarray(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    terms = np.where((p > 0) & (q <= 0), np.inf, terms)
    return terms.sum(axis=-1)


def _check_pair(mdp_true, mdp_model):
    if mdp_true.transition.shape != mdp_model.transition.shape:
        raise UsageError("true and model MDPs have different state/action spaces")
    if not np.allclose(mdp_true.init_dist, mdp_model.init_dist, atol=1e-15, rtol=0):
        raise UsageError("true and model MDPs must share the initial distribution")


@dataclass
class Lemma1Report:
    lhs: np.ndarray
    rhs: np.ndarray
    slack: np.ndarray

    @property
    def holds(self):
        return bool(np.all(self.slack >= -TOL))

    @property
    def min_slack(self):
        return float(self.slack.min())


def lemma1_check(mdp_true, mdp_model, pi, pi_D):
    """Per-state check of the visitation-gap decomposition.

    The witness class for state ``s'`` is the sup-norm ball of radius
    ``c = max_{s,a} T_hat(s'|s,a)``, whose IPM is ``2 c TV``.
    """
    _check_pair(mdp_true, mdp_model)
    g = mdp_true.gamma
    nu_D, rho_D = occupancy(mdp_true, pi_D)
    nu_hat, rho_hat = occupancy(mdp_model, pi)
    lhs = np.abs(nu_D - nu_hat)
    c = mdp_model.transition.max(axis=(0, 1))
    ipm = 2.0 * c * tv_distance(rho_D, rho_hat)
    model_err = np.einsum("sa,sap->p", rho_D, np.abs(mdp_true.transition - mdp_model.transition))
    rhs = g * ipm + g * model_err
    return Lemma1Report(lhs, rhs, rhs - lhs)


def theorem1_check(mdp_true, mdp_model, pi, pi_D):
    _check_pair(mdp_true, mdp_model)
    g = mdp_true.gamma
    R = mdp_true.reward_bound
    eta = expected_return(mdp_true, pi)
    eta_hat = expected_return(mdp_model, pi)
    nu_pi, _ = occupancy(mdp_true, pi)
    nu_D, rho_D = occupancy(mdp_true, pi_D)
    _, rho_hat = occupancy(mdp_model, pi)
    eps_pi = 2.0 * tv_distance(nu_pi, nu_D)
    d_f = 2.0 * mdp_model.transition.max() * tv_distance(rho_D, rho_hat)
    kl = kl_rows(mdp_true.transition, mdp_model.transition)
    kl_defined = bool(np.all(np.isfinite(kl[rho_D > 0])))
    if kl_defined:
        # rounding can leave KL at -1e-17 for identical rows
        kl = np.where(rho_D > 0, np.maximum(kl, 0.0), 0.0)
        kl_expect = float((rho_D * np.sqrt(2.0 * kl)).sum())
    else:
        kl_expect = math.inf
    r_eps = R * eps_pi
    ipm_term = g * R * d_f * mdp_true.n_states
    kl_term = g * R * kl_expect
    bound = eta_hat - r_eps - ipm_term - kl_term
    slack = eta - bound
    return BoundReport(eta, eta_hat, r_eps, ipm_term, kl_term, bool(slack >= -TOL), float(slack), kl_defined)


@dataclass
class AlternativeReport:
    residual: float
    bound: BoundReport


def appendixE_check(mdp_true, mdp_model, pi, pi_D=None):
    """Telescoping identity ``eta_hat - eta = gamma E_rho_hat[G]`` and the bound built on it."""
    _check_pair(mdp_true, mdp_model)
    pi_D = pi if pi_D is None else pi_D
    g = mdp_true.gamma
    V = policy_value(mdp_true, pi)
    G = mdp_model.transition @ V - mdp_true.transition @ V
    eta = expected_return(mdp_true, pi)
    eta_hat = expected_return(mdp_model, pi)
    _, rho_hat = occupancy(mdp_model, pi)
    _, rho_D = occupancy(mdp_true, pi_D)
    residual = abs((eta_hat - eta) - g * float((rho_hat * G).sum()))
    d_f1 = 2.0 * float(np.abs(G).max()) * tv_distance(rho_D, rho_hat)
    row_tv = 0.5 * np.abs(mdp_model.transition - mdp_true.transition).sum(axis=2)
    d_f2 = 2.0 * float(np.abs(V).max()) * row_tv
    ipm_term = g * d_f1
    model_term = g * float((rho_D * d_f2).sum())
    bound = eta_hat - ipm_term - model_term
    slack = eta - bound
    report = BoundReport(eta, eta_hat, 0.0, ipm_term, model_term, bool(slack >= -TOL), float(slack))
    return AlternativeReport(float(residual), report)


def pinsker_holds(p, q):
    """``2 TV(p, q)^2 <= KL(p || q)`` for every row."""
    tv = 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)
    return bool(np.all(2.0 * tv ** 2 <= kl_rows(p, q) + TOL))


# --- random instances ---------------------------------------------------------

MODEL_ERRORS = (0.0, 0.05, 0.3)
DISCOUNTS = (0.5, 0.9, 0.99)


def random_policy(rng, n_states, n_actions):
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


def random_instance(rng, n_states, n_actions, model_error, gamma):
    """A true MDP, a Dirichlet-perturbed model of it, a policy and a behaviour policy."""
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    noise = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    T_hat = T + model_error * noise
    T_hat /= T_hat.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    true = TabularMDP(T, r, gamma, mu0)
    model = TabularMDP(T_hat, r, gamma, mu0)
    return true, model, random_policy(rng, n_states, n_actions), random_policy(rng, n_states, n_actions)


@dataclass
class SuiteRow:
    instance: int
    n_states: int
    n_actions: int
    gamma: float
    model_error: float
    lemma1_min_slack: float
    theorem1_slack: float
    appendix_e_slack: float
    appendix_e_residual: float
    pinsker_ok: bool

    @property
    def passed(self):
        return (self.lemma1_min_slack >= -TOL and self.theorem1_slack >= -TOL
                and self.appendix_e_slack >= -TOL and self.appendix_e_residual < TOL and self.pinsker_ok)


def run_suite(n_instances=500, max_states=10, max_actions=4, seed=0):
    """Cycle through every (model error, discount) regime on random instances."""
    rng = np.random.default_rng(seed)
    regimes = [(e, g) for e in MODEL_ERRORS for g in DISCOUNTS]
    rows = []
    for i in range(n_instances):
        eps, gamma = regimes[i % len(regimes)]
        S = int(rng.integers(1, max_states + 1))
        A = int(rng.integers(1, max_actions + 1))
        true, model, pi, pi_D = random_instance(rng, S, A, eps, gamma)
        l1 = lemma1_check(true, model, pi, pi_D)
        t1 = theorem1_check(true, model, pi, pi_D)
        ae = appendixE_check(true, model, pi, pi_D)
        rows.append(SuiteRow(i, S, A, gamma, eps, l1.min_slack, t1.slack, ae.bound.slack, ae.residual,
                             pinsker_holds(true.transition, model.transition)))
    return rows


def write_suite_csv(rows, path):
    fields = list(SuiteRow.__dataclass_fields__) + ["passed"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({**asdict(row), "passed": row.passed})
