"""Discounted-reward counterpart: values, occupancy measures, projected ascent and
the vanishing-discount limit linking it to the average reward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avgpg.complexity import Budget, _policy_sample, c_p_estimate, c_r_estimate, kappa_r, smoothness_L2
from avgpg.chain import inf_norm
from avgpg.evaluation import average_reward
from avgpg.mdp import TabularMdp, deterministic_policy, kernel_under_policy, make_rng, reward_under_policy
from avgpg.optimizer import RunTrace, project_policy


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma!r}")


def _mu(mdp: TabularMdp, mu) -> np.ndarray:
    S = mdp.num_states
    if mu is None:
        return np.full(S, 1.0 / S)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (S,) or np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
        raise ValueError("mu must be a distribution over states")
    return mu


@dataclass(frozen=True)
class DiscountedValue:
    gamma: float
    mu: np.ndarray
    value: float
    state_values: np.ndarray


def discounted_value(mdp: TabularMdp, pi: np.ndarray, gamma: float, mu=None) -> DiscountedValue:
    """V = (I - gamma P^pi)^{-1} r^pi and value mu^T V."""
    _check_gamma(gamma)
    mu = _mu(mdp, mu)
    P = kernel_under_policy(mdp, pi)
    V = np.linalg.solve(np.eye(mdp.num_states) - gamma * P, reward_under_policy(mdp, pi))
    return DiscountedValue(gamma, mu, float(mu @ V), V)


def occupancy(mdp: TabularMdp, pi: np.ndarray, gamma: float, mu=None) -> np.ndarray:
    """(1 - gamma) mu^T (I - gamma P^pi)^{-1}."""
    _check_gamma(gamma)
    mu = _mu(mdp, mu)
    P = kernel_under_policy(mdp, pi)
    return (1.0 - gamma) * np.linalg.solve((np.eye(mdp.num_states) - gamma * P).T, mu)


def discounted_q(mdp: TabularMdp, pi: np.ndarray, gamma: float) -> np.ndarray:
    V = discounted_value(mdp, pi, gamma).state_values
    return mdp.reward + gamma * mdp.kernel @ V


def discounted_gradient(mdp: TabularMdp, pi: np.ndarray, gamma: float, mu=None) -> np.ndarray:
    """d value / d pi(a|s) = d_mu(s) Q(s, a) / (1 - gamma)."""
    d = occupancy(mdp, pi, gamma, mu)
    return d[:, None] * discounted_q(mdp, pi, gamma) / (1.0 - gamma)


def optimal_discounted(mdp: TabularMdp, gamma: float, max_rounds: int = 10_000) -> np.ndarray:
    """Optimal deterministic policy by policy iteration (lowest-index tie-break)."""
    _check_gamma(gamma)
    S, A = mdp.shape
    actions = np.zeros(S, dtype=int)
    for _ in range(max_rounds):
        pi = deterministic_policy(actions, A)
        q = discounted_q(mdp, pi, gamma)
        current = q[np.arange(S), actions]
        better = q.max(axis=1) > current + 1e-12 * max(1.0, np.abs(current).max())
        if not np.any(better):
            return pi
        actions = np.where(better, q.argmax(axis=1), actions)
    raise RuntimeError("discounted policy iteration did not terminate")


def discounted_step_size(gamma: float, A: int) -> float:
    return (1.0 - gamma) ** 3 / (2.0 * gamma * A)


def discounted_bound(k, gamma: float, S: int, A: int, mismatch: float) -> np.ndarray:
    """128 S A / (k (1 - gamma)^5) * ||d_mu(pi*) / mu||_inf^2; inf for k < 1."""
    k = np.asarray(k, dtype=float)
    with np.errstate(divide="ignore"):
        out = 128.0 * S * A / (k * (1.0 - gamma) ** 5) * mismatch ** 2
    return np.where(k < 1, np.inf, out)


@dataclass
class DiscountedRun:
    trace: RunTrace
    gamma: float
    bound: np.ndarray
    mismatch: float


def run_discounted_pga(mdp: TabularMdp, pi0: np.ndarray, gamma: float, mu=None, iters: int = 1000,
                       eta: float | None = None) -> DiscountedRun:
    """Projected ascent on the discounted value; ``trace.rho`` holds mu^T V per iterate
    and ``bound`` the rate envelope evaluated at each iterate index."""
    _check_gamma(gamma)
    mu = _mu(mdp, mu)
    S, A = mdp.shape
    eta = discounted_step_size(gamma, A) if eta is None else eta
    pi_star = optimal_discounted(mdp, gamma)
    v_star = discounted_value(mdp, pi_star, gamma, mu).value
    with np.errstate(divide="ignore"):
        mismatch = float(np.max(occupancy(mdp, pi_star, gamma, mu) / mu))
    trace = RunTrace(eta=eta, rho_star=v_star)
    pi = np.asarray(pi0, dtype=float).copy()
    regret = 0.0
    for k in range(iters + 1):
        value = discounted_value(mdp, pi, gamma, mu).value
        grad = discounted_gradient(mdp, pi, gamma, mu)
        nxt = project_policy(pi + eta * grad)
        regret += v_star - value
        trace.iters.append(k)
        trace.rho.append(value)
        trace.step_norm.append(float(np.linalg.norm(nxt - pi)))
        trace.linear_max.append(float(np.sum(grad.max(axis=1)) - np.sum(grad * pi)))
        trace.cumulative_regret.append(regret)
        pi = nxt
    return DiscountedRun(trace, gamma, discounted_bound(trace.iters, gamma, S, A, mismatch), mismatch)


def vanishing_discount_check(mdp: TabularMdp, pi: np.ndarray, gammas, mu=None) -> list[dict]:
    """Rows of (gamma, (1 - gamma) * discounted value, rho, absolute gap)."""
    rho = average_reward(mdp, pi)
    rows = []
    for g in gammas:
        scaled = (1.0 - g) * discounted_value(mdp, pi, g, mu).value
        rows.append({"gamma": float(g), "scaled_value": scaled, "rho": rho, "gap": abs(scaled - rho)})
    return rows


def halving_gammas(n: int = 10) -> list[float]:
    """gamma_j = 1 - 2^-j for j = 1..n."""
    return [1.0 - 2.0 ** -j for j in range(1, n + 1)]


def discounted_smoothness_constants(mdp: TabularMdp, gamma: float, budget: Budget = Budget()) -> dict:
    """C_m-hat = max_pi ||(I - gamma P^pi)^{-1}||_inf over deterministic policies, and
    the average-reward smoothness formula with C_m-hat substituted for C_m."""
    _check_gamma(gamma)
    S = mdp.num_states
    rng = make_rng(budget.seed + 4)
    cm_hat = 0.0
    for pi, is_vertex in _policy_sample(mdp, budget, rng):
        if is_vertex:
            P = kernel_under_policy(mdp, pi)
            cm_hat = max(cm_hat, inf_norm(np.linalg.inv(np.eye(S) - gamma * P)))
    cp = c_p_estimate(mdp, budget).value
    cr = c_r_estimate(mdp, budget).value
    kr = kappa_r(mdp)
    return {"gamma": gamma, "C_m_hat": cm_hat, "C_m_hat_bound": 1.0 / (1.0 - gamma),
            "C_p": cp, "C_r": cr, "kappa_r": kr, "L2": smoothness_L2(cm_hat, cp, cr, kr)}
