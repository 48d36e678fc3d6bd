"""Policy gradient of the average reward and its finite-difference checks.

Directions live in the tangent space of the policy polytope: ``(S, A)`` arrays
whose rows sum to zero. Finite differences only ever evaluate rho at points
inside the polytope.
"""
from __future__ import annotations

import numpy as np

from avgpg.chain import apply_phi
from avgpg.evaluation import average_reward, differential_value, evaluate
from avgpg.mdp import TabularMdp

DEFAULT_EPS = 1e-6


class InfeasibleDirection(ValueError):
    pass


def policy_gradient(mdp: TabularMdp, pi: np.ndarray, ev=None) -> np.ndarray:
    """d rho / d pi(a|s) = d(s) q(s, a)."""
    ev = evaluate(mdp, pi) if ev is None else ev
    return ev.d[:, None] * ev.q


def check_direction(u: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(u.sum(axis=1)) > tol * max(1.0, np.abs(u).max(initial=0.0))):
        raise InfeasibleDirection("direction rows must sum to zero")
    return u


def max_feasible_step(pi: np.ndarray, u: np.ndarray) -> float:
    """Largest t >= 0 with pi + t u inside the polytope (inf if u == 0)."""
    neg = u < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(pi[neg] / -u[neg]))


def directional_derivative(mdp: TabularMdp, pi: np.ndarray, u: np.ndarray, ev=None) -> float:
    u = check_direction(u)
    if np.any(u != 0) and max_feasible_step(pi, u) <= 0.0:
        raise InfeasibleDirection("no positive step along u stays in the policy polytope")
    return float(np.sum(policy_gradient(mdp, pi, ev) * u))


def central_difference(mdp: TabularMdp, pi: np.ndarray, u: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    if max_feasible_step(pi, u) < eps or max_feasible_step(pi, -u) < eps:
        raise InfeasibleDirection(f"pi +/- {eps:g} u leaves the policy polytope")
    return (average_reward(mdp, pi + eps * u) - average_reward(mdp, pi - eps * u)) / (2 * eps)


def richardson_derivative(mdp: TabularMdp, pi: np.ndarray, u: np.ndarray,
                          alphas: tuple[float, float] = (1e-3, 5e-4)) -> float:
    """One-sided quotient (rho(pi + a u) - rho(pi)) / a extrapolated to a -> 0."""
    a1, a2 = alphas
    if max_feasible_step(pi, u) < a1:
        raise InfeasibleDirection(f"pi + {a1:g} u leaves the policy polytope")
    rho0 = average_reward(mdp, pi)
    g1 = (average_reward(mdp, pi + a1 * u) - rho0) / a1
    g2 = (average_reward(mdp, pi + a2 * u) - rho0) / a2
    # quotient error is linear in a: eliminate it
    return (a1 * g2 - a2 * g1) / (a1 - a2)


def zero_sum_basis(A: int) -> np.ndarray:
    """Rows e_a - 1/A, one per action."""
    return np.eye(A) - 1.0 / A


def finite_difference_gradient(mdp: TabularMdp, pi: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of rho along e_a - 1/A in each state.

    Entry (s, a) is the response along direction e_a - 1/A placed in state s.
    For any zero-sum direction u, sum(result * u) equals the analytic
    directional derivative, since sum_a u(s,a) (e_a - 1/A) = u(s, .).
    """
    pi = np.asarray(pi, dtype=float)
    S, A = pi.shape
    if np.min(pi) < 2 * eps:
        raise InfeasibleDirection(f"policy entries must be >= 2*eps = {2 * eps:g}")
    basis = zero_sum_basis(A)
    out = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            u = np.zeros((S, A))
            u[s] = basis[a]
            out[s, a] = central_difference(mdp, pi, u, eps)
    return out


def value_direction_derivative(mdp: TabularMdp, pi: np.ndarray, u: np.ndarray, ev=None) -> np.ndarray:
    """d v_phi / d alpha at pi along u: M Phi P^u M Phi r + M Phi r^u."""
    u = check_direction(u)
    ev = evaluate(mdp, pi) if ev is None else ev
    Pu = np.einsum("sa,sat->st", u, mdp.kernel)
    ru = np.einsum("sa,sa->s", u, mdp.reward)
    return ev.M @ apply_phi(Pu @ ev.v) + ev.M @ apply_phi(ru)


def value_central_difference(mdp: TabularMdp, pi: np.ndarray, u: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    if max_feasible_step(pi, u) < eps or max_feasible_step(pi, -u) < eps:
        raise InfeasibleDirection(f"pi +/- {eps:g} u leaves the policy polytope")
    return (differential_value(mdp, pi + eps * u) - differential_value(mdp, pi - eps * u)) / (2 * eps)


def rho_second_difference(mdp: TabularMdp, pi: np.ndarray, u: np.ndarray, alpha: float) -> float:
    u = check_direction(u)
    if max_feasible_step(pi, u) < alpha or max_feasible_step(pi, -u) < alpha:
        raise InfeasibleDirection(f"pi +/- {alpha:g} u leaves the policy polytope")
    rp = average_reward(mdp, pi + alpha * u)
    r0 = average_reward(mdp, pi)
    rm = average_reward(mdp, pi - alpha * u)
    return (rp - 2 * r0 + rm) / alpha ** 2


def random_direction(rng: np.random.Generator, pi: np.ndarray, target: np.ndarray | None = None,
                     normalize: bool = True) -> np.ndarray:
    """A feasible direction toward a random policy (or ``target``), optionally unit-norm."""
    S, A = pi.shape
    if target is None:
        target = rng.dirichlet(np.ones(A), size=S)
    u = target - pi
    n = np.linalg.norm(u)
    return u / n if normalize and n > 0 else u
