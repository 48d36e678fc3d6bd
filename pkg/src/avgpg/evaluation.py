"""Exact policy evaluation for ergodic average-reward MDPs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avgpg.chain import apply_phi, resolvent, stationary_distribution
from avgpg.mdp import TabularMdp, kernel_under_policy, reward_under_policy


@dataclass(frozen=True)
class PolicyEvaluation:
    """Everything exact evaluation of one policy produces.

    ``q`` is in the projected gauge: q(s,a) = r(s,a) - rho + sum_t P(t|s,a) v(t)
    with ``v`` the mean-zero Bellman solution. ``gauge_shift`` is the constant
    c with q = q0 + c, where q0 is the gauge whose values have zero mean under
    the stationary distribution.
    """

    policy: np.ndarray
    P: np.ndarray
    r: np.ndarray
    d: np.ndarray
    rho: float
    M: np.ndarray
    v: np.ndarray
    q: np.ndarray

    @property
    def gauge_shift(self) -> float:
        return float(self.d @ self.v)


def evaluate(mdp: TabularMdp, pi: np.ndarray) -> PolicyEvaluation:
    pi = np.asarray(pi, dtype=float)
    P = kernel_under_policy(mdp, pi)
    r = reward_under_policy(mdp, pi)
    d = stationary_distribution(P)
    rho = float(d @ r)
    M = resolvent(P)
    v = M @ apply_phi(r)
    q = mdp.reward - rho + mdp.kernel @ v
    return PolicyEvaluation(pi, P, r, d, rho, M, v, q)


def average_reward(mdp: TabularMdp, pi: np.ndarray) -> float:
    P = kernel_under_policy(mdp, pi)
    return float(stationary_distribution(P) @ reward_under_policy(mdp, pi))


def differential_value(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """Mean-zero solution of rho 1 + v = r^pi + P^pi v, i.e. (I - Phi P)^{-1} Phi r."""
    P = kernel_under_policy(mdp, pi)
    return resolvent(P) @ apply_phi(reward_under_policy(mdp, pi))


def relative_q(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    return evaluate(mdp, pi).q


def bellman_residual(mdp: TabularMdp, pi: np.ndarray, v: np.ndarray, rho: float) -> float:
    """||r^pi + P^pi v - v - rho 1||_inf."""
    v = np.asarray(v, dtype=float)
    P = kernel_under_policy(mdp, pi)
    r = reward_under_policy(mdp, pi)
    return float(np.max(np.abs(r + P @ v - v - rho)))
