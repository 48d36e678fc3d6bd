"""Ground-truth optimal average reward for small ergodic MDPs."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from avgpg.evaluation import average_reward, evaluate
from avgpg.gradient import policy_gradient
from avgpg.mdp import TabularMdp, deterministic_policy
from avgpg.optimizer import linear_form_max

EXHAUSTIVE_CAP = 100_000


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimalSolution:
    pi_star: np.ndarray
    rho_star: float
    method: str
    iterations: int = 0
    span: float = 0.0

    @property
    def actions(self) -> np.ndarray:
        return self.pi_star.argmax(axis=1)


def relative_value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iters: int = 200_000,
                             reference: int = 0) -> OptimalSolution:
    """h <- T h - (T h)(ref) until span(T h - h) < tol; greedy actions break ties by lowest index."""
    R, K = mdp.reward, mdp.kernel
    h = np.zeros(mdp.num_states)
    for n in range(1, max_iters + 1):
        q = R + K @ h
        th = q.max(axis=1)
        diff = th - h
        span = float(diff.max() - diff.min())
        h = th - th[reference]
        if span < tol:
            actions = (R + K @ h).argmax(axis=1)
            pi = deterministic_policy(actions, mdp.num_actions)
            return OptimalSolution(pi, average_reward(mdp, pi), "relative-value-iteration", n, span)
    raise OracleError(f"relative value iteration did not reach span {tol:g} in {max_iters} sweeps")


def exhaustive_search(mdp: TabularMdp) -> OptimalSolution:
    S, A = mdp.shape
    if A ** S > EXHAUSTIVE_CAP:
        raise OracleError(f"A^S = {A ** S} exceeds the enumeration cap {EXHAUSTIVE_CAP}")
    best_rho, best_actions = -np.inf, None
    for actions in itertools.product(range(A), repeat=S):
        rho = average_reward(mdp, deterministic_policy(np.array(actions), A))
        if rho > best_rho + 1e-13:
            best_rho, best_actions = rho, actions
    pi = deterministic_policy(np.array(best_actions), A)
    return OptimalSolution(pi, best_rho, "exhaustive", A ** S)


def solve_optimal(mdp: TabularMdp, method: str = "rvi", tol: float = 1e-10) -> OptimalSolution:
    """``method`` is ``rvi``, ``exhaustive`` or ``both`` (cross-checked to 1e-9)."""
    if method == "exhaustive":
        return exhaustive_search(mdp)
    try:
        rvi = relative_value_iteration(mdp, tol)
    except OracleError:
        S, A = mdp.shape
        if A ** S <= EXHAUSTIVE_CAP:
            return exhaustive_search(mdp)
        raise
    if method == "both":
        ex = exhaustive_search(mdp)
        if abs(ex.rho_star - rvi.rho_star) > 1e-9:
            raise OracleError(f"RVI ({rvi.rho_star!r}) and exhaustive ({ex.rho_star!r}) disagree")
    elif method != "rvi":
        raise ValueError(f"unknown method {method!r}")
    return rvi


def pdl_sides(mdp: TabularMdp, pi: np.ndarray, solution: OptimalSolution) -> tuple[float, float]:
    """(rho* - rho^pi, sum_s d*(s) sum_a q^pi(s,a) [pi*(a|s) - pi(a|s)])."""
    ev = evaluate(mdp, pi)
    d_star = evaluate(mdp, solution.pi_star).d
    rhs = float(np.sum(d_star[:, None] * ev.q * (solution.pi_star - pi)))
    return solution.rho_star - ev.rho, rhs


def pdl_check(mdp: TabularMdp, pi: np.ndarray, solution: OptimalSolution) -> float:
    lhs, rhs = pdl_sides(mdp, pi, solution)
    return abs(lhs - rhs)


def pl_inequality_check(mdp: TabularMdp, pi: np.ndarray, solution: OptimalSolution, C_PL: float) -> float:
    """C_PL * max_pi' <pi' - pi, grad> - (rho* - rho^pi); nonnegative when C_PL is valid."""
    ev = evaluate(mdp, pi)
    grad = policy_gradient(mdp, pi, ev)
    return C_PL * linear_form_max(grad, pi) - (solution.rho_star - ev.rho)
