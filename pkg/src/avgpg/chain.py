"""Markov-chain linear algebra behind the mean-removed (projected) Bellman equation.

``Phi = I - 11^T/S`` removes the mean of a vector. For an irreducible aperiodic
kernel ``P`` the matrix ``I - Phi P`` is invertible and its inverse (the
resolvent) equals ``sum_k Phi P^k``. All matrix norms here are infinity-operator
norms (max absolute row sum).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.sparse.csgraph import connected_components

SUPPORT_TOL = 1e-15
NORM_FLOOR = 1e-13


class ErgodicityError(np.linalg.LinAlgError):
    """The chain violates irreducibility/aperiodicity badly enough to break a solve."""


def apply_phi(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v - v.mean(axis=0)


def phi_matrix(S: int) -> np.ndarray:
    return np.eye(S) - np.full((S, S), 1.0 / S)


def inf_norm(M: np.ndarray) -> float:
    return float(np.abs(M).sum(axis=1).max())


def is_irreducible(P: np.ndarray, tol: float = SUPPORT_TOL) -> bool:
    n_comp, _ = connected_components(np.asarray(P) > tol, directed=True, connection="strong")
    return n_comp == 1


def period(P: np.ndarray, tol: float = SUPPORT_TOL) -> int:
    """Period of an irreducible chain: gcd of level[u] + 1 - level[v] over support edges."""
    adj = np.asarray(P) > tol
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    g = 0
    for u, v in zip(*np.nonzero(adj)):
        if level[u] >= 0 and level[v] >= 0:
            g = gcd(g, int(level[u] + 1 - level[v]))
    return abs(g)


def is_ergodic(P: np.ndarray) -> bool:
    return is_irreducible(P) and period(P) == 1


def stationary_distribution(P: np.ndarray, check: bool = False) -> np.ndarray:
    """Solve (P^T - I) d = 0 with the last equation replaced by sum(d) = 1.

    With ``check=True`` the support graph is tested for ergodicity first.
    """
    P = np.asarray(P, dtype=float)
    S = P.shape[0]
    if check and not is_ergodic(P):
        raise ErgodicityError("kernel is not irreducible and aperiodic")
    system = P.T - np.eye(S)
    system[-1, :] = 1.0
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    try:
        d = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        d = _stationary_lstsq(P)
        if d is None:
            raise ErgodicityError("stationary system is singular") from exc
    if not np.all(np.isfinite(d)) or np.any(d < -1e-9):
        raise ErgodicityError("stationary solve produced an invalid distribution")
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def _stationary_lstsq(P):
    S = P.shape[0]
    system = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    d, _, rank, _ = np.linalg.lstsq(system, rhs, rcond=None)
    return d if rank == S else None


def resolvent(P: np.ndarray) -> np.ndarray:
    """(I - Phi P)^{-1} by a dense LU solve."""
    P = np.asarray(P, dtype=float)
    S = P.shape[0]
    system = np.eye(S) - (P - P.mean(axis=0))
    try:
        M = np.linalg.solve(system, np.eye(S))
    except np.linalg.LinAlgError as exc:
        raise ErgodicityError("I - Phi P is singular") from exc
    if not np.all(np.isfinite(M)):
        raise ErgodicityError("resolvent is not finite")
    return M


def neumann_resolvent(P: np.ndarray, K: int) -> np.ndarray:
    """Truncated Neumann series sum_{k=0}^{K} (Phi P)^k = I + sum_{k=1}^{K} Phi P^k.

    The k = 0 term is I, not Phi: the two series differ by 11^T/S, which
    vanishes on mean-zero vectors such as Phi r.
    """
    P = np.asarray(P, dtype=float)
    S = P.shape[0]
    total = np.eye(S)
    power = np.eye(S)
    for _ in range(K):
        power = power @ P
        total += apply_phi(power)
    return total


def spectral_check(P: np.ndarray, margin: float = 1e-9) -> tuple[float, bool]:
    """Spectral radius of Phi P and whether it is below 1 - margin."""
    P = np.asarray(P, dtype=float)
    eig = np.linalg.eigvals(apply_phi(P))
    radius = float(np.max(np.abs(eig))) if eig.size else 0.0
    return radius, radius < 1.0 - margin


def matrix_power_identity_check(P: np.ndarray, k: int) -> float:
    """||(Phi P)^k - Phi P^k||_inf."""
    P = np.asarray(P, dtype=float)
    lhs = np.linalg.matrix_power(apply_phi(P), k)
    rhs = apply_phi(np.linalg.matrix_power(P, k))
    return inf_norm(lhs - rhs)


def second_eigenvalue_modulus(P: np.ndarray) -> float:
    eig = np.abs(np.linalg.eigvals(np.asarray(P, dtype=float)))
    if eig.size < 2:
        return 0.0
    eig.sort()
    return float(eig[-2])


@dataclass(frozen=True)
class ErgodicityEstimate:
    C_e: float
    lam: float
    per_step_norms: np.ndarray


def ergodicity_estimate(P: np.ndarray, max_k: int = 200, d: np.ndarray | None = None) -> ErgodicityEstimate:
    """Fit ||P^k - 1 d^T||_inf <= C_e lam^k over k = 0..max_k.

    ``lam`` is the second eigenvalue modulus of ``P`` (inflated by 1e-9) and
    ``C_e`` the smallest constant making the recorded norms an envelope. Norms
    below 1e-13 are treated as zero so rank-one chains give lam = 0 cleanly.
    """
    P = np.asarray(P, dtype=float)
    if d is None:
        d = stationary_distribution(P)
    S = P.shape[0]
    limit = np.outer(np.ones(S), d)
    norms = np.empty(max_k + 1)
    power = np.eye(S)
    for k in range(max_k + 1):
        norms[k] = inf_norm(power - limit)
        power = power @ P
    slem = second_eigenvalue_modulus(P)
    lam = min(slem + 1e-9, 1.0 - 1e-12) if slem > NORM_FLOOR else 0.0
    if lam == 0.0 and norms[0] > NORM_FLOOR:
        # defective zero eigenvalue: P^k - 1 d^T can be nonzero for a few steps
        lam = max([(nk / norms[0]) ** (1.0 / k) for k, nk in enumerate(norms) if k and nk > NORM_FLOOR],
                  default=0.0)
    C_e = 0.0
    for k, nk in enumerate(norms):
        if nk <= NORM_FLOOR:
            continue
        scale = lam ** k if lam > 0 else (1.0 if k == 0 else 0.0)
        if scale == 0.0:
            continue
        C_e = max(C_e, nk / scale)
    return ErgodicityEstimate(C_e=C_e, lam=lam, per_step_norms=norms)
