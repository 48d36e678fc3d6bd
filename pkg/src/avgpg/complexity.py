"""MDP complexity constants and the restricted Lipschitz/smoothness constants built from them.

Every matrix norm is the infinity-operator norm. Each estimator returns an
:class:`Estimate` carrying a provenance label:

``exact``
    the value is the true maximum over the policy polytope;
``upper-bound``
    a certificate valid for every policy;
``sampled-envelope``
    an envelope that bounds every *sampled* policy but is not certified over all of them;
``search-lower-bound``
    the best value found by search; the true constant may be larger.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from avgpg.chain import ErgodicityError, ergodicity_estimate, inf_norm, resolvent, stationary_distribution
from avgpg.evaluation import average_reward, evaluate
from avgpg.gradient import policy_gradient
from avgpg.mdp import TabularMdp, _stream_key, deterministic_policy, kernel_under_policy, make_rng

EXACT = "exact"
UPPER = "upper-bound"
ENVELOPE = "sampled-envelope"
SEARCH = "search-lower-bound"


def _stream(seed: int, stream: int) -> np.random.Generator:
    # Separate streams per sampler keep a larger budget's sample a superset of a smaller one's.
    return np.random.Generator(np.random.Philox(key=_stream_key(seed, stream)))


@dataclass(frozen=True)
class Estimate:
    value: float
    provenance: str
    evaluations: int = 0


@dataclass(frozen=True)
class Budget:
    """Search effort. ``enum_cap`` bounds exhaustive deterministic enumeration
    (A^S), ``sign_cap`` bounds the 2^(S-1) sign-vector enumeration for C_p, and
    ``random_policies`` is the number of random probes per estimator."""

    random_policies: int = 200
    enum_cap: int = 4096
    sign_cap: int = 1 << 14
    ergodicity_k: int = 400
    seed: int = 0


# -- closed-form constants ----------------------------------------------------

def lipschitz_L1(C_m, C_p, C_r, kappa_r) -> float:
    return 2.0 * (C_r + C_p * C_m * kappa_r + 2.0 * (C_m ** 2 * C_p * kappa_r + C_m * C_r))


def smoothness_L2(C_m, C_p, C_r, kappa_r) -> float:
    return 4.0 * (C_p ** 2 * C_m ** 2 * kappa_r + C_p * C_m * C_r
                  + (C_p + 1.0) * (C_m ** 2 * C_p * kappa_r + C_m * C_r)
                  + 4.0 * (C_m ** 3 * C_p ** 2 * kappa_r + C_m ** 2 * C_p * C_r))


def deterministic_policies(S: int, A: int):
    for actions in itertools.product(range(A), repeat=S):
        yield deterministic_policy(np.array(actions), A)


def kappa_r(mdp: TabularMdp) -> float:
    """max_pi ||Phi r^pi||_inf, exactly.

    (Phi r^pi)(s) = (1 - 1/S) r^pi(s) - (1/S) sum_{t != s} r^pi(t) is separable
    in the per-state action choices, so each sign is maximised by picking the
    largest reward at s and the smallest elsewhere (or the reverse).
    """
    S = mdp.num_states
    hi = mdp.reward.max(axis=1)
    lo = mdp.reward.min(axis=1)
    plus = (1 - 1 / S) * hi - (lo.sum() - lo) / S
    minus = -(1 - 1 / S) * lo + (hi.sum() - hi) / S
    return float(max(plus.max(), minus.max(), 0.0))


def kappa_r_enumerate(mdp: TabularMdp) -> float:
    S, A = mdp.shape
    best = 0.0
    for actions in itertools.product(range(A), repeat=S):
        rp = mdp.reward[np.arange(S), list(actions)]
        best = max(best, float(np.max(np.abs(rp - rp.mean()))))
    return best


# -- diameters -----------------------------------------------------------------

def _vertex_pair_ratio(rows: np.ndarray) -> float:
    """max_{i<j} ||rows[i] - rows[j]||_1 / sqrt(2) for one state's action rows."""
    A = rows.shape[0]
    best = 0.0
    for i in range(A):
        for j in range(i + 1, A):
            best = max(best, float(np.abs(rows[i] - rows[j]).sum()) / np.sqrt(2.0))
    return best


def c_r_estimate(mdp: TabularMdp, budget: Budget = Budget(), restrict_state_constant: bool = False) -> Estimate:
    """max over policy pairs of ||r^pi' - r^pi||_inf / ||pi' - pi||_2.

    A perturbation confined to one state has the smallest denominator, so the
    maximum is max_s ||r_s - mean(r_s)||_2, realised by a small step from the
    uniform policy along the centred reward row. Vertex pairs and random pairs
    are also probed. Under ``restrict_state_constant`` both policies use the
    same action distribution in every state and only search is performed.
    """
    S, A = mdp.shape
    rng = make_rng(budget.seed)
    R = mdp.reward
    evals = 0
    if restrict_state_constant:
        best = 0.0
        for i in range(A):
            for j in range(i + 1, A):
                w = np.zeros(A)
                w[i], w[j] = 1.0, -1.0
                best = max(best, float(np.abs(R @ w).max() / (np.sqrt(S) * np.linalg.norm(w))))
                evals += 1
        for s in range(S):
            w = R[s] - R[s].mean()
            if np.linalg.norm(w) > 0:
                best = max(best, float(np.abs(R @ w).max() / (np.sqrt(S) * np.linalg.norm(w))))
                evals += 1
        for _ in range(budget.random_policies):
            w = rng.dirichlet(np.ones(A)) - rng.dirichlet(np.ones(A))
            n = np.linalg.norm(w)
            if n > 0:
                best = max(best, float(np.abs(R @ w).max() / (np.sqrt(S) * n)))
            evals += 1
        return Estimate(min(best, np.sqrt(A)), SEARCH, evals)

    centred = np.linalg.norm(R - R.mean(axis=1, keepdims=True), axis=1)
    best = float(centred.max())
    for s in range(S):
        best = max(best, _pair_max_abs(R[s]) / np.sqrt(2.0))
    evals += S
    for _ in range(budget.random_policies):
        p = rng.dirichlet(np.ones(A), size=S)
        q = rng.dirichlet(np.ones(A), size=S)
        n = np.linalg.norm(p - q)
        if n > 0:
            best = max(best, float(np.abs(np.sum((p - q) * R, axis=1)).max() / n))
        evals += 1
    return Estimate(min(best, np.sqrt(A)), EXACT, evals)


def _pair_max_abs(x: np.ndarray) -> float:
    return float(x.max() - x.min())


def _sign_vectors(S: int):
    # v and -v give the same norm, so fix the first sign
    for bits in itertools.product((1.0, -1.0), repeat=S - 1):
        yield np.array((1.0,) + bits)


def _state_tangent_norm(Ps: np.ndarray, v: np.ndarray) -> float:
    x = Ps @ v
    return float(np.linalg.norm(x - x.mean()))


def _local_sign_search(Ps: np.ndarray, v: np.ndarray) -> tuple[float, int]:
    best = _state_tangent_norm(Ps, v)
    evals = 1
    improved = True
    while improved:
        improved = False
        for i in range(v.size):
            v[i] = -v[i]
            val = _state_tangent_norm(Ps, v)
            evals += 1
            if val > best + 1e-15:
                best, improved = val, True
            else:
                v[i] = -v[i]
    return best, evals


def c_p_estimate(mdp: TabularMdp, budget: Budget = Budget(), restrict_state_constant: bool = False) -> Estimate:
    """max over policy pairs of ||P^pi' - P^pi||_inf / ||pi' - pi||_2.

    Single-state perturbations are again extremal, and for state s the ratio is
    max_{||v||_inf <= 1} ||Phi_A P_s v||_2, a convex function of v maximised at
    a sign vector. All 2^(S-1) sign vectors are enumerated when that is within
    ``sign_cap`` (exact); otherwise random signs with greedy flips are used.
    """
    S, A = mdp.shape
    K = mdp.kernel
    rng = make_rng(budget.seed)
    evals = 0
    if restrict_state_constant:
        return _c_p_state_constant(mdp, budget, rng)

    best = max(_vertex_pair_ratio(K[s]) for s in range(S))
    evals += S
    exhaustive = (1 << max(S - 1, 0)) <= budget.sign_cap
    signs = np.array(list(_sign_vectors(S))) if exhaustive else None
    for s in range(S):
        if exhaustive:
            x = K[s] @ signs.T                              # (A, 2^(S-1))
            x -= x.mean(axis=0)
            best = max(best, float(np.sqrt((x * x).sum(axis=0)).max()))
            evals += signs.shape[0]
        else:
            srng = _stream(budget.seed, 300 + s)
            starts = [np.sign(K[s][i] - K[s][j]) for i in range(A) for j in range(i + 1, A)]
            starts += [srng.choice((-1.0, 1.0), size=S) for _ in range(max(1, budget.random_policies // S))]
            for v in starts:
                v = np.where(v == 0, 1.0, v).astype(float)
                val, n = _local_sign_search(K[s], v)
                best = max(best, val)
                evals += n
    return Estimate(min(best, np.sqrt(A)), EXACT if exhaustive else SEARCH, evals)


def _c_p_state_constant(mdp, budget, rng) -> Estimate:
    S, A = mdp.shape
    K = mdp.kernel
    sqrt_s = np.sqrt(S)
    evals = 0

    def ratio(w):
        n = np.linalg.norm(w)
        if n == 0:
            return 0.0
        return float(np.abs(np.einsum("a,sat->st", w, K)).sum(axis=1).max() / (sqrt_s * n))

    best = 0.0
    for i in range(A):
        for j in range(i + 1, A):
            w = np.zeros(A)
            w[i], w[j] = 1.0, -1.0
            best = max(best, ratio(w))
            evals += 1
    for _ in range(budget.random_policies):
        s = int(rng.integers(S))
        v = rng.choice((-1.0, 1.0), size=S)
        x = K[s] @ v
        best = max(best, ratio(x - x.mean()))
        best = max(best, ratio(rng.dirichlet(np.ones(A)) - rng.dirichlet(np.ones(A))))
        evals += 2
    return Estimate(min(best, np.sqrt(A)), SEARCH, evals)


# -- mixing ----------------------------------------------------------------------

def _policy_sample(mdp: TabularMdp, budget: Budget, rng):
    """Deterministic policies (all of them when A^S <= enum_cap, else a sample),
    then random interior policies. Yields (policy, is_vertex)."""
    S, A = mdp.shape
    vertex_rng, interior_rng = rng.spawn(2)
    if A ** S <= budget.enum_cap:
        for pi in deterministic_policies(S, A):
            yield pi, True
    else:
        for _ in range(budget.random_policies):
            yield deterministic_policy(vertex_rng.integers(A, size=S), A), True
    for _ in range(budget.random_policies):
        yield interior_rng.dirichlet(np.ones(A), size=S), False


def dobrushin_bound(mdp: TabularMdp) -> float:
    """Policy-uniform contraction coefficient 1 - min_{s,t} sum_j min(m_s(j), m_t(j)),
    with m_s(j) = min_a P(j|s,a). Any P^pi has Dobrushin coefficient <= this."""
    m = mdp.kernel.min(axis=1)
    overlap = np.minimum(m[:, None, :], m[None, :, :]).sum(axis=2)
    return float(min(1.0, max(0.0, 1.0 - overlap.min())))


def c_m_certified(mdp: TabularMdp) -> float:
    """Upper bound on max_pi ||(I - Phi P^pi)^{-1}||_inf valid for every policy.

    The resolvent is I + sum_{k>=1} Phi (P^pi)^k and ||Phi (P^pi)^k||_inf <=
    2 (1 - 1/S) delta^k, with delta the policy-uniform Dobrushin coefficient,
    giving 1 + 2 (1 - 1/S) delta / (1 - delta). Returns inf when delta = 1.
    """
    S = mdp.num_states
    delta = dobrushin_bound(mdp)
    if delta >= 1.0:
        return np.inf
    return 1.0 + 2.0 * (1.0 - 1.0 / S) * delta / (1.0 - delta)


@dataclass(frozen=True)
class MixingSearch:
    C_m: Estimate
    C_e: float
    lam: float
    envelope: float
    skipped: int


def c_m_estimate(mdp: TabularMdp, budget: Budget = Budget()) -> MixingSearch:
    """Largest resolvent norm over the policy sample, plus the sampled (C_e, lambda)
    maxima and their envelope 2 C_e S / (1 - lambda).

    Provenance is ``exact`` only when every deterministic policy was enumerated
    and no random interior probe beat the vertex maximum.
    """
    S, A = mdp.shape
    rng = make_rng(budget.seed + 1)
    vertex_best = interior_best = 0.0
    C_e = lam = 0.0
    evals = skipped = 0
    for pi, is_vertex in _policy_sample(mdp, budget, rng):
        P = kernel_under_policy(mdp, pi)
        try:
            norm = inf_norm(resolvent(P))
            est = ergodicity_estimate(P, budget.ergodicity_k)
        except ErgodicityError:
            skipped += 1
            continue
        evals += 1
        if is_vertex:
            vertex_best = max(vertex_best, norm)
        else:
            interior_best = max(interior_best, norm)
        C_e = max(C_e, est.C_e)
        lam = max(lam, est.lam)
    best = max(vertex_best, interior_best)
    exhaustive = A ** S <= budget.enum_cap and skipped == 0
    prov = EXACT if exhaustive and interior_best <= vertex_best * (1 + 1e-12) else SEARCH
    envelope = 2.0 * C_e * S / (1.0 - lam) if lam < 1 else np.inf
    return MixingSearch(Estimate(best, prov, evals), C_e, lam, envelope, skipped)


# -- gradient domination -------------------------------------------------------

def max_return_times(mdp: TabularMdp, max_rounds: int = 1000) -> np.ndarray:
    """For each state s, max over policies of the expected return time to s.

    Maximising the expected first-passage time is a total-reward MDP with reward
    1 per step until s is hit; policy iteration over deterministic policies finds
    it. By Kac's formula d^pi(s) = 1 / E_s[return time], so
    min_pi d^pi(s) = 1 / (this value). Entries are inf when some policy never
    returns to s.
    """
    S, A = mdp.shape
    K = mdp.kernel
    out = np.empty(S)
    for s in range(S):
        others = np.array([t for t in range(S) if t != s], dtype=int)
        if others.size == 0:
            out[s] = 1.0
            continue
        sub = K[np.ix_(others, np.arange(A), others)]      # transitions avoiding s
        actions = np.zeros(others.size, dtype=int)
        h = None
        for _ in range(max_rounds):
            Psub = sub[np.arange(others.size), actions]
            try:
                h = np.linalg.solve(np.eye(others.size) - Psub, np.ones(others.size))
            except np.linalg.LinAlgError:
                h = None
            if h is None or not np.all(np.isfinite(h)) or np.any(h < 1.0 - 1e-9):
                h = None
                break
            cand = 1.0 + sub @ h                            # (others, A)
            current = cand[np.arange(others.size), actions]
            better = cand.max(axis=1) > current * (1 + 1e-12) + 1e-12
            if not np.any(better):
                break
            actions = np.where(better, cand.argmax(axis=1), actions)
        if h is None:
            out[s] = np.inf
            continue
        out[s] = float(np.max(1.0 + K[s][:, others] @ h))
    return out


def c_pl_exact(mdp: TabularMdp, pi_star: np.ndarray) -> float:
    """max_{pi, s} d^{pi*}(s) / d^pi(s) = max_s d^{pi*}(s) * max_pi E_s[return time]."""
    d_star = stationary_distribution(kernel_under_policy(mdp, pi_star))
    return float(np.max(d_star * max_return_times(mdp)))


def c_pl_estimate(mdp: TabularMdp, pi_star: np.ndarray, budget: Budget = Budget(),
                  search_only: bool = False) -> Estimate:
    """Search over deterministic and random policies for max_s d*(s)/d^pi(s).

    Unless ``search_only`` is set, the return-time computation supplies the
    exact value and the search is kept as a cross-check.
    """
    S, A = mdp.shape
    rng = make_rng(budget.seed + 2)
    d_star = stationary_distribution(kernel_under_policy(mdp, pi_star))
    best = 1.0
    evals = 0
    for pi, _ in _policy_sample(mdp, budget, rng):
        try:
            d = stationary_distribution(kernel_under_policy(mdp, pi))
        except ErgodicityError:
            return Estimate(np.inf, SEARCH, evals)
        evals += 1
        if np.min(d) < 1e-14:
            return Estimate(np.inf, SEARCH, evals)
        best = max(best, float(np.max(d_star / d)))
    if search_only:
        return Estimate(best, SEARCH, evals)
    exact = c_pl_exact(mdp, pi_star)
    return Estimate(max(exact, best), EXACT, evals)


# -- empirical smoothness ------------------------------------------------------

def empirical_smoothness(mdp: TabularMdp, samples: int = 200, seed: int = 0) -> float:
    """max over sampled pairs x, y in the policy polytope of
    2 |rho(y) - rho(x) - <grad rho(x), y - x>| / ||y - x||^2.

    A lower bound on the true restricted smoothness constant.
    """
    S, A = mdp.shape
    rng = make_rng(seed + 3)
    best = 0.0
    for i in range(samples):
        x = rng.dirichlet(np.ones(A), size=S)
        if i % 2 == 0:
            target = deterministic_policy(rng.integers(A, size=S), A)
        else:
            target = rng.dirichlet(np.ones(A), size=S)
        alpha = (1.0, 0.3, 0.1)[i % 3]
        y = x + alpha * (target - x)
        du = y - x
        n2 = float(np.sum(du * du))
        if n2 < 1e-12:
            continue
        ev = evaluate(mdp, x)
        lin = float(np.sum(policy_gradient(mdp, x, ev) * du))
        best = max(best, 2.0 * abs(average_reward(mdp, y) - ev.rho - lin) / n2)
    return best


# -- assembly --------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityConstants:
    C_m: float
    C_p: float
    C_r: float
    kappa_r: float
    L1: float
    L2: float
    C_PL: float
    C_e: float
    lam: float
    provenance: dict = field(default_factory=dict)
    search_budget: int = 0

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in ("C_m", "C_p", "C_r", "kappa_r", "L1", "L2", "C_PL", "C_e", "lam")}
        row.update({f"{k}_provenance": v for k, v in self.provenance.items()})
        return row


@dataclass(frozen=True)
class ConstantsReport:
    """Both flavours: ``search`` plugs best estimates into the L1/L2 formulas;
    ``certified`` plugs values that upper-bound the true constants."""

    search: ComplexityConstants
    certified: ComplexityConstants
    c_m_envelope: float
    dobrushin: float
    wall_time: float


def assemble_constants(mdp: TabularMdp, budget: Budget = Budget(), pi_star: np.ndarray | None = None) -> ConstantsReport:
    start = time.perf_counter()
    S, A = mdp.shape
    kr = kappa_r(mdp)
    cr = c_r_estimate(mdp, budget)
    cp = c_p_estimate(mdp, budget)
    mix = c_m_estimate(mdp, budget)
    if pi_star is None:
        from avgpg.oracle import solve_optimal
        pi_star = solve_optimal(mdp).pi_star
    cpl = c_pl_estimate(mdp, pi_star, budget)
    evals = cr.evaluations + cp.evaluations + mix.C_m.evaluations + cpl.evaluations

    search = ComplexityConstants(
        C_m=mix.C_m.value, C_p=cp.value, C_r=cr.value, kappa_r=kr,
        L1=lipschitz_L1(mix.C_m.value, cp.value, cr.value, kr),
        L2=smoothness_L2(mix.C_m.value, cp.value, cr.value, kr),
        C_PL=cpl.value, C_e=mix.C_e, lam=mix.lam,
        provenance={"C_m": mix.C_m.provenance, "C_p": cp.provenance, "C_r": cr.provenance,
                    "kappa_r": EXACT, "C_PL": cpl.provenance, "L1": SEARCH, "L2": SEARCH},
        search_budget=evals,
    )

    cm_cert = c_m_certified(mdp)
    if np.isfinite(cm_cert):
        cm_val, cm_prov = max(cm_cert, mix.C_m.value), UPPER
    else:
        cm_val, cm_prov = max(mix.envelope, mix.C_m.value), ENVELOPE
    root_a = float(np.sqrt(A))
    l_prov = UPPER if cm_prov == UPPER and cpl.provenance == EXACT else ENVELOPE
    certified = replace(
        search, C_m=cm_val, C_p=root_a, C_r=root_a,
        L1=lipschitz_L1(cm_val, root_a, root_a, kr),
        L2=smoothness_L2(cm_val, root_a, root_a, kr),
        provenance={"C_m": cm_prov, "C_p": UPPER, "C_r": UPPER, "kappa_r": EXACT,
                    "C_PL": cpl.provenance, "L1": l_prov, "L2": l_prov},
    )
    return ConstantsReport(search, certified, mix.envelope, dobrushin_bound(mdp), time.perf_counter() - start)



def step_smoothness(mdp: TabularMdp, flavour: str = "certified", budget: Budget = Budget()) -> tuple[float, str]:
    """L2 for choosing a step size, without the optimal policy (C_PL is not needed).

    ``certified`` uses C_p = C_r = sqrt(A) and the Dobrushin bound on C_m
    (falling back to the sampled envelope); ``search`` uses the estimates.
    Returns (L2, provenance).
    """
    kr = kappa_r(mdp)
    if flavour == "certified":
        root_a = float(np.sqrt(mdp.num_actions))
        cm = c_m_certified(mdp)
        prov = UPPER
        if not np.isfinite(cm):
            cm, prov = c_m_estimate(mdp, budget).envelope, ENVELOPE
        return smoothness_L2(cm, root_a, root_a, kr), prov
    if flavour == "search":
        cm = c_m_estimate(mdp, budget).C_m.value
        cp = c_p_estimate(mdp, budget).value
        cr = c_r_estimate(mdp, budget).value
        return smoothness_L2(cm, cp, cr, kr), SEARCH
    raise ValueError(f"unknown smoothness flavour {flavour!r}")
