"""Projected policy-gradient ascent on the average reward."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from avgpg.evaluation import evaluate
from avgpg.gradient import policy_gradient
from avgpg.mdp import TabularMdp, check_policy

TRACE_COLUMNS = ("iter", "rho", "gap", "step_norm", "grad_map_norm", "cumulative_regret", "rate_bound")


class PgaDiverged(RuntimeError):
    pass


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold).

    Sorting is stable so ties resolve by index order.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    u = y[np.argsort(-y, kind="stable")]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    k = np.count_nonzero(u - css / ind > 0)
    theta = css[k - 1] / k
    return np.maximum(y - theta, 0.0)


def project_policy(y: np.ndarray) -> np.ndarray:
    """Row-wise simplex projection; the policy polytope is a product of simplices."""
    y = np.asarray(y, dtype=float)
    return np.stack([project_simplex(row) for row in y])


def pga_step(mdp: TabularMdp, pi: np.ndarray, eta: float) -> np.ndarray:
    return project_policy(pi + eta * policy_gradient(mdp, pi))


def linear_form_max(grad: np.ndarray, pi: np.ndarray) -> float:
    """max over policies pi' of <pi' - pi, grad>; attained by a per-state argmax vertex."""
    return float(np.sum(grad.max(axis=1)) - np.sum(grad * pi))


@dataclass(frozen=True)
class RunConfig:
    step_size: float | str = "auto"
    max_iters: int = 1000
    stop_tolerance: float = 0.0
    record_every: int = 1
    keep_policies: bool = False

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.stop_tolerance < 0:
            raise ValueError("stop_tolerance must be >= 0")
        if isinstance(self.step_size, str):
            if self.step_size not in ("auto", "certified", "search"):
                raise ValueError(f"unknown step size rule {self.step_size!r}")
        elif not self.step_size > 0:
            raise ValueError("explicit step size must be positive")


@dataclass
class RunTrace:
    """Per-iterate record of a PGA run.

    ``step_norm[k]`` is ||pi_{k+1} - pi_k||_2 and ``linear_max[k]`` is
    max_{pi'} <pi' - pi_k, grad rho(pi_k)>. ``gap`` and ``cumulative_regret``
    are NaN when no optimal value was supplied.
    """

    eta: float
    rho_star: float | None
    iters: list[int] = field(default_factory=list)
    rho: list[float] = field(default_factory=list)
    step_norm: list[float] = field(default_factory=list)
    linear_max: list[float] = field(default_factory=list)
    cumulative_regret: list[float] = field(default_factory=list)
    policies: list[np.ndarray] = field(default_factory=list)
    record_every: int = 1

    def __len__(self) -> int:
        return len(self.iters)

    @property
    def gap(self) -> np.ndarray:
        if self.rho_star is None:
            return np.full(len(self), np.nan)
        return self.rho_star - np.asarray(self.rho)

    @property
    def grad_map_norm(self) -> np.ndarray:
        return np.asarray(self.step_norm) / self.eta

    @property
    def improvement(self) -> np.ndarray:
        rho = np.asarray(self.rho)
        return rho - rho[0]

    def rate_bound(self, L2: float, C_PL: float, S: int = 1) -> np.ndarray:
        """max(128 S L2 C_PL^2 / k, 2^{-k/2} gap_0) for iterate k + 1; inf where k < 1.

        ``S=1`` drops the state factor; pass the state count for the looser,
        state-scaled form.
        """
        it = np.asarray(self.iters, dtype=float)
        k = it - 1.0
        gap0 = float(self.gap[0]) if self.rho_star is not None else np.nan
        with np.errstate(divide="ignore"):
            bound = np.maximum(128.0 * S * L2 * C_PL ** 2 / k, 2.0 ** (-k / 2.0) * gap0)
        bound[k < 1] = np.inf
        return bound

    def rows(self, L2: float | None = None, C_PL: float | None = None, S: int = 1):
        bound = (self.rate_bound(L2, C_PL, S) if L2 is not None and C_PL is not None
                 else np.full(len(self), np.nan))
        gap = self.gap
        gmap = self.grad_map_norm
        for i in range(len(self)):
            yield {
                "iter": self.iters[i], "rho": self.rho[i], "gap": gap[i],
                "step_norm": self.step_norm[i], "grad_map_norm": gmap[i],
                "cumulative_regret": self.cumulative_regret[i], "rate_bound": bound[i],
            }

    def to_csv(self, path, L2=None, C_PL=None, S: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows(L2, C_PL, S):
                writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def resolve_step_size(mdp: TabularMdp, step_size, constants=None) -> float:
    """Numeric step sizes pass through; ``auto``/``certified`` and ``search`` give 1/L2
    for that flavour, from ``constants`` (a ConstantsReport) when supplied."""
    if not isinstance(step_size, str):
        return float(step_size)
    flavour = "certified" if step_size in ("auto", "certified") else "search"
    if constants is not None:
        L2 = constants.certified.L2 if flavour == "certified" else constants.search.L2
    else:
        from avgpg.complexity import step_smoothness
        L2, _ = step_smoothness(mdp, flavour)
    if L2 <= 1e-12:
        # round-off level: every policy is optimal and any step leaves rho fixed
        return 1.0
    return 1.0 / L2


def run_pga(mdp: TabularMdp, pi0: np.ndarray, config: RunConfig = RunConfig(),
            rho_star: float | None = None, constants=None) -> RunTrace:
    pi = check_policy(pi0, mdp.shape).copy()
    eta = resolve_step_size(mdp, config.step_size, constants)
    trace = RunTrace(eta=eta, rho_star=rho_star, record_every=config.record_every)
    regret = 0.0
    for k in range(config.max_iters + 1):
        ev = evaluate(mdp, pi)
        grad = policy_gradient(mdp, pi, ev)
        if not (np.isfinite(ev.rho) and np.all(np.isfinite(grad))):
            raise PgaDiverged(f"non-finite rho or gradient at iteration {k}")
        nxt = project_policy(pi + eta * grad)
        step = float(np.linalg.norm(nxt - pi))
        if rho_star is not None:
            regret += rho_star - ev.rho
        last = k == config.max_iters or (config.stop_tolerance > 0 and step <= config.stop_tolerance)
        if k % config.record_every == 0 or last:
            trace.iters.append(k)
            trace.rho.append(ev.rho)
            trace.step_norm.append(step)
            trace.linear_max.append(linear_form_max(grad, pi))
            trace.cumulative_regret.append(regret if rho_star is not None else np.nan)
            if config.keep_policies:
                trace.policies.append(pi.copy())
        if last:
            break
        pi = nxt
    return trace


def projection_property_check(a: np.ndarray, u: np.ndarray, c: np.ndarray) -> tuple[float, float]:
    """With b = Proj(a + u): <u, b-a> - ||b-a||^2 (>= 0) and <c-b, u-(b-a)> (<= 0)."""
    b = project_policy(np.asarray(a) + np.asarray(u))
    ba = b - a
    p1 = float(np.sum(u * ba) - np.sum(ba * ba))
    p2 = float(np.sum((c - b) * (u - ba)))
    return p1, p2


@dataclass
class InequalityReport:
    name: str
    checked: int
    violations: int
    worst_margin: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def verify_descent_inequalities(trace: RunTrace, L2: float, C_PL: float, S: int,
                                tol: float = 1e-10) -> dict[str, InequalityReport]:
    """Check the per-step ascent, gradient-alignment, suboptimality-recursion and
    rate-envelope inequalities along a fully recorded trace.

    Margins are oriented so that >= -tol is a pass. The alignment check uses the
    exact maximum over the whole policy polytope, which covers every comparison
    policy at once.
    """
    if trace.record_every != 1:
        raise ValueError("verification needs every iterate recorded (record_every=1)")
    rho = np.asarray(trace.rho)
    step = np.asarray(trace.step_norm)
    lin = np.asarray(trace.linear_max)
    n = len(trace)
    reports = {}

    ascent = rho[1:] - rho[:-1] - 0.5 * L2 * step[:-1] ** 2
    reports["ascent"] = _report("ascent", ascent, tol)

    align = 4.0 * np.sqrt(S) * L2 * step[:-1] - lin[1:]
    reports["alignment"] = _report("alignment", align, tol)

    if trace.rho_star is None:
        raise ValueError("gap data missing: run with rho_star to verify suboptimality bounds")
    gap = trace.gap
    scale = 32.0 * L2 * S * C_PL ** 2
    if scale > 0:
        a = gap / scale
        recursion = -(a[1:] ** 2 + a[1:] - a[:-1])
    else:
        recursion = -np.maximum(gap[1:], 0.0)
    reports["recursion"] = _report("recursion", recursion, tol)

    for label, factor in (("envelope", S), ("tight_envelope", 1)):
        bound = trace.rate_bound(L2, C_PL, factor) if n else np.array([])
        finite = np.isfinite(bound)
        reports[label] = _report(label, (bound - gap)[finite], tol)
    return reports


def _report(name, margins, tol) -> InequalityReport:
    margins = np.asarray(margins, dtype=float)
    if margins.size == 0:
        return InequalityReport(name, 0, 0, np.inf)
    return InequalityReport(name, int(margins.size), int(np.sum(margins < -tol)), float(margins.min()))
