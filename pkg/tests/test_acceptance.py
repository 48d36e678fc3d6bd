"""End-to-end acceptance checks, one test per criterion. Each prints a PASS/FAIL line."""
import numpy as np
import pytest

from avgpg.chain import matrix_power_identity_check, neumann_resolvent, resolvent, spectral_check
from avgpg.complexity import Budget, assemble_constants, c_p_estimate, c_r_estimate, kappa_r, kappa_r_enumerate
from avgpg.discounted import discounted_smoothness_constants, halving_gammas, run_discounted_pga, \
    vanishing_discount_check
from avgpg.evaluation import bellman_residual, evaluate
from avgpg.experiments import (ExperimentConfig, ordering_counts, run_bound_verification,
                               run_reward_diameter_sweep, run_size_sweep)
from avgpg.gradient import central_difference, directional_derivative, random_direction
from avgpg.mdp import KERNEL_FAMILIES, REWARD_FAMILIES, GeneratorSpec, generate_mdp, kernel_under_policy, \
    make_policy, make_rng
from avgpg.optimizer import RunConfig, projection_property_check, run_pga
from avgpg.oracle import pdl_check, solve_optimal
from conftest import interior_policy, random_mdp


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def _sizes(rng, n, lo_a=1):
    return [(int(rng.integers(1, 7)), int(rng.integers(lo_a, 7))) for _ in range(n)]


def test_criterion_1_gradient_matches_finite_differences(report):
    rng = make_rng(101)
    worst = 0.0
    for i, (S, A) in enumerate(_sizes(rng, 100, lo_a=2)):
        mdp = random_mdp(S, A, seed=i)
        pi = interior_policy(rng, S, A)
        ev = evaluate(mdp, pi)
        for _ in range(20):
            u = random_direction(rng, pi)
            exact = directional_derivative(mdp, pi, u, ev)
            fd = central_difference(mdp, pi, u, eps=1e-6)
            worst = max(worst, abs(exact - fd) / max(abs(exact), 1e-12))
    report(1, worst <= 1e-5, f"worst relative error {worst:.2e} over 2000 directions")


def test_criterion_2_projected_bellman_machinery(report):
    rng = make_rng(202)
    worst = dict(residual=0.0, mean=0.0, neumann=0.0, power=0.0, radius=0.0)
    for i, (S, A) in enumerate(_sizes(rng, 100)):
        mdp = random_mdp(S, A, seed=i)
        pi = rng.dirichlet(np.ones(A), size=S)
        ev = evaluate(mdp, pi)
        P = kernel_under_policy(mdp, pi)
        worst["residual"] = max(worst["residual"], bellman_residual(mdp, pi, ev.v, ev.rho))
        worst["mean"] = max(worst["mean"], abs(ev.v.sum()))
        worst["neumann"] = max(worst["neumann"], np.abs(resolvent(P) - neumann_resolvent(P, 500)).max())
        worst["power"] = max(worst["power"], max(matrix_power_identity_check(P, k) for k in range(1, 51)))
        worst["radius"] = max(worst["radius"], spectral_check(P)[0])
    ok = (worst["residual"] <= 1e-8 and worst["mean"] <= 1e-10 and worst["neumann"] <= 1e-8
          and worst["power"] <= 1e-8 and worst["radius"] < 1)
    report(2, ok, ", ".join(f"{k}={v:.2e}" for k, v in worst.items()))


def test_criterion_3_performance_difference(report):
    rng = make_rng(303)
    worst = 0.0
    for i, (S, A) in enumerate(_sizes(rng, 100)):
        mdp = random_mdp(S, A, seed=1000 + i)
        sol = solve_optimal(mdp)
        worst = max(worst, pdl_check(mdp, rng.dirichlet(np.ones(A), size=S), sol))
    report(3, worst <= 1e-8, f"worst residual {worst:.2e} over 100 pairs")


@pytest.fixture(scope="module")
def bound_suite():
    cfg = ExperimentConfig.from_dict({"sizes": [[4, 3]], "seeds": list(range(100)), "iterations": 1000,
                                      "step_size": "certified"}, "bound-verify")
    return run_bound_verification(cfg, workers=1)


def test_criterion_4_monotone_ascent(report, bound_suite):
    data, summary = bound_suite
    ok = summary["failed_instances"] == 0 and summary["ascent_violations"] == 0
    rho_drop = max(-min(r["ascent_margin"] for r in data.rows), 0.0)
    report(4, ok, f"{summary['ascent_violations']} ascent violations on {summary['instances']} instances, "
                  f"worst margin shortfall {rho_drop:.1e}")


def test_criterion_5_rate_envelope(report, bound_suite):
    data, summary = bound_suite
    ok = (summary["failed_instances"] == 0 and summary["envelope_violations"] == 0
          and summary["recursion_violations"] == 0)
    report(5, ok, f"{summary['envelope_violations']} envelope and {summary['recursion_violations']} "
                  f"recursion violations on {summary['instances']} instances "
                  f"({summary['tight_envelope_violations']} without the state factor)")


def test_criterion_6_logarithmic_regret(report):
    T = np.arange(100, 10_001)
    logs = np.log(T)
    worst_ratio, details = -np.inf, []
    for seed in range(20):
        mdp = random_mdp(4, 3, seed=seed)
        sol = solve_optimal(mdp)
        const = assemble_constants(mdp, Budget(random_policies=50), sol.pi_star).search
        trace = run_pga(mdp, make_policy("uniform", 4, 3), RunConfig(step_size=1 / const.L2, max_iters=10_000),
                        rho_star=sol.rho_star)
        # cumulative_regret[k] sums gaps of iterates 0..k, so R(T) is entry T - 1
        regret = np.asarray(trace.cumulative_regret)[T - 1]
        c = float(np.max(regret / logs))
        tail = T >= 1000
        slope = float(np.polyfit(logs[tail], regret[tail] / logs[tail], 1)[0])
        worst_ratio = max(worst_ratio, slope / c if c > 0 else -np.inf)
        details.append(np.isfinite(c) and slope <= 0.05 * c)
    report(6, all(details), f"{sum(details)}/20 instances; largest slope/c {worst_ratio:.3f}")


def test_criterion_7_constant_certificates(report):
    failures, count, compared = [], 0, 0
    for kfam in KERNEL_FAMILIES:
        for rfam in REWARD_FAMILIES:
            for S, A in ((1, 3), (3, 2), (4, 4), (6, 3), (8, 5)):
                for seed in range(2):
                    mdp = generate_mdp(GeneratorSpec(S, A, kfam, rfam, seed=seed, sparsity=min(2, S), delta=0.7))
                    count += 1
                    kr = kappa_r(mdp)
                    cp = c_p_estimate(mdp).value
                    cr = c_r_estimate(mdp).value
                    if A ** S <= 4096:
                        compared += 1
                        if abs(kr - kappa_r_enumerate(mdp)) > 1e-12:
                            failures.append(("kappa_r enumeration", kfam, rfam, S, A))
                    if kr > 2 or cp > np.sqrt(A) + 1e-12 or cr > np.sqrt(A) + 1e-12:
                        failures.append(("range", kfam, rfam, S, A))
                    for g in (0.5, 0.9, 0.99):
                        c = discounted_smoothness_constants(mdp, g, Budget(random_policies=10))
                        if c["C_m_hat"] > 1 / (1 - g) + 1e-9:
                            failures.append(("C_m_hat", kfam, rfam, S, A, g))
    report(7, not failures, f"{count} instances, {compared} enumeration comparisons, failures {failures[:3]}")


def test_criterion_8_projection_properties(report):
    rng = make_rng(808)
    worst1, worst2 = np.inf, -np.inf
    for _ in range(10_000):
        S, A = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        a = rng.dirichlet(np.ones(A), size=S)
        c = rng.dirichlet(np.ones(A), size=S)
        u = rng.normal(scale=float(rng.choice([1e-3, 0.1, 1.0, 10.0])), size=(S, A))
        p1, p2 = projection_property_check(a, u, c)
        worst1, worst2 = min(worst1, p1), max(worst2, p2)
    report(8, worst1 >= -1e-10 and worst2 <= 1e-10,
           f"min <u,b-a>-|b-a|^2 = {worst1:.1e}, max <c-b,u-(b-a)> = {worst2:.1e}")


# A common fixed step for both sweeps, so speed differences come from the instances.
SWEEP_STEP = 0.1


def test_criterion_9_qualitative_sweeps(report):
    seeds = list(range(10))
    size_cfg = ExperimentConfig.from_dict({"sizes": [[3, 3], [5, 5], [8, 8]], "seeds": seeds, "iterations": 5000,
                                           "step_size": SWEEP_STEP}, "size-sweep")
    size_pass, n = ordering_counts(run_size_sweep(size_cfg), "seed", "S", ("S", "A", "seed"))
    diam_cfg = ExperimentConfig.from_dict({"sizes": [[8, 8]], "seeds": seeds, "iterations": 5000,
                                           "deltas": [0.0, 0.25, 1.0], "step_size": SWEEP_STEP},
                                          "reward-diameter")
    diam_pass, m = ordering_counts(run_reward_diameter_sweep(diam_cfg), "seed", "delta", ("seed", "delta"))
    report(9, size_pass >= 7 and diam_pass >= 7,
           f"size ordering {size_pass}/{n} seeds, reward-diameter ordering {diam_pass}/{m} seeds")


def test_criterion_10_vanishing_discount(report):
    gammas = halving_gammas(10)
    monotone = 0
    for seed in range(20):
        mdp = random_mdp(5, 3, seed=seed)
        gaps = [row["gap"] for row in vanishing_discount_check(mdp, make_policy("random", 5, 3, seed=seed), gammas)]
        monotone += bool(np.all(np.diff(gaps) < 0))
    mdp = random_mdp(3, 2, seed=0)
    scaled = [(1 - g) * run_discounted_pga(mdp, make_policy("uniform", 3, 2), g, iters=1).bound[1] for g in gammas]
    diverges = bool(np.all(np.diff(scaled) > 0))
    report(10, monotone == 20 and diverges,
           f"gap monotone on {monotone}/20 instances; scaled envelope increasing: {diverges}")
