"""Batch experiments: convergence sweeps, constant scaling, bound verification and
the discounted comparison, each producing a versioned, deterministically ordered CSV."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from avgpg.complexity import (Budget, assemble_constants, c_p_estimate, c_r_estimate, step_smoothness)
from avgpg.discounted import (discounted_bound, halving_gammas, occupancy,
                              optimal_discounted, vanishing_discount_check)
from avgpg.mdp import (GeneratorSpec, MdpError, TabularMdp, _stream_key, generate_mdp,
                       interpolate_kernel, make_policy)
from avgpg.optimizer import RunConfig, run_pga, verify_descent_inequalities
from avgpg.oracle import EXHAUSTIVE_CAP, solve_optimal

log = logging.getLogger("avgpg")

KINDS = ("size-sweep", "reward-diameter", "cp-sweep", "constant-scaling", "bound-verify", "discount-compare")
CONFIG_KINDS = KINDS + ("constants",)
WORKERS_ENV = "AVGPG_WORKERS"
SCHEMA_VERSION = 1

COLUMNS = {
    "size-sweep": ("S", "A", "seed", "iter", "rho", "improvement", "eta", "status"),
    "reward-diameter": ("S", "A", "seed", "delta", "iter", "rho", "improvement", "C_r", "eta", "status"),
    "cp-sweep": ("S", "A", "seed", "level", "weight", "iter", "rho", "improvement", "C_p", "eta", "status"),
    "constant-scaling": ("family", "constant", "S", "A", "instance", "value", "provenance",
                         "sqrt_A", "ratio", "status"),
    "bound-verify": ("S", "A", "seed", "rho_star", "gap0", "L2", "C_PL", "L2_provenance", "eta", "iterations",
                     "ascent_violations", "alignment_violations", "recursion_violations",
                     "envelope_violations", "tight_envelope_violations", "ascent_margin",
                     "recursion_margin", "envelope_margin", "status"),
    "discount-compare": ("S", "A", "seed", "gamma", "scaled_value", "rho", "abs_gap",
                         "scaled_bound", "mismatch", "status"),
}
PLOT_COLUMNS = ("x", "y", "group")

# families for the constant-scaling study: (label, constant, kernel family, reward family)
SCALING_FAMILIES = {
    "dirichlet-uniform": ("C_p", "dirichlet-uniform", "uniform-range"),
    "permutation-deterministic": ("C_p", "permutation-deterministic", "uniform-range"),
    "sparse-rewards": ("C_r", "dirichlet-uniform", "sparse"),
    "uniform-rewards": ("C_r", "dirichlet-uniform", "uniform-range"),
    "two-level-rewards": ("C_r", "dirichlet-uniform", "two-level"),
}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

_DEFAULTS = {
    "size-sweep": {"sizes": [[3, 3], [10, 10], [40, 40], [60, 60]], "iterations": 20000},
    "reward-diameter": {"sizes": [[20, 20]], "deltas": [0.0, 0.25, 0.5, 1.0], "iterations": 20000,
                        "reward_family": "diameter-controlled"},
    "cp-sweep": {"sizes": [[10, 10]], "cp_weights": [0.1, 0.5, 1.0], "iterations": 20000},
    "constant-scaling": {"sizes": [[s, a] for s in (5, 10, 20) for a in (2, 4, 8, 16)],
                         "instances": 5, "families": list(SCALING_FAMILIES)},
    "bound-verify": {"sizes": [[4, 3]], "seeds": list(range(100)), "iterations": 1000},
    "discount-compare": {"sizes": [[4, 3]], "seeds": list(range(20)), "gammas": halving_gammas(10)},
    "constants": {"sizes": [[4, 3]]},
}
CP_LEVELS = ("low", "medium", "high")


@dataclass
class ExperimentConfig:
    """Flat experiment description; ``from_dict`` documents every accepted key.

    ``step_size`` is a positive number, ``"certified"`` (1/L2 from certified
    constants) or ``"search"`` (1/L2 from search estimates).
    """

    kind: str
    seeds: list = field(default_factory=lambda: [0])
    sizes: list = field(default_factory=lambda: [[3, 3]])
    iterations: int = 1000
    step_size: float | str = "certified"
    record_every: int = 1
    kernel_family: str = "dirichlet-uniform"
    reward_family: str = "uniform-range"
    reward_range: list = field(default_factory=lambda: [-1.0, 1.0])
    sparsity: int = 2
    deltas: list = field(default_factory=lambda: [0.0, 0.25, 1.0])
    cp_weights: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    instances: int = 5
    families: list = field(default_factory=lambda: list(SCALING_FAMILIES))
    restrict_state_constant: bool = False
    gammas: list = field(default_factory=lambda: halving_gammas(10))
    bound_k: int = 1
    budget_random_policies: int = 200
    budget_enum_cap: int = 4096
    budget_sign_cap: int = 1 << 14
    budget_seed: int = 0
    output: str | None = None

    @classmethod
    def from_dict(cls, doc: dict, kind: str | None = None) -> "ExperimentConfig":
        doc = dict(doc)
        file_kind = doc.pop("kind", None)
        if kind is None:
            kind = file_kind
        elif file_kind is not None and file_kind != kind:
            raise ConfigError(f"config is for {file_kind!r}, not {kind!r}")
        if kind not in CONFIG_KINDS:
            raise ConfigError(f"unknown experiment kind {kind!r}")
        names = {f.name for f in dataclasses.fields(cls)} - {"kind"}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**_DEFAULTS[kind], **doc}
        cfg = cls(kind=kind, **merged)
        try:
            cfg.validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path, kind: str | None = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc, kind)

    @property
    def budget(self) -> Budget:
        return Budget(random_policies=self.budget_random_policies, enum_cap=self.budget_enum_cap,
                      sign_cap=self.budget_sign_cap, seed=self.budget_seed)

    def spec(self, S: int, A: int, seed: int, **overrides) -> GeneratorSpec:
        kw = dict(S=S, A=A, kernel_family=self.kernel_family, reward_family=self.reward_family,
                  seed=seed, sparsity=self.sparsity, reward_range=tuple(self.reward_range))
        kw.update(overrides)
        return GeneratorSpec(**kw)

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        if not self.sizes or not all(len(sa) == 2 for sa in self.sizes):
            raise ConfigError("sizes must be a nonempty list of [S, A] pairs")
        if self.iterations < 0 or self.record_every < 1:
            raise ConfigError("iterations must be >= 0 and record_every >= 1")
        if isinstance(self.step_size, str):
            if self.step_size not in ("certified", "search"):
                raise ConfigError(f"unknown step_size rule {self.step_size!r}")
        elif not (isinstance(self.step_size, (int, float)) and self.step_size > 0):
            raise ConfigError("numeric step_size must be positive")
        if self.kind == "constant-scaling":
            bad = [f for f in self.families if f not in SCALING_FAMILIES]
            if bad:
                raise ConfigError(f"unknown scaling families {bad}")
            if self.instances < 1:
                raise ConfigError("instances must be >= 1")
        if self.kind == "discount-compare" and not all(0 < g < 1 for g in self.gammas):
            raise ConfigError("gammas must lie in (0, 1)")
        if self.kind == "bound-verify":
            if self.record_every != 1:
                raise ConfigError("bound-verify needs record_every = 1")
            for S, A in self.sizes:
                if A ** S > EXHAUSTIVE_CAP:
                    raise ConfigError(f"({S}, {A}) is too large for the exact oracle (A^S > {EXHAUSTIVE_CAP})")
        try:
            for S, A in self.sizes:
                self.spec(S, A, self.seeds[0]).validate()
        except MdpError as exc:
            raise ConfigError(str(exc)) from exc


# -- datasets ----------------------------------------------------------------------

@dataclass
class Dataset:
    kind: str
    columns: tuple
    rows: list

    @property
    def schema(self) -> str:
        return f"{self.kind}/{SCHEMA_VERSION}"

    def failures(self) -> list[dict]:
        return [r for r in self.rows if r.get("status", "ok") != "ok"]

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write(self, path) -> None:
        write_csv(path, self.columns, self.rows, self.schema)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, columns, rows, schema: str | None = None) -> None:
    """Leading ``#schema=...`` line (when given), then a header and one line per row."""
    with open(path, "w", newline="") as fh:
        if schema is not None:
            fh.write(f"#schema={schema}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def read_csv(path) -> tuple[str | None, list[dict]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        schema = first.strip()[len("#schema="):] if first.startswith("#schema=") else None
        if schema is None:
            fh.seek(0)
        return schema, list(csv.DictReader(fh))


# -- step sizes and curves ---------------------------------------------------------

def choose_step(mdp: TabularMdp, cfg: ExperimentConfig) -> float:
    if not isinstance(cfg.step_size, str):
        return float(cfg.step_size)
    L2, _ = step_smoothness(mdp, cfg.step_size, cfg.budget)
    return 1.0 / L2 if L2 > 0 else 1.0


def iterations_to_fraction(improvement, fraction: float = 0.9, tol: float = 1e-12, iters=None) -> int:
    """First iteration whose improvement reaches ``fraction`` of the final one.

    A curve whose final improvement is at most ``tol`` (already optimal) gives 0.
    """
    imp = np.asarray(improvement, dtype=float)
    if imp.size == 0 or imp[-1] <= tol:
        return 0
    idx = int(np.argmax(imp >= fraction * imp[-1]))
    return int(iters[idx]) if iters is not None else idx


def _curve_rows(mdp: TabularMdp, cfg: ExperimentConfig, key: dict) -> list[dict]:
    eta = choose_step(mdp, cfg)
    S, A = mdp.shape
    trace = run_pga(mdp, make_policy("uniform", S, A),
                    RunConfig(step_size=eta, max_iters=cfg.iterations, record_every=cfg.record_every))
    imp = trace.improvement
    return [{**key, "iter": trace.iters[i], "rho": trace.rho[i], "improvement": imp[i],
             "eta": eta, "status": "ok"} for i in range(len(trace))]


def _error_row(columns, key: dict, exc: Exception) -> dict:
    row = {c: math.nan for c in columns}
    row.update(key)
    row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


# -- per-task workers (module-level so process pools can pickle them) --------------

def _task_size(cfg, S, A, seed):
    return _curve_rows(generate_mdp(cfg.spec(S, A, seed)), cfg, {"S": S, "A": A, "seed": seed})


def _task_diameter(cfg, S, A, seed, delta):
    mdp = generate_mdp(cfg.spec(S, A, seed, delta=delta))
    cr = c_r_estimate(mdp, cfg.budget).value
    return [{**r, "C_r": cr} for r in _curve_rows(mdp, cfg, {"S": S, "A": A, "seed": seed, "delta": delta})]


def cp_instance(cfg: ExperimentConfig, S: int, A: int, seed: int, weight: float) -> TabularMdp:
    """Kernel (1-w) B + w K: B is action-independent, K action-distinct; rewards fixed per seed."""
    distinct = generate_mdp(cfg.spec(S, A, seed))
    rng = np.random.Generator(np.random.Philox(key=_stream_key(seed, 200)))
    base = rng.dirichlet(np.ones(S), size=S)
    return TabularMdp(interpolate_kernel(base, distinct.kernel, weight), distinct.reward, distinct.reward_range)


def _task_cp(cfg, S, A, seed, level, weight):
    mdp = cp_instance(cfg, S, A, seed, weight)
    cp = c_p_estimate(mdp, cfg.budget).value
    key = {"S": S, "A": A, "seed": seed, "level": level, "weight": weight}
    return [{**r, "C_p": cp} for r in _curve_rows(mdp, cfg, key)]


def _task_scaling(cfg, family, S, A, instance):
    constant, kfam, rfam = SCALING_FAMILIES[family]
    seed = cfg.seeds[0] * 1000 + instance
    mdp = generate_mdp(cfg.spec(S, A, seed, kernel_family=kfam, reward_family=rfam))
    est_fn = c_p_estimate if constant == "C_p" else c_r_estimate
    est = est_fn(mdp, cfg.budget, restrict_state_constant=cfg.restrict_state_constant)
    root_a = math.sqrt(A)
    return [{"family": family, "constant": constant, "S": S, "A": A, "instance": instance,
             "value": est.value, "provenance": est.provenance, "sqrt_A": root_a,
             "ratio": est.value / root_a, "status": "ok"}]


def _task_bound(cfg, S, A, seed):
    mdp = generate_mdp(cfg.spec(S, A, seed))
    sol = solve_optimal(mdp)
    report = assemble_constants(mdp, cfg.budget, sol.pi_star)
    const = report.certified if cfg.step_size == "certified" else report.search
    eta = float(cfg.step_size) if not isinstance(cfg.step_size, str) else (1.0 / const.L2 if const.L2 > 0 else 1.0)
    trace = run_pga(mdp, make_policy("uniform", S, A), RunConfig(step_size=eta, max_iters=cfg.iterations),
                    rho_star=sol.rho_star)
    checks = verify_descent_inequalities(trace, const.L2, const.C_PL, S)
    return [{"S": S, "A": A, "seed": seed, "rho_star": sol.rho_star, "gap0": float(trace.gap[0]),
             "L2": const.L2, "C_PL": const.C_PL, "L2_provenance": const.provenance["L2"], "eta": eta,
             "iterations": cfg.iterations,
             "ascent_violations": checks["ascent"].violations,
             "alignment_violations": checks["alignment"].violations,
             "recursion_violations": checks["recursion"].violations,
             "envelope_violations": checks["envelope"].violations,
             "tight_envelope_violations": checks["tight_envelope"].violations,
             "ascent_margin": checks["ascent"].worst_margin,
             "recursion_margin": checks["recursion"].worst_margin,
             "envelope_margin": checks["envelope"].worst_margin, "status": "ok"}]


def _task_discount(cfg, S, A, seed):
    mdp = generate_mdp(cfg.spec(S, A, seed))
    pi = make_policy("random", S, A, seed=seed)
    rows = []
    for rec in vanishing_discount_check(mdp, pi, cfg.gammas):
        g = rec["gamma"]
        pi_star = optimal_discounted(mdp, g)
        mismatch = float(np.max(occupancy(mdp, pi_star, g) * S))
        scaled = float(discounted_bound(cfg.bound_k, g, S, A, mismatch)) * (1.0 - g)
        rows.append({"S": S, "A": A, "seed": seed, "gamma": g, "scaled_value": rec["scaled_value"],
                     "rho": rec["rho"], "abs_gap": rec["gap"], "scaled_bound": scaled,
                     "mismatch": mismatch, "status": "ok"})
    return rows


def _tasks(cfg: ExperimentConfig):
    """(worker, args, key) triples; the key fills error rows."""
    k = cfg.kind
    if k == "constant-scaling":
        for family in cfg.families:
            for S, A in cfg.sizes:
                for i in range(cfg.instances):
                    yield _task_scaling, (family, S, A, i), {"family": family, "S": S, "A": A, "instance": i,
                                                             "constant": SCALING_FAMILIES[family][0]}
        return
    for S, A in cfg.sizes:
        for seed in cfg.seeds:
            base = {"S": S, "A": A, "seed": seed}
            if k == "size-sweep":
                yield _task_size, (S, A, seed), base
            elif k == "reward-diameter":
                for d in cfg.deltas:
                    yield _task_diameter, (S, A, seed, float(d)), {**base, "delta": float(d)}
            elif k == "cp-sweep":
                for level, w in zip(CP_LEVELS, cfg.cp_weights):
                    yield _task_cp, (S, A, seed, level, float(w)), {**base, "level": level, "weight": float(w)}
            elif k == "bound-verify":
                yield _task_bound, (S, A, seed), base
            elif k == "discount-compare":
                yield _task_discount, (S, A, seed), base


def _guarded(worker, cfg, args, key, columns):
    try:
        return worker(cfg, *args)
    except Exception as exc:  # recorded per row; the batch continues
        log.warning("task %s failed: %s", key, exc)
        return [_error_row(columns, key, exc)]


_SORT_KEYS = {
    "size-sweep": ("S", "A", "seed", "iter"),
    "reward-diameter": ("S", "A", "seed", "delta", "iter"),
    "cp-sweep": ("S", "A", "seed", "weight", "iter"),
    "constant-scaling": ("family", "S", "A", "instance"),
    "bound-verify": ("S", "A", "seed"),
    "discount-compare": ("S", "A", "seed", "gamma"),
}


def resolve_workers(requested: int | None = None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
        log.info("worker count %d taken from %s", n, WORKERS_ENV)
        return max(1, n)
    return max(1, requested or 1)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> Dataset:
    """Fan tasks out over a bounded pool; rows are sorted by key so the schedule
    never changes the output."""
    columns = COLUMNS[cfg.kind]
    tasks = list(_tasks(cfg))
    n = resolve_workers(workers)
    log.info("%s: %d tasks on %d worker(s)", cfg.kind, len(tasks), n)
    if n == 1 or len(tasks) <= 1:
        chunks = [_guarded(w, cfg, a, k, columns) for w, a, k in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            futures = [pool.submit(_guarded, w, cfg, a, k, columns) for w, a, k in tasks]
            chunks = [f.result() for f in futures]
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: tuple(_sort_value(r.get(c)) for c in _SORT_KEYS[cfg.kind]))
    return Dataset(cfg.kind, columns, rows)


def _sort_value(v):
    if isinstance(v, str):
        return (1, v)
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return (2, 0)
    return (0, v)


def run_size_sweep(cfg: ExperimentConfig, workers=None) -> Dataset:
    return run_experiment(_as(cfg, "size-sweep"), workers)


def run_reward_diameter_sweep(cfg: ExperimentConfig, workers=None) -> Dataset:
    return run_experiment(_as(cfg, "reward-diameter"), workers)


def run_cp_sweep(cfg: ExperimentConfig, workers=None) -> Dataset:
    return run_experiment(_as(cfg, "cp-sweep"), workers)


def run_constant_scaling(cfg: ExperimentConfig, workers=None) -> Dataset:
    return run_experiment(_as(cfg, "constant-scaling"), workers)


def run_bound_verification(cfg: ExperimentConfig, workers=None) -> tuple[Dataset, dict]:
    data = run_experiment(_as(cfg, "bound-verify"), workers)
    return data, bound_summary(data)


def run_discount_compare(cfg: ExperimentConfig, workers=None) -> Dataset:
    return run_experiment(_as(cfg, "discount-compare"), workers)


def _as(cfg: ExperimentConfig, kind: str) -> ExperimentConfig:
    if cfg.kind != kind:
        raise ConfigError(f"expected a {kind} config, got {cfg.kind}")
    return cfg


BOUND_CHECKS = ("ascent", "alignment", "recursion", "envelope", "tight_envelope")


def bound_summary(data: Dataset) -> dict:
    ok_rows = [r for r in data.rows if r["status"] == "ok"]
    out = {"instances": len(data.rows), "failed_instances": len(data.rows) - len(ok_rows)}
    for name in BOUND_CHECKS:
        out[f"{name}_violations"] = int(sum(r[f"{name}_violations"] for r in ok_rows))
    out["pass"] = out["failed_instances"] == 0 and all(
        out[f"{n}_violations"] == 0 for n in ("ascent", "recursion", "envelope"))
    return out


# -- summaries over curve datasets -------------------------------------------------

def curves(data: Dataset, group_cols) -> dict:
    """{group key: (iters, improvement)} for every successful curve."""
    out: dict = {}
    for r in data.rows:
        if r["status"] != "ok":
            continue
        key = tuple(r[c] for c in group_cols)
        its, imp = out.setdefault(key, ([], []))
        its.append(r["iter"])
        imp.append(r["improvement"])
    return {k: (np.array(v[0]), np.array(v[1])) for k, v in out.items()}


def iterations_to_90(data: Dataset, group_cols) -> dict:
    return {k: iterations_to_fraction(imp, 0.9, iters=its) for k, (its, imp) in curves(data, group_cols).items()}


def ordering_counts(data: Dataset, seed_col: str, order_col: str, group_cols) -> tuple[int, int]:
    """Seeds whose iterations-to-90% is nondecreasing along ``order_col``, and seed count."""
    t90 = iterations_to_90(data, group_cols)
    by_seed: dict = {}
    for key, t in t90.items():
        rec = dict(zip(group_cols, key))
        by_seed.setdefault(rec[seed_col], []).append((rec[order_col], t))
    passed = 0
    for seq in by_seed.values():
        vals = [t for _, t in sorted(seq)]
        passed += all(a <= b for a, b in zip(vals, vals[1:]))
    return passed, len(by_seed)


# -- plot data -----------------------------------------------------------------------

def emit_plotdata(data: Dataset, kind: str | None = None) -> list[dict]:
    """Tidy (x, y, group) series for an external plotting tool."""
    kind = kind or data.kind
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    ok = [r for r in data.rows if r.get("status") == "ok"]
    if kind in ("size-sweep", "reward-diameter", "cp-sweep"):
        label = {"size-sweep": lambda r: f"{r['S']}x{r['A']}",
                 "reward-diameter": lambda r: f"delta={r['delta']}",
                 "cp-sweep": lambda r: f"C_p-{r['level']}"}[kind]
        acc: dict = {}
        for r in ok:
            acc.setdefault((label(r), r["iter"]), []).append(r["improvement"])
        return [{"x": it, "y": float(np.mean(v)), "group": g} for (g, it), v in sorted(acc.items())]
    if kind == "constant-scaling":
        return [{"x": r["A"], "y": r["value"], "group": f"{r['family']}:{r['constant']}:S={r['S']}"} for r in ok]
    if kind == "bound-verify":
        return [{"x": r["seed"], "y": r["envelope_margin"], "group": f"{r['S']}x{r['A']}"} for r in ok]
    rows = [{"x": r["gamma"], "y": r["abs_gap"], "group": f"gap:seed={r['seed']}"} for r in ok]
    rows += [{"x": r["gamma"], "y": r["scaled_bound"], "group": f"bound:seed={r['seed']}"} for r in ok]
    return rows


def write_plotdata(data: Dataset, path, kind: str | None = None) -> None:
    write_csv(path, PLOT_COLUMNS, emit_plotdata(data, kind), f"plot/{SCHEMA_VERSION}")
