import json
import math

import numpy as np
import pytest

from avgpg.complexity import c_p_estimate
from avgpg.experiments import (COLUMNS, PLOT_COLUMNS, ConfigError, Dataset, ExperimentConfig, cp_instance, curves,
                               emit_plotdata, iterations_to_fraction, ordering_counts, read_csv, resolve_workers,
                               run_bound_verification, run_constant_scaling, run_cp_sweep, run_discount_compare,
                               run_experiment, run_reward_diameter_sweep, run_size_sweep, write_plotdata)
from avgpg.mdp import generate_mdp


def cfg(kind, **kw):
    return ExperimentConfig.from_dict(kw, kind)


def test_pinned_headers():
    assert COLUMNS["size-sweep"] == ("S", "A", "seed", "iter", "rho", "improvement", "eta", "status")
    assert COLUMNS["reward-diameter"] == ("S", "A", "seed", "delta", "iter", "rho", "improvement", "C_r", "eta",
                                          "status")
    assert COLUMNS["cp-sweep"] == ("S", "A", "seed", "level", "weight", "iter", "rho", "improvement", "C_p", "eta",
                                   "status")
    assert COLUMNS["constant-scaling"] == ("family", "constant", "S", "A", "instance", "value", "provenance",
                                           "sqrt_A", "ratio", "status")
    assert COLUMNS["bound-verify"][:5] == ("S", "A", "seed", "rho_star", "gap0")
    assert COLUMNS["discount-compare"] == ("S", "A", "seed", "gamma", "scaled_value", "rho", "abs_gap",
                                           "scaled_bound", "mismatch", "status")
    assert PLOT_COLUMNS == ("x", "y", "group")


def test_config_defaults_follow_experimental_setups():
    size = cfg("size-sweep")
    assert size.sizes == [[3, 3], [10, 10], [40, 40], [60, 60]] and size.iterations == 20000
    assert size.step_size == "certified"
    assert cfg("reward-diameter").sizes == [[20, 20]]
    assert len(cfg("bound-verify").seeds) == 100


@pytest.mark.parametrize("doc", [
    {"seeds": []}, {"colour": "red"}, {"step_size": -1}, {"step_size": "adam"}, {"sizes": [[3]]},
    {"seeds": [-1]}, {"iterations": -5}, {"kind": "cp-sweep"},
])
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc, "size-sweep")


def test_config_kind_specific_errors():
    with pytest.raises(ConfigError):
        cfg("bound-verify", sizes=[[20, 20]])
    with pytest.raises(ConfigError):
        cfg("constant-scaling", families=["nope"])
    with pytest.raises(ConfigError):
        cfg("discount-compare", gammas=[1.0])
    with pytest.raises(ConfigError):
        cfg("size-sweep", kernel_family="gaussian")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({}, "nonsense")


def test_config_load(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"kind": "size-sweep", "seeds": [3], "sizes": [[3, 3]], "iterations": 10}))
    c = ExperimentConfig.load(path)
    assert c.kind == "size-sweep" and c.seeds == [3]
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_iterations_to_fraction():
    assert iterations_to_fraction([0, 0, 0]) == 0
    assert iterations_to_fraction([0.0, 0.5, 0.95, 1.0]) == 2
    assert iterations_to_fraction([0.0, 0.5, 0.95, 1.0], iters=[0, 10, 20, 30]) == 20
    assert iterations_to_fraction([]) == 0


def test_single_size_gives_one_monotone_curve():
    data = run_size_sweep(cfg("size-sweep", sizes=[[3, 3]], seeds=[0], iterations=200))
    groups = curves(data, ("S", "A", "seed"))
    assert list(groups) == [(3, 3, 0)]
    _, imp = groups[(3, 3, 0)]
    assert imp[0] == 0 and np.all(np.diff(imp) >= -1e-12)
    assert len({r["eta"] for r in data.rows}) == 1


def test_runs_are_byte_identical(tmp_path):
    c = cfg("size-sweep", sizes=[[3, 3], [4, 2]], seeds=[0, 1], iterations=50)
    run_size_sweep(c).write(tmp_path / "a.csv")
    run_size_sweep(c).write(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    schema, rows = read_csv(tmp_path / "a.csv")
    assert schema == "size-sweep/1" and len(rows) == 4 * 51


def test_parallel_schedule_does_not_change_bytes(tmp_path, monkeypatch):
    monkeypatch.delenv("AVGPG_WORKERS", raising=False)
    c = cfg("size-sweep", sizes=[[3, 3], [4, 2]], seeds=[0, 1], iterations=30)
    run_experiment(c, workers=1).write(tmp_path / "serial.csv")
    run_experiment(c, workers=2).write(tmp_path / "pool.csv")
    assert (tmp_path / "serial.csv").read_bytes() == (tmp_path / "pool.csv").read_bytes()


def test_reward_diameter_sweep():
    data = run_reward_diameter_sweep(cfg("reward-diameter", sizes=[[4, 3]], seeds=[0], deltas=[0.0, 0.5, 1.0],
                                         iterations=100, step_size=0.1))
    groups = curves(data, ("seed", "delta"))
    assert np.all(np.abs(groups[(0, 0.0)][1]) <= 1e-12)          # flat curve at delta = 0
    for _, imp in groups.values():
        assert np.all(np.diff(imp) >= -1e-12)
    c_r = {r["delta"]: r["C_r"] for r in data.rows}
    assert c_r[0.0] <= 1e-15 and c_r[0.5] == pytest.approx(0.5 * c_r[1.0])


def test_reward_diameter_holds_kernel_fixed():
    c = cfg("reward-diameter", sizes=[[5, 3]], seeds=[2])
    a = generate_mdp(c.spec(5, 3, 2, delta=0.25))
    b = generate_mdp(c.spec(5, 3, 2, delta=1.0))
    assert a.kernel.tobytes() == b.kernel.tobytes()


def test_cp_sweep():
    c = cfg("cp-sweep", sizes=[[4, 3]], seeds=[0, 1], cp_weights=[0.0, 0.5, 1.0], iterations=50, step_size=0.1)
    assert c_p_estimate(cp_instance(c, 4, 3, 0, 0.0)).value <= 1e-15
    data = run_cp_sweep(c)
    for seed in (0, 1):
        cp = {r["level"]: r["C_p"] for r in data.rows if r["seed"] == seed}
        assert cp["low"] <= 1e-15 < cp["medium"] < cp["high"] <= math.sqrt(3)
        # the interpolation is linear in the weight, and so is the diameter
        assert cp["medium"] == pytest.approx(0.5 * cp["high"])


def test_constant_scaling():
    c = cfg("constant-scaling", sizes=[[5, 2], [5, 8], [5, 32]], instances=5)
    data = run_constant_scaling(c)
    cells = {}
    for r in data.rows:
        cells.setdefault((r["family"], r["A"]), []).append(r)
        assert r["value"] <= r["sqrt_A"] + 1e-12
    assert all(len(v) == 5 for v in cells.values())
    ratio = {k: np.mean([r["ratio"] for r in v]) for k, v in cells.items()}
    assert ratio[("dirichlet-uniform", 2)] > ratio[("dirichlet-uniform", 8)] > ratio[("dirichlet-uniform", 32)]
    assert min(ratio[("two-level-rewards", A)] for A in (2, 8, 32)) >= 0.9


def test_bound_verification_small():
    data, summary = run_bound_verification(cfg("bound-verify", seeds=[0, 1, 2], iterations=100,
                                               budget_random_policies=20))
    assert summary["pass"] and summary["instances"] == 3
    assert all(r["L2_provenance"] in ("upper-bound", "sampled-envelope") for r in data.rows)


def test_bound_verification_trivial_instance():
    c = cfg("bound-verify", sizes=[[3, 2]], seeds=[0], iterations=20, reward_family="diameter-controlled",
            budget_random_policies=10)
    c.spec = lambda S, A, seed, **kw: ExperimentConfig.spec(c, S, A, seed, delta=0.0, **kw)
    data, summary = run_bound_verification(c)
    assert summary["pass"]
    # a zero-diameter reward on a shared kernel leaves every policy optimal
    assert data.rows[0]["gap0"] == pytest.approx(0.0, abs=1e-12)


def test_discount_compare():
    data = run_discount_compare(cfg("discount-compare", seeds=[0, 1]))
    for seed in (0, 1):
        rows = [r for r in data.rows if r["seed"] == seed]
        gaps = [r["abs_gap"] for r in rows]
        bounds = [r["scaled_bound"] for r in rows]
        assert len(rows) == 10
        assert np.all(np.diff(gaps) < 0) and np.all(np.diff(bounds) > 0)


def test_failed_rows_are_recorded(monkeypatch):
    import avgpg.experiments as ex

    original = ex._task_size

    def boom(cfg, S, A, seed):
        if seed == 1:
            raise RuntimeError("solver exploded")
        return original(cfg, S, A, seed)

    monkeypatch.setattr(ex, "_task_size", boom)
    data = run_size_sweep(cfg("size-sweep", sizes=[[3, 2]], seeds=[0, 1], iterations=5))
    fails = data.failures()
    assert len(fails) == 1 and fails[0]["seed"] == 1 and "solver exploded" in fails[0]["status"]
    assert len(data.rows) == 7


def test_ordering_counts():
    rows = []
    for seed, t90 in ((0, (1, 2, 3)), (1, (3, 2, 1)), (2, (1, 1, 1))):
        for size, t in zip((3, 5, 8), t90):
            for it in range(5):
                rows.append({"S": size, "A": size, "seed": seed, "iter": it,
                             "improvement": 1.0 if it >= t else 0.0, "status": "ok"})
    data = Dataset("size-sweep", COLUMNS["size-sweep"], rows)
    assert ordering_counts(data, "seed", "S", ("S", "A", "seed")) == (2, 3)


def test_plotdata_shapes(tmp_path):
    size = run_size_sweep(cfg("size-sweep", sizes=[[3, 3]], seeds=[0, 1], iterations=10))
    plot = emit_plotdata(size)
    assert {p["group"] for p in plot} == {"3x3"} and len(plot) == 11
    scaling = run_constant_scaling(cfg("constant-scaling", sizes=[[4, 2]], instances=2,
                                       families=["dirichlet-uniform"]))
    assert all(p["group"].startswith("dirichlet-uniform:C_p") and p["x"] == 2 for p in emit_plotdata(scaling))
    empty = Dataset("size-sweep", COLUMNS["size-sweep"], [])
    write_plotdata(empty, tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text().splitlines() == ["#schema=plot/1", "x,y,group"]
    with pytest.raises(ValueError):
        emit_plotdata(empty, "histogram")


def test_worker_env_override(monkeypatch, caplog):
    monkeypatch.setenv("AVGPG_WORKERS", "3")
    with caplog.at_level("INFO", logger="avgpg"):
        assert resolve_workers(1) == 3
    assert "AVGPG_WORKERS" in caplog.text
    monkeypatch.setenv("AVGPG_WORKERS", "many")
    with pytest.raises(ConfigError):
        resolve_workers()
    monkeypatch.delenv("AVGPG_WORKERS")
    assert resolve_workers(None) == 1 and resolve_workers(4) == 4
