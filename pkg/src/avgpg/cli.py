"""Command-line entry point: ``avgpg <subcommand> [--config FILE] [--out DIR] ...``.

Exit codes: 0 on success, 1 when ``--strict`` is set and some row failed,
2 on a configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from avgpg.complexity import assemble_constants
from avgpg.evaluation import evaluate
from avgpg.experiments import (KINDS, ConfigError, Dataset, ExperimentConfig, bound_summary, run_experiment,
                               write_csv, write_plotdata)
from avgpg.gradient import policy_gradient
from avgpg.mdp import MdpError, check_policy, generate_mdp, load_mdp, make_policy

log = logging.getLogger("avgpg")

CONSTANT_COLUMNS = ("instance", "S", "A", "seed", "flavour", "C_m", "C_p", "C_r", "kappa_r", "L1", "L2",
                    "C_PL", "C_e", "lam", "C_m_provenance", "C_p_provenance", "C_r_provenance",
                    "C_PL_provenance", "L2_provenance", "search_budget", "wall_time")
EVALUATE_COLUMNS = ("state", "action", "pi", "d", "v", "q", "grad", "rho")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avgpg", description="Average-reward projected policy gradient experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--seed-override", type=int, help="run this single seed instead of the configured list")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="worker processes (AVGPG_WORKERS overrides)")
        sp.add_argument("--step-size", help="number, 'certified' or 'search'")
        sp.add_argument("--strict", action="store_true", help="exit 1 if any row failed")
        sp.add_argument("-v", "--verbose", action="count", default=0)

    for kind in KINDS + ("constants",):
        common(sub.add_parser(kind))
    ev = sub.add_parser("evaluate", help="evaluate one policy on one MDP")
    ev.add_argument("--mdp", help="MDP JSON file (default: generate from --S/--A/--seed)")
    ev.add_argument("--S", type=int, default=4)
    ev.add_argument("--A", type=int, default=3)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--policy", default="uniform", help="uniform, random, or a JSON file with an S x A array")
    ev.add_argument("--out", default=".")
    ev.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _load_config(args, kind: str) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    if args.seed_override is not None:
        doc["seeds"] = [args.seed_override]
    if args.step_size is not None:
        try:
            doc["step_size"] = float(args.step_size)
        except ValueError:
            doc["step_size"] = args.step_size
    return ExperimentConfig.from_dict(doc, kind)


def _run_kind(args, kind: str) -> int:
    cfg = _load_config(args, kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = run_experiment(cfg, args.workers)
    path = out / (cfg.output or f"{kind}.csv")
    data.write(path)
    write_plotdata(data, path.with_suffix(".plot.csv"))
    log.info("wrote %d rows to %s", len(data.rows), path)
    if kind == "bound-verify":
        summary = bound_summary(data)
        (out / "bound-verify.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(" ".join(f"{k}={v}" for k, v in sorted(summary.items())))
    return _finish(args, data)


def _run_constants(args) -> int:
    cfg = _load_config(args, "constants")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], 0
    for S, A in cfg.sizes:
        for seed in cfg.seeds:
            inst = f"{cfg.kernel_family}:{cfg.reward_family}:{S}x{A}:seed{seed}"
            try:
                rep = assemble_constants(generate_mdp(cfg.spec(S, A, seed)), cfg.budget)
            except Exception as exc:
                log.warning("constants for %s failed: %s", inst, exc)
                failed += 1
                continue
            for flavour, c in (("search", rep.search), ("certified", rep.certified)):
                row = {"instance": inst, "S": S, "A": A, "seed": seed, "flavour": flavour,
                       "search_budget": c.search_budget, "wall_time": rep.wall_time}
                row.update({k: getattr(c, k) for k in ("C_m", "C_p", "C_r", "kappa_r", "L1", "L2",
                                                       "C_PL", "C_e", "lam")})
                row.update({f"{k}_provenance": c.provenance[k] for k in ("C_m", "C_p", "C_r", "C_PL", "L2")})
                rows.append(row)
    write_csv(out / (cfg.output or "constants.csv"), CONSTANT_COLUMNS, rows, "constants/1")
    if failed and args.strict:
        return 1
    return 0


def _run_evaluate(args) -> int:
    try:
        mdp = load_mdp(args.mdp) if args.mdp else generate_mdp(
            ExperimentConfig.from_dict({}, "constants").spec(args.S, args.A, args.seed))
        S, A = mdp.shape
        if args.policy in ("uniform", "random"):
            pi = make_policy(args.policy, S, A, seed=args.seed)
        else:
            with open(args.policy) as fh:
                pi = check_policy(np.array(json.load(fh), dtype=float), (S, A))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    ev = evaluate(mdp, pi)
    grad = policy_gradient(mdp, pi, ev)
    rows = [{"state": s, "action": a, "pi": pi[s, a], "d": ev.d[s], "v": ev.v[s], "q": ev.q[s, a],
             "grad": grad[s, a], "rho": ev.rho} for s in range(S) for a in range(A)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "evaluate.csv", EVALUATE_COLUMNS, rows, "evaluate/1")
    print(f"rho={ev.rho!r}")
    return 0


def _finish(args, data: Dataset) -> int:
    failures = data.failures()
    if failures:
        log.warning("%d row(s) failed", len(failures))
        if args.strict:
            return 1
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            return _run_evaluate(args)
        if args.command == "constants":
            return _run_constants(args)
        return _run_kind(args, args.command)
    except (ConfigError, MdpError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
