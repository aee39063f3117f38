"""Command-line interface.

Subcommands: solve, simulate, compare, scan, diagnose, bounds, examples.
Exit codes: 0 success, 1 input error, 2 aperiodic-unichain check failed,
3 numerical failure.  All stochastic output is fully determined by --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from rbengine import instances as inst_mod
from rbengine.errors import AssumptionError, InputError, NumericalError
from rbengine.lp import analyze_chain, solve_lp
from rbengine.lyapunov import build_kit, gap_bounds
from rbengine.mdp import ArmConfig, load_instance, save_instance
from rbengine.policies import PolicySpec
from rbengine.simulator import run

SCHEMA_LINE = "# schema=1"


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _load(args):
    if args.builtin:
        return inst_mod.builtin(args.builtin)
    if args.instance:
        return load_instance(args.instance, normalize_rows=args.normalize_rows)
    raise InputError("provide --builtin NAME or --instance PATH")


def _add_instance_args(p):
    p.add_argument("--builtin", choices=inst_mod.BUILTIN_NAMES)
    p.add_argument("--instance", help="instance JSON path")
    p.add_argument("--normalize-rows", action="store_true",
                   help="renormalize nearly-stochastic rows on load")


def _jobs_default():
    return int(os.environ.get("RB_ENGINE_JOBS", "1"))


def cmd_solve(args):
    instance = _load(args)
    solution = solve_lp(instance)
    chain = analyze_chain(solution)
    payload = {
        "r_rel": solution.r_rel,
        "y": solution.y.tolist(),
        "pibs": solution.pibs.tolist(),
        "mu_star": solution.mu_star.tolist(),
        "classes": {
            "plus": list(solution.s_plus),
            "zero": list(solution.s_zero),
            "minus": list(solution.s_minus),
        },
        "chain": {
            "recurrent_classes": [list(c) for c in chain.recurrent_classes],
            "transient_states": list(chain.transient_states),
            "is_unichain": chain.is_unichain,
            "is_aperiodic": chain.is_aperiodic,
            "slem": chain.slem,
        },
    }
    print(json.dumps(payload, indent=1))
    return 0 if chain.assumption_holds else 2


def _result_rows(res):
    rows = []
    n_batches = len(res.batch_means_values) // res.n_replications
    for i, bm in enumerate(res.batch_means_values):
        rows.append([res.instance_name, res.policy, res.n_arms, res.seed,
                     i // n_batches, i % n_batches, bm, "",
                     bm / res.r_rel if res.r_rel else ""])
    rows.append([res.instance_name, res.policy, res.n_arms, res.seed, -1, -1,
                 res.avg_reward, res.ci_half_width, res.optimality_ratio])
    return rows


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(SCHEMA_LINE + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


RESULT_HEADER = ["instance", "policy", "N", "seed", "replication", "batch",
                 "avg_reward", "ci_half", "optimality_ratio"]
TRACE_HEADER = ["t", "m_D", "delta", "conformity_deficit", "shrinkage",
                "coverage_residual", "persistence"]


def _write_trace_csv(path, res):
    ft = res.focus_trace
    pers = res.persistence
    rows = []
    for t in range(res.horizon):
        def get(field):
            if ft is None:
                return float("nan")
            return float(getattr(ft, field)[0][t])
        rows.append([
            t, get("m_focus"), get("slack"), get("conformity_deficit"),
            get("shrinkage"), get("coverage_residual"),
            float(pers[t]) if pers is not None else float("nan"),
        ])
    _write_csv(path, TRACE_HEADER, rows)


def _simulate_once(instance, args, policy):
    config = ArmConfig.for_instance(instance, args.n_arms,
                                    initial_states=args.init)
    collect = bool(args.traces)
    return run(instance, config, policy, horizon=args.horizon,
               replications=args.replications, seed=args.seed,
               collect_traces=collect, jobs=args.jobs,
               strict_batching=args.strict_batching,
               persistence_window=args.window if collect else None)


def _add_sim_args(p, multi_policy=False):
    _add_instance_args(p)
    if multi_policy:
        p.add_argument("--policies", required=True,
                       help="comma-separated policy list")
        p.add_argument("--n-arms", required=True,
                       help="comma-separated N list")
    else:
        p.add_argument("--policy", required=True)
        p.add_argument("--n-arms", type=int, required=True)
    p.add_argument("--horizon", type=int, default=20_000)
    p.add_argument("--replications", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default="uniform-random",
                   help='initial states rule ("uniform-random", "all-state-k")')
    p.add_argument("--jobs", type=int, default=_jobs_default())
    p.add_argument("--strict-batching", action="store_true",
                   help="batch the whole path with no burn-in discard")
    p.add_argument("--out", required=True, help="results CSV path")


def cmd_simulate(args):
    instance = _load(args)
    res = _simulate_once(instance, args, PolicySpec.parse(args.policy))
    _write_csv(args.out, RESULT_HEADER, _result_rows(res))
    if args.traces:
        _write_trace_csv(args.traces, res)
    return 0


def cmd_compare(args):
    instance = _load(args)
    policies = [p for p in args.policies.split(",") if p]
    if not policies:
        raise InputError("empty policy list")
    n_list = [int(n) for n in args.n_arms.split(",") if n]
    if not n_list:
        raise InputError("empty N list")
    rows = []
    for n in n_list:
        for pol in policies:
            cfg = ArmConfig.for_instance(instance, n, initial_states=args.init)
            res = run(instance, cfg, PolicySpec.parse(pol),
                      horizon=args.horizon, replications=args.replications,
                      seed=args.seed, jobs=args.jobs,
                      strict_batching=args.strict_batching)
            rows.append([res.instance_name, res.policy, n, res.seed, -1, -1,
                         res.avg_reward, res.ci_half_width,
                         res.optimality_ratio])
    _write_csv(args.out, RESULT_HEADER, rows)
    return 0


def cmd_scan(args):
    summary = inst_mod.scan(args.count, args.states, args.dirichlet,
                            args.cutoff, args.seed,
                            target_well_defined=args.target_well_defined)
    rows = [[r.instance_id, r.slem, r.phi_radius, int(r.well_defined),
             int(r.locally_unstable), r.alpha] for r in summary.rows]
    _write_csv(args.out, ["instance_id", "slem", "phi_radius", "well_defined",
                          "locally_unstable", "alpha"], rows)
    print(json.dumps({
        "generated": summary.n_generated,
        "well_defined": summary.n_well_defined,
        "below_cutoff": summary.n_below_cutoff,
        "unstable_below_cutoff": summary.n_unstable_below_cutoff,
        "unstable_fraction": summary.unstable_fraction,
    }, indent=1))
    return 0


def cmd_diagnose(args):
    instance = _load(args)
    solution = solve_lp(instance)
    kit = build_kit(solution, instance, identity_fallback=True)
    args.traces = True
    res = _simulate_once(instance, args, PolicySpec.parse(args.policy))
    _write_trace_csv(args.out, res)
    spec = PolicySpec.parse(args.policy)
    if spec.is_focus_set:
        from rbengine.simulator import condition_diagnostics
        rep = condition_diagnostics(res, kit, instance)
        print(json.dumps({
            "conformity_mean": rep.conformity.mean,
            "conformity_bound": rep.conformity.bound,
            "shrinkage_mean": rep.shrinkage.mean,
            "shrinkage_bound": rep.shrinkage.bound,
            "coverage_residual_max": rep.coverage_max,
            "ok": rep.ok,
        }, indent=1))
    return 0


def cmd_bounds(args):
    instance = _load(args)
    solution = solve_lp(instance)
    chain = analyze_chain(solution)
    kit = build_kit(solution, instance)
    n_list = [int(n) for n in args.n_arms.split(",") if n]
    report = gap_bounds(kit, instance, n_list)
    print(f"lambda_w {_fmt(kit.lambda_w)}")
    print(f"kappa {_fmt(kit.kappa)}")
    print(f"slem {_fmt(chain.slem)}")
    print(f"C_SE {_fmt(report.c_se)}")
    print(f"C_ID {_fmt(report.c_id)}")
    print(f"C_SO {_fmt(report.c_so)}")
    for i, n in enumerate(report.n_arms):
        print(f"N {n} bound_SE {_fmt(report.bounds_se[i])} "
              f"bound_ID {_fmt(report.bounds_id[i])} "
              f"bound_SO {_fmt(report.bounds_so[i])}")
    return 0


def cmd_examples(args):
    if args.export:
        os.makedirs(args.export, exist_ok=True)
        for name in inst_mod.BUILTIN_NAMES:
            save_instance(inst_mod.builtin(name),
                          os.path.join(args.export, f"{name}.json"))
        print(f"wrote {len(inst_mod.BUILTIN_NAMES)} instances to {args.export}")
    else:
        for name in inst_mod.BUILTIN_NAMES:
            print(name)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rbengine",
        description="Restless-bandit policy engine: LP relaxation, focus-set "
                    "policies, simulation, and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the single-armed relaxation")
    _add_instance_args(p)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("simulate", help="simulate one policy")
    _add_sim_args(p)
    p.add_argument("--traces", help="optional per-step trace CSV path")
    p.add_argument("--window", type=int, default=200,
                   help="persistence look-ahead window (trace mode)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("compare", help="policy x N grid of optimality ratios")
    _add_sim_args(p, multi_policy=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("scan", help="random-instance local-instability scan")
    p.add_argument("--states", type=int, default=10)
    p.add_argument("--dirichlet", type=float, default=0.05)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--cutoff", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-well-defined", type=int, default=None)
    p.add_argument("--out", required=True, help="scatter CSV path")
    p.set_defaults(fn=cmd_scan)

    p = sub.add_parser("diagnose", help="focus-set condition diagnostics")
    _add_sim_args(p)
    p.add_argument("--window", type=int, default=200)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("bounds", help="optimality-gap constants")
    _add_instance_args(p)
    p.add_argument("--n-arms", default="100,1000")
    p.set_defaults(fn=cmd_bounds)

    p = sub.add_parser("examples", help="list or export built-in instances")
    p.add_argument("--export", help="directory to write instance JSON files")
    p.set_defaults(fn=cmd_examples)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssumptionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
