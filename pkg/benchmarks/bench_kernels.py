#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the per-step kernels on representative shapes and, when the extension
is built, the fused whole-horizon runner against the per-step driver.

Run: python benchmarks/bench_kernels.py [--n-arms 1000] [--steps 2000]
"""

import argparse
import time

import numpy as np

from rbengine.instances import builtin
from rbengine.kernels import _pure
from rbengine.lp import solve_lp
from rbengine.lyapunov import build_kit
from rbengine.mdp import ArmConfig
from rbengine.policies import _cdf

try:
    from rbengine.kernels import _cyimpl
except ImportError:
    _cyimpl = None


def timeit(fn, repeat=200):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e6


def bench_kernels(n):
    inst = builtin("eight-state-nongap")
    sol = solve_lp(inst)
    kit = build_kit(sol, inst)
    cdf = np.ascontiguousarray(_cdf(inst))
    rng = np.random.default_rng(0)
    states = rng.integers(0, 8, size=n)
    u = rng.random(n)
    actions = (rng.random(n) < 0.5).view(np.int8)
    rank = np.arange(8, dtype=np.int64)
    cases = {
        "ideal_actions": lambda impl: impl.ideal_actions(sol.c_pibs, states, u),
        "transitions": lambda impl: impl.transitions(cdf, states, actions, u),
        "id_rectify": lambda impl: impl.id_rectify(actions, n // 2),
        "priority_actions": lambda impl: impl.priority_actions(rank, states,
                                                               n // 2),
        "prefix_wnorms": lambda impl: impl.prefix_wnorms(states, kit.mu_star,
                                                         kit.chol),
        "mean_reward": lambda impl: impl.mean_reward(inst.r0, inst.r1, states,
                                                     actions),
    }
    print(f"\nper-step kernels at N={n} (microseconds per call)")
    print(f"{'kernel':18s} {'pure':>10s} {'cython':>10s} {'speedup':>9s}")
    for name, call in cases.items():
        t_pure = timeit(lambda: call(_pure))
        if _cyimpl is None:
            print(f"{name:18s} {t_pure:10.2f} {'-':>10s} {'-':>9s}")
        else:
            t_cy = timeit(lambda: call(_cyimpl))
            print(f"{name:18s} {t_pure:10.2f} {t_cy:10.2f} {t_pure / t_cy:8.1f}x")


def bench_full_run(n, steps):
    import os

    import rbengine.kernels as kernels
    from rbengine.simulator import run

    inst = builtin("eight-state-nongap")
    cfg = ArmConfig.for_instance(inst, n)
    print(f"\nfull horizon runs at N={n}, {steps} steps (seconds); the "
          "per-step driver here still uses the compiled kernels -- set "
          "RB_KERNELS=pure for the all-python baseline")
    for pol in ("id", "lp-priority", "random", "ftva"):
        times = {}
        for fused in (True, False):
            kernels.HAS_FUSED = fused and _cyimpl is not None
            t0 = time.perf_counter()
            res = run(inst, cfg, pol, horizon=steps, replications=1, seed=1)
            times[fused] = time.perf_counter() - t0
        kernels.HAS_FUSED = _cyimpl is not None
        speed = times[False] / times[True] if times[True] > 0 else float("nan")
        print(f"{pol:14s} stepper {times[False]:7.3f}s  fused {times[True]:7.3f}s "
              f"({speed:5.1f}x)  ratio={res.optimality_ratio:.4f}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--n-arms", type=int, default=1000)
    parser.add_argument("--steps", type=int, default=2000)
    args = parser.parse_args()
    from rbengine import kernels

    print(f"active backend: {kernels.BACKEND}"
          + ("" if _cyimpl else " (extension not built)"))
    bench_kernels(args.n_arms)
    if _cyimpl is not None:
        bench_full_run(args.n_arms, args.steps)
