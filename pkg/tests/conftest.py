import numpy as np
import pytest

from rbengine.instances import BUILTIN_NAMES, builtin, gen_dirichlet
from rbengine.lp import analyze_chain, solve_lp
from rbengine.lyapunov import build_kit


@pytest.fixture(scope="session")
def solutions():
    """builtin name -> (instance, solution), solved once."""
    out = {}
    for name in BUILTIN_NAMES:
        inst = builtin(name)
        out[name] = (inst, solve_lp(inst))
    return out


@pytest.fixture(scope="session")
def three_state_kit(solutions):
    inst, sol = solutions["three-state-nongap"]
    return build_kit(sol, inst)


@pytest.fixture(scope="session")
def assumption1_instances():
    """Dirichlet(1) instances of varying sizes satisfying the
    aperiodic-unichain assumption, with their solutions."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(2024)))
    out = []
    sizes = [3, 4, 5, 6, 7, 8]
    while len(out) < 6:
        n_states = sizes[len(out)]
        inst = gen_dirichlet(n_states, 1.0, rng)
        sol = solve_lp(inst)
        if analyze_chain(sol).assumption_holds:
            out.append((inst, sol))
    return out
