import numpy as np
import pytest

from _oracles import (
    lp_vertex_enumeration,
    power_iteration_stationary,
    reachability_classes,
)
from rbengine.errors import InputError
from rbengine.instances import builtin, gen_dirichlet
from rbengine.lp import (
    LPSolution,
    analyze_chain,
    priority_order,
    solve_lp,
    stationary_distribution,
)

# frozen from the vertex-enumeration oracle in _oracles.py
THREE_STATE_R_REL = 0.12380017086830933


def test_periodic_counterexample_solution(solutions):
    _, sol = solutions["periodic-two-state"]
    assert sol.r_rel == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(sol.y, [[0.5, 0.0], [0.0, 0.5]], atol=1e-10)


def test_two_state_policy_and_distribution(solutions):
    _, sol = solutions["two-state-cycle"]
    # activates iff in state 1
    assert sol.pibs[1, 1] == pytest.approx(1.0)
    assert sol.pibs[0, 1] == pytest.approx(0.0)
    np.testing.assert_allclose(sol.mu_star, [0.5, 0.5], atol=1e-10)


def test_three_state_matches_vertex_enumeration_oracle(solutions):
    inst, sol = solutions["three-state-nongap"]
    assert sol.r_rel == pytest.approx(THREE_STATE_R_REL, abs=1e-8)
    oracle_val, oracle_y = lp_vertex_enumeration(inst)
    assert sol.r_rel == pytest.approx(oracle_val, abs=1e-8)
    np.testing.assert_allclose(sol.y, oracle_y, atol=1e-8)


@pytest.mark.parametrize("name", ["two-state-cycle", "eight-state-nongap",
                                  "non-sa-8", "non-sa-12"])
def test_lp_constraints_hold(solutions, name):
    inst, sol = solutions[name]
    assert sol.y.min() >= -1e-12
    assert sol.y.sum() == pytest.approx(1.0, abs=1e-8)
    assert sol.y[:, 1].sum() == pytest.approx(inst.alpha, abs=1e-8)
    # flow balance residual
    inflow = sol.y[:, 0] @ inst.p0 + sol.y[:, 1] @ inst.p1
    assert np.abs(inflow - sol.y.sum(axis=1)).max() < 1e-8
    # marginals and budget identity
    np.testing.assert_allclose(sol.mu_star, sol.y.sum(axis=1), atol=1e-8)
    assert float(sol.mu_star @ sol.c_pibs) == pytest.approx(inst.alpha, abs=1e-8)
    # rows of pibs sum to one; zero-mass states get the 1/2 rule
    np.testing.assert_allclose(sol.pibs.sum(axis=1), 1.0, atol=1e-12)
    for s in range(inst.n_states):
        if sol.mu_star[s] <= 1e-12:
            np.testing.assert_allclose(sol.pibs[s], [0.5, 0.5])
    assert len(sol.s_zero) <= 1  # vertex solution


def test_chain_two_state_aperiodic(solutions):
    _, sol = solutions["two-state-cycle"]
    rep = analyze_chain(sol)
    assert rep.is_unichain and rep.is_aperiodic
    assert rep.recurrent_classes == ((0, 1),)
    assert rep.slem < 1.0


def test_chain_periodic_counterexample(solutions):
    _, sol = solutions["periodic-two-state"]
    rep = analyze_chain(sol)
    assert rep.is_unichain
    assert not rep.is_aperiodic
    assert rep.slem == pytest.approx(1.0, abs=1e-12)
    assert not rep.assumption_holds


def test_chain_identity_matrix_multichain():
    sol = LPSolution(
        y=np.array([[0.25, 0.25], [0.25, 0.25]]), r_rel=0.0,
        pibs=np.full((2, 2), 0.5), p_pibs=np.eye(2),
        mu_star=np.array([0.5, 0.5]), s_plus=(), s_zero=(0, 1), s_minus=(),
        c_pibs=np.array([0.5, 0.5]), unique_optimum=False, alpha=0.5)
    rep = analyze_chain(sol)
    assert not rep.is_unichain
    assert len(rep.recurrent_classes) == 2


def test_chain_matches_reachability_oracle(solutions, assumption1_instances):
    pools = [solutions[n] for n in ("two-state-cycle", "three-state-nongap",
                                    "non-sa-8")]
    pools += [(i, s) for i, s in assumption1_instances if i.n_states <= 5]
    for inst, sol in pools:
        rep = analyze_chain(sol)
        oracle_rec, oracle_trans = reachability_classes(sol.p_pibs)
        assert sorted(rep.recurrent_classes) == oracle_rec
        assert sorted(rep.transient_states) == oracle_trans


def test_stationary_rank_one_chain():
    v = np.array([0.2, 0.3, 0.5])
    p = np.tile(v, (3, 1))
    np.testing.assert_allclose(stationary_distribution(p), v, atol=1e-12)


def test_stationary_two_state_chain(solutions):
    _, sol = solutions["two-state-cycle"]
    mu = stationary_distribution(sol.p_pibs)
    np.testing.assert_allclose(mu, [0.5, 0.5], atol=1e-12)


def test_stationary_matches_power_iteration():
    rng = np.random.default_rng(11)
    p = rng.dirichlet(np.ones(4), size=4)
    mu = stationary_distribution(p)
    oracle = power_iteration_stationary(p)
    np.testing.assert_allclose(mu, oracle, atol=1e-9)
    assert np.abs(mu @ p - mu).sum() < 1e-10


def test_stationary_rejects_multichain():
    with pytest.raises(InputError, match="not unique"):
        stationary_distribution(np.eye(2))


def test_priority_two_state(solutions):
    _, sol = solutions["two-state-cycle"]
    assert priority_order(sol) == [1, 0]


def test_priority_descending_ratio_within_class():
    # hand-built solution with distinct activation ratios inside one class
    y = np.array([[0.1, 0.3], [0.05, 0.25], [0.2, 0.1]])
    mu = y.sum(axis=1)
    sol = LPSolution(
        y=y, r_rel=0.0, pibs=y / mu[:, None], p_pibs=np.eye(3),
        mu_star=mu, s_plus=(0, 1, 2), s_zero=(), s_minus=(),
        c_pibs=y[:, 1] / mu, unique_optimum=True, alpha=0.5)
    ratios = y[:, 1] / mu  # 0.75, 0.8333, 0.3333
    order = priority_order(sol)
    assert order == [1, 0, 2]
    assert sorted(ratios[order], reverse=True) == list(ratios[order])


def test_priority_rejects_degenerate():
    sol = LPSolution(
        y=np.array([[0.2, 0.2], [0.3, 0.3]]), r_rel=0.0,
        pibs=np.full((2, 2), 0.5), p_pibs=np.eye(2),
        mu_star=np.array([0.4, 0.6]), s_plus=(), s_zero=(0, 1), s_minus=(),
        c_pibs=np.array([0.5, 0.5]), unique_optimum=False, alpha=0.5)
    with pytest.raises(InputError, match="degenerate"):
        priority_order(sol)


def test_priority_zero_mass_states_last(solutions):
    _, sol = solutions["non-sa-8"]
    order = priority_order(sol)
    # recurrent states first (activated ones by index, then the passive one),
    # then zero-mass transient states by index
    assert order == [4, 5, 7, 6, 0, 1, 2, 3]


def test_random_instances_solve_cleanly():
    rng = np.random.default_rng(5)
    for k in range(20):
        inst = gen_dirichlet(rng.integers(2, 7), 0.5, rng)
        sol = solve_lp(inst)
        assert sol.y[:, 1].sum() == pytest.approx(inst.alpha, abs=1e-8)
        assert len(sol.s_zero) <= 1
        oracle_val, _ = lp_vertex_enumeration(inst)
        assert sol.r_rel == pytest.approx(oracle_val, abs=1e-8)
