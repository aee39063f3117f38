import numpy as np
import pytest

from _oracles import best_subset_set_optimization, best_subset_slack_expansion
from rbengine.focus import (
    _project_box_slice,
    _project_l1_ball,
    inner_min_wnorm,
    max_feasible_m,
    min_l1_distance,
    solve_set_optimization,
    z_at,
)


def random_box(rng, s):
    hi = rng.dirichlet(np.ones(s))
    frac = rng.uniform(0, 1, size=s)
    lo = hi * frac * (rng.random() < 0.5)
    return lo, hi


def test_min_l1_distance_matches_grid_search():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.integers(2, 5)
        lo, hi = random_box(rng, s)
        mu = rng.dirichlet(np.ones(s))
        m = rng.uniform(lo.sum(), hi.sum())
        # dense random-search oracle over the feasible slice
        best = np.inf
        for _ in range(4000):
            z = rng.uniform(lo, hi)
            gap = m - z.sum()
            z2 = _project_box_slice(z + gap / s, lo, hi, m)
            if abs(z2.sum() - m) < 1e-9:
                best = min(best, np.abs(z2 - m * mu).sum())
        assert min_l1_distance(m, mu, lo, hi) <= best + 1e-9


def test_max_feasible_m_compiled_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = rng.integers(2, 10)
        lo, hi = random_box(rng, s)
        mu = rng.dirichlet(np.ones(s) * rng.uniform(0.2, 3.0))
        beta = rng.uniform(0.05, 0.5)
        if 2 * beta * (1 - lo.sum()) < min_l1_distance(lo.sum(), mu, lo, hi):
            continue  # infeasible start: out of contract
        m_c, z_c = max_feasible_m(lo, hi, mu, beta, use_compiled=True)
        m_p, z_p = max_feasible_m(lo, hi, mu, beta, use_compiled=False)
        assert m_c == pytest.approx(m_p, abs=1e-12)
        np.testing.assert_allclose(z_c, z_p, atol=1e-12)
        # the returned mass vector realizes the slack bound
        assert z_c.sum() == pytest.approx(m_c, abs=1e-10)
        assert np.all(z_c >= lo - 1e-12) and np.all(z_c <= hi + 1e-12)
        assert 0.5 * np.abs(z_c - m_c * mu).sum() <= beta * (1 - m_c) + 1e-9
        # maximality: a slightly larger m is infeasible (unless at the cap)
        if m_c < hi.sum() - 1e-9:
            m_plus = m_c + 1e-7
            assert (min_l1_distance(m_plus, mu, lo, hi)
                    > 2 * beta * (1 - m_plus) - 1e-9)


def test_z_at_distributes_mass():
    mu = np.array([0.3, 0.7])
    lo = np.array([0.1, 0.0])
    hi = np.array([0.4, 0.5])
    z = z_at(0.6, mu, lo, hi)
    assert z.sum() == pytest.approx(0.6)
    assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)


def test_projections():
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = rng.integers(2, 8)
        lo, hi = random_box(rng, s)
        m = rng.uniform(lo.sum(), hi.sum())
        v = rng.normal(size=s)
        z = _project_box_slice(v, lo, hi, m)
        assert z.sum() == pytest.approx(m, abs=1e-9)
        assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)
        # projection optimality: no feasible direction improves distance
        z2 = _project_box_slice(v + rng.normal(size=s) * 0.01, lo, hi, m)
        assert np.linalg.norm(z - v) <= np.linalg.norm(z2 - v) + 1e-9

        d = rng.normal(size=s)
        r = rng.uniform(0.1, 2.0)
        pd = _project_l1_ball(d.copy(), r)
        assert np.abs(pd).sum() <= r + 1e-9
        if np.abs(d).sum() <= r:
            np.testing.assert_allclose(pd, d)


def test_inner_solver_matches_exhaustive_two_states(solutions):
    # |S| = 2 allows closed-form: h*(m) is the W-scaled distance from the
    # clipped interval; verify PGD against dense sampling
    inst, sol = solutions["two-state-cycle"]
    from rbengine.lyapunov import build_kit
    kit = build_kit(sol, inst)
    rng = np.random.default_rng(3)
    mu = np.asarray(sol.mu_star)
    for _ in range(20):
        counts = rng.multinomial(8, rng.dirichlet(np.ones(2)))
        x_all = counts / 8
        m_max, _ = max_feasible_m(np.zeros(2), x_all, mu, inst.beta)
        if m_max < 1 / 8:
            continue
        m = np.floor(m_max * 8) / 8
        h, z = inner_min_wnorm(m, x_all, mu, inst.beta, kit.w, kit.lambda_w)
        # dense scan oracle over z0, spanning the exact box interval so the
        # endpoints (which may be the only feasible points) are included
        z0_lo = max(0.0, m - x_all[1])
        z0_hi = min(x_all[0], m)
        grid = np.linspace(z0_lo, z0_hi, 20001)
        z1 = m - grid
        okmask = (z1 >= -1e-12) & (z1 <= x_all[1] + 1e-12)
        dev0, dev1 = grid - m * mu[0], z1 - m * mu[1]
        ball = np.abs(dev0) + np.abs(dev1) <= 2 * inst.beta * (1 - m) + 1e-12
        vals = np.sqrt(dev0**2 * kit.w[0, 0] + 2 * dev0 * dev1 * kit.w[0, 1]
                       + dev1**2 * kit.w[1, 1])
        vals[~(okmask & ball)] = np.inf
        assert h == pytest.approx(vals.min(), abs=1e-7)


def test_set_optimization_counts_match_subset_oracle(solutions):
    inst, sol = solutions["two-state-cycle"]
    from rbengine.lyapunov import build_kit
    kit = build_kit(sol, inst)
    mu = np.asarray(sol.mu_star)
    rng = np.random.default_rng(4)
    for n in (6, 8):
        for _ in range(25):
            states = rng.integers(0, 2, size=n)
            counts = np.bincount(states, minlength=2)
            target = solve_set_optimization(counts, n, mu, inst.beta, kit.w,
                                            kit.lambda_w)
            m = target.sum() / n
            dev = target / n - m * mu
            obj = float(np.sqrt(dev @ kit.w @ dev)) + kit.l_w * (1 - m)
            oracle_obj, oracle_m = best_subset_set_optimization(
                states, 2, mu, inst.beta, kit.w)
            assert obj == pytest.approx(oracle_obj, abs=1e-6)
            assert m == pytest.approx(oracle_m, abs=1e-12)


def test_set_optimization_warm_matches_cold(three_state_kit, solutions):
    inst, sol = solutions["three-state-nongap"]
    kit = three_state_kit
    mu = np.asarray(sol.mu_star)
    rng = np.random.default_rng(5)
    warm = {}
    for _ in range(30):
        counts = rng.multinomial(60, rng.dirichlet(np.ones(3) * 3))
        cold = solve_set_optimization(counts, 60, mu, inst.beta, kit.w,
                                      kit.lambda_w, lattice_limit=1)
        warm_t = solve_set_optimization(counts, 60, mu, inst.beta, kit.w,
                                        kit.lambda_w, lattice_limit=1,
                                        warm=warm)
        np.testing.assert_array_equal(cold, warm_t)


def test_expansion_matches_subset_oracle_two_states(solutions):
    # relaxed maximum vs exhaustive subsets: they agree up to the integer
    # relaxation, i.e. floor(N m_relaxed) >= best subset size >= that - |S|
    inst, sol = solutions["two-state-cycle"]
    mu = np.asarray(sol.mu_star)
    rng = np.random.default_rng(6)
    for n in (6, 9):
        for _ in range(20):
            states = rng.integers(0, 2, size=n)
            prev = [i for i in range(n) if rng.random() < 0.4]
            counts_prev = np.bincount([states[i] for i in prev], minlength=2)
            counts_all = np.bincount(states, minlength=2)
            m_prev = len(prev) / n
            delta_prev = (inst.beta * (1 - m_prev)
                          - 0.5 * np.abs(counts_prev / n - m_prev * mu).sum())
            if delta_prev > 0:
                lo, hi = counts_prev / n, counts_all / n
            else:
                lo, hi = np.zeros(2), counts_prev / n
            m_star, _ = max_feasible_m(lo, hi, mu, inst.beta)
            oracle_size = best_subset_slack_expansion(states, 2, mu, inst.beta,
                                                      prev)
            assert oracle_size <= int(np.floor(n * m_star + 1e-9))
            assert oracle_size >= int(np.floor(n * m_star + 1e-9)) - 2
