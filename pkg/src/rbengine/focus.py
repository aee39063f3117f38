"""Set-update solvers for the focus-set policies.

Both updates optimize over the relaxed per-state mass vector z of a focus
set rather than the discrete set itself: z is confined to a box (elementwise
between the previous set's counts and the full counts, or below them when
shrinking), sums to the set fraction m, and must keep half the L1 distance
to m*mu within beta*(1-m).

``max_feasible_m`` maximizes m over that polytope exactly: for fixed m the
minimal attainable L1 distance has the closed form

    g(m) = || clip(m*mu, lo, hi) - m*mu ||_1 + | m - sum(clip(m*mu, lo, hi)) |

(clipping is the box-optimal choice and redistributing any mass deficit or
surplus costs exactly one unit of distance per unit mass), so feasibility of
m reduces to the concave piecewise-linear margin f(m) = 2*beta*(1-m) - g(m)
being nonnegative, and the maximal feasible m is f's upper root, found by a
breakpoint scan.

The set-optimization update minimizes h_W(z, m) + L_W*(1-m) over the same
polytope: an exact lattice enumeration when the count lattice is small, and
otherwise an outer scan over the m grid with a projected-gradient inner
solver (Dykstra projections onto box+slice and the L1 ball).
"""

from __future__ import annotations

import numpy as np

from rbengine.errors import NumericalError

_EPS = 1e-12


def min_l1_distance(m, mu, lo, hi):
    """Minimal || z - m*mu ||_1 over lo <= z <= hi, sum(z) = m."""
    tau = m * mu
    z0 = np.clip(tau, lo, hi)
    return float(np.abs(z0 - tau).sum() + abs(m - z0.sum()))


def _g_batch(ms, mu, lo, hi):
    tau = ms[:, None] * mu
    z0 = np.clip(tau, lo, hi)
    return np.abs(z0 - tau).sum(axis=1) + np.abs(ms - z0.sum(axis=1))


def max_feasible_m(lo, hi, mu, beta, use_compiled=True):
    """Largest m in [sum(lo), sum(hi)] whose relaxed set keeps the slack
    nonnegative.  Requires feasibility at m = sum(lo).  Returns (m, z).

    Dispatches to the compiled breakpoint scan when available; the numpy
    body below is the reference implementation.
    """
    from rbengine import kernels
    lo = np.ascontiguousarray(lo, dtype=float)
    hi = np.ascontiguousarray(hi, dtype=float)
    compiled = getattr(kernels, "max_feasible_m_c", None)
    if use_compiled and compiled is not None and len(mu) <= 16:
        return compiled(lo, hi, np.ascontiguousarray(mu, dtype=float),
                        float(beta))
    m_lo = float(lo.sum())
    m_hi = float(hi.sum())

    with np.errstate(divide="ignore"):
        cand = np.concatenate([lo / np.where(mu > _EPS, mu, np.inf),
                               hi / np.where(mu > _EPS, mu, np.inf)])
    pts = np.unique(np.concatenate([
        [m_lo, m_hi], cand[(cand > m_lo) & (cand < m_hi)]]))

    # Split segments where the mass residual m - sum(clip) changes sign, the
    # only kink of g not at a clip breakpoint.
    res = pts - np.clip(pts[:, None] * mu, lo, hi).sum(axis=1)
    cross = res[:-1] * res[1:] < 0
    if cross.any():
        i = np.flatnonzero(cross)
        roots = pts[i] + (pts[i + 1] - pts[i]) * (-res[i]) / (res[i + 1] - res[i])
        pts = np.sort(np.concatenate([pts, roots]))

    f = 2.0 * beta * (1.0 - pts) - _g_batch(pts, mu, lo, hi)
    if f[0] < -1e-9:
        raise ValueError("set update called with infeasible starting set")
    feas = np.flatnonzero(f >= -1e-15)
    if feas.size == 0:
        return m_lo, z_at(m_lo, mu, lo, hi)
    k = int(feas.max())
    if k == len(pts) - 1:
        m_star = float(pts[-1])
    else:
        a, b = pts[k], pts[k + 1]
        fa, fb = f[k], f[k + 1]
        m_star = float(a if fa <= 0 else a + (b - a) * fa / (fa - fb))
    return m_star, z_at(m_star, mu, lo, hi)


def z_at(m, mu, lo, hi):
    """A distance-optimal mass vector for fraction m (deficit or surplus is
    spread in ascending state order, any spreading being optimal)."""
    z = np.clip(m * mu, lo, hi)
    delta = m - float(z.sum())
    if delta > _EPS:
        room = hi - z
        for s in range(len(z)):
            take = min(room[s], delta)
            z[s] += take
            delta -= take
            if delta <= _EPS:
                break
    elif delta < -_EPS:
        room = z - lo
        delta = -delta
        for s in range(len(z)):
            take = min(room[s], delta)
            z[s] -= take
            delta -= take
            if delta <= _EPS:
                break
    return z


# ---------------------------------------------------------------------------
# Set-optimization update
# ---------------------------------------------------------------------------

def _project_box_slice(v, lo, hi, m):
    """Euclidean projection onto {lo <= z <= hi, sum(z) = m}: shift v by the
    multiplier t solving sum(clip(v - t, lo, hi)) = m, found exactly on the
    sorted breakpoint grid (the sum is piecewise linear, non-increasing)."""
    bps = np.sort(np.concatenate([v - hi, v - lo]))
    phis = np.clip(v[None, :] - bps[:, None], lo, hi).sum(axis=1)
    if m >= phis[0] - _EPS:
        t = bps[0]
    elif m <= phis[-1] + _EPS:
        t = bps[-1]
    else:
        i = int(np.flatnonzero(phis > m + _EPS).max())
        drop = phis[i] - phis[i + 1]
        frac = (phis[i] - m) / drop if drop > _EPS else 0.0
        t = bps[i] + (bps[i + 1] - bps[i]) * frac
    return np.clip(v - t, lo, hi)


def _project_l1_ball(d, radius):
    """Euclidean projection of d onto the L1 ball of the given radius."""
    if np.abs(d).sum() <= radius + _EPS:
        return d
    a = np.sort(np.abs(d))[::-1]
    csum = np.cumsum(a)
    k = np.arange(1, len(a) + 1)
    usable = a - (csum - radius) / k > 0
    rho = int(np.flatnonzero(usable).max())
    theta = (csum[rho] - radius) / (rho + 1.0)
    return np.sign(d) * np.maximum(np.abs(d) - theta, 0.0)


def _project_feasible(v, lo, hi, m, mu, radius, sweeps=500, tol=1e-13):
    """Dykstra projection onto box+slice intersected with the L1 ball
    centered at m*mu."""
    z = v.copy()
    p = np.zeros_like(v)
    q = np.zeros_like(v)
    center = m * mu
    for _ in range(sweeps):
        y = _project_box_slice(z + p, lo, hi, m)
        p = z + p - y
        z_new = center + _project_l1_ball(y + q - center, radius)
        q = y + q - z_new
        if np.abs(z_new - z).max() < tol:
            z = z_new
            break
        z = z_new
    return z


def inner_min_wnorm(m, x_all, mu, beta, w, lambda_w, z0=None,
                    max_iter=10_000, stat_tol=1e-9):
    """min || z - m*mu ||_W over the feasible polytope at fraction m, by
    projected gradient descent with backtracking on the squared objective.

    Returns (h, z).  ``z0`` warm-starts the iteration.
    """
    lo = np.zeros_like(x_all)
    radius = 2.0 * beta * (1.0 - m)
    center = m * mu
    z = z_at(m, mu, lo, x_all) if z0 is None else z0.copy()
    z = _project_feasible(z, lo, x_all, m, mu, radius)

    def sq(v):
        d = v - center
        return float(d @ w @ d)

    eta = 1.0 / (2.0 * lambda_w)
    obj = sq(z)
    moves = []
    for _ in range(max_iter):
        grad = 2.0 * (z - center) @ w
        step = eta
        for _ in range(40):
            trial = _project_feasible(z - step * grad, lo, x_all, m, mu, radius)
            trial_obj = sq(trial)
            if trial_obj <= obj + 1e-15:
                break
            step *= 0.5
        move = float(np.abs(trial - z).max())
        moves.append(move)
        z, obj = trial, trial_obj
        if move / max(step, _EPS) <= stat_tol:
            break
    else:
        raise NumericalError(
            f"set-optimization inner solver missed {stat_tol:g} stationarity "
            f"after {max_iter} iterations", history=moves[-50:])
    return float(np.sqrt(max(obj, 0.0))), z


def _wnorm_counts(k, n_arms, m, mu, w):
    d = k / n_arms - m * mu
    return float(np.sqrt(max(d @ w @ d, 0.0)))


def _make_inner(x_all, mu, beta, w, lambda_w, warm_store=None):
    """Inner minimizer h*(m) with warm starting across calls and (through
    ``warm_store``) across outer invocations; prefers the compiled
    implementation."""
    from rbengine import kernels
    if warm_store is None:
        warm_store = {}
    if "z" not in warm_store:
        warm_store["z"] = z_at(0.0, mu, np.zeros_like(x_all), x_all)
    compiled = getattr(kernels, "so_inner_solve", None)
    w_c = np.ascontiguousarray(w)

    def inner(m):
        if compiled is not None:
            z = warm_store["z"].copy()
            h = compiled(m, x_all, mu, beta, w_c, lambda_w, z)
        else:
            h, z = inner_min_wnorm(m, x_all, mu, beta, w, lambda_w,
                                   z0=warm_store["z"])
        warm_store["z"] = z
        return h, z
    return inner


def solve_set_optimization(counts_all, n_arms, mu, beta, w, lambda_w,
                           lattice_limit=4096, warm=None):
    """Count-level set-optimization update.

    Minimizes h_W + L_W*(1-m) over feasible relaxed sets, then returns the
    target integer per-state counts of a maximal optimum (largest m within
    1e-8 of the optimal objective).  Small count lattices are enumerated
    exactly.  Larger ones exploit convexity of m -> h*(m) + L_W(1-m) on
    the 1/N grid: a discrete local descent (warm-started from the previous
    call via ``warm``, falling back to ternary search) finds the global
    grid minimizer, and a rightward walk finds the largest near-optimal
    fraction.  Counts come from floor rounding of the optimal masses.
    """
    counts_all = np.asarray(counts_all, dtype=np.int64)
    l_w = 2.0 * np.sqrt(lambda_w)
    lattice = np.prod(counts_all + 1.0)
    if lattice <= lattice_limit:
        return _solve_exact_lattice(counts_all, n_arms, mu, beta, w, l_w)

    x_all = counts_all / n_arms
    lo_box = np.zeros_like(x_all)
    m_max, _ = max_feasible_m(lo_box, x_all, mu, beta)
    k_hi = int(np.floor(m_max * n_arms + 1e-9))

    inner = _make_inner(x_all, mu, beta, w, lambda_w, warm_store=warm)
    memo = {}

    def j_of(k):
        if k not in memo:
            m = k / n_arms
            h, z = inner(m)
            memo[k] = (h + l_w * (1.0 - m), z)
        return memo[k][0]

    # global grid minimizer: local descent is exact because J is convex on
    # the grid; cap the walk and fall back to ternary search
    k_min = None
    if warm and "k_min" in warm:
        k = min(max(warm["k_min"], 0), k_hi)
        for _ in range(30):
            j_here = j_of(k)
            if k > 0 and j_of(k - 1) < j_here - 1e-12:
                k -= 1
            elif k < k_hi and j_of(k + 1) < j_here - 1e-12:
                k += 1
            else:
                k_min = k
                break
    if k_min is None:
        lo_k, hi_k = 0, k_hi
        while hi_k - lo_k > 2:
            k1 = lo_k + (hi_k - lo_k) // 3
            k2 = hi_k - (hi_k - lo_k) // 3
            if j_of(k1) < j_of(k2):
                hi_k = k2
            else:
                lo_k = k1
        for k in range(lo_k, hi_k + 1):
            j_of(k)
        k_min = min((k for k in memo if k <= k_hi), key=j_of)
    j_min = j_of(k_min)

    # rightmost grid point within the tie tolerance (J is nondecreasing to
    # the right of the minimizer)
    k = k_min
    if warm and "k_right" in warm:
        k = min(max(warm["k_right"], k_min), k_hi)
    while k > k_min and j_of(k) > j_min + 1e-8:
        k -= 1
    while k < k_hi and j_of(k + 1) <= j_min + 1e-8:
        k += 1

    if warm is not None:
        warm["k_min"] = k_min
        warm["k_right"] = k

    z_opt = memo[k][1]
    target = np.floor(n_arms * z_opt + 1e-9).astype(np.int64)
    return np.minimum(target, counts_all)


def _solve_exact_lattice(counts_all, n_arms, mu, beta, w, l_w):
    """Exact enumeration of integer count vectors (small instances)."""
    grids = [np.arange(c + 1) for c in counts_all]
    mesh = np.meshgrid(*grids, indexing="ij")
    ks = np.stack([g.ravel() for g in mesh], axis=1)  # (P, S)
    m = ks.sum(axis=1) / n_arms
    x = ks / n_arms
    dev = x - m[:, None] * mu
    feasible = 0.5 * np.abs(dev).sum(axis=1) <= beta * (1.0 - m) + 1e-12
    h = np.sqrt(np.maximum(np.einsum("ps,st,pt->p", dev, w, dev), 0.0))
    j = h + l_w * (1.0 - m)
    j[~feasible] = np.inf
    j_min = j.min()
    tied = np.flatnonzero(j <= j_min + 1e-8)
    m_opt = m[tied].max()
    tied = tied[m[tied] >= m_opt - 1e-15]
    # deterministic among exact ties: lexicographically smallest counts
    order = np.lexsort(tuple(ks[tied, s] for s in range(ks.shape[1] - 1, -1, -1)))
    return ks[tied[order[0]]].astype(np.int64)
