"""Single-armed LP relaxation and the induced optimal single-armed policy.

The LP maximizes expected stationary reward over occupation measures y(s, a)
subject to the expected budget, flow balance, normalization, and
nonnegativity.  A dense two-phase simplex with Bland's rule returns an
optimal vertex, which generically leaves at most one randomized state.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from rbengine.errors import InputError, NumericalError
from rbengine.mdp import RBInstance, validate

_PIVOT_TOL = 1e-10
_FEAS_TOL = 1e-9
_SUPPORT_TOL = 1e-12


@dataclass(frozen=True)
class SolveOptions:
    pivot_tol: float = _PIVOT_TOL
    feas_tol: float = _FEAS_TOL
    ratio_floor: float = 1e-7  # smallest admissible pivot element
    max_pivots: int = 100_000


class SimplexResult:
    def __init__(self, x, objective, basis, reduced_costs):
        self.x = x
        self.objective = objective
        self.basis = basis
        self.reduced_costs = reduced_costs


def simplex_max(a_eq: np.ndarray, b_eq: np.ndarray, c: np.ndarray,
                options: SolveOptions = SolveOptions(),
                perturb: float = 0.0) -> SimplexResult:
    """Maximize c@x subject to a_eq@x = b_eq, x >= 0 (b_eq >= 0 required).

    Two-phase revised simplex: every pivot recomputes the direction, the
    basic values, and the duals directly from the original columns through
    fresh basis solves, so roundoff never accumulates.  Entering follows
    Bland's lowest-index rule; leaving uses a two-pass ratio test preferring
    the largest pivot among the binding rows, refusing pivots below the
    stability floor (which signals the caller to retry).  ``perturb`` adds
    the classical anti-degeneracy offset perturb*(i+1) to b for pivoting
    decisions only; the returned solution is always re-solved against the
    exact b.  Redundant rows surviving phase 1 are dropped.
    """
    a0 = np.asarray(a_eq, dtype=float)
    b_exact = np.maximum(np.asarray(b_eq, dtype=float), 0.0)
    c = np.asarray(c, dtype=float)
    m, n = a0.shape
    if np.any(np.asarray(b_eq) < -options.feas_tol):
        raise ValueError("b_eq must be nonnegative")
    b0 = b_exact + perturb * np.arange(1, m + 1)

    cols = np.hstack([a0, np.eye(m)])  # structural then artificial columns
    basis = list(range(n, n + m))
    phase1_c = np.zeros(n + m)
    phase1_c[n:] = -1.0

    def run(cost, allowed, cols, b):
        m_act = cols.shape[0]
        d_tol = 1e-11
        degenerate_streak = 0
        for _ in range(options.max_pivots):
            bmat = cols[:, basis]
            xb = np.linalg.solve(bmat, b)
            duals = np.linalg.solve(bmat.T, cost[basis])
            red = cost - duals @ cols
            entered = False
            for j in range(cols.shape[1]):
                # entering: lowest improving index (Bland)
                if not allowed[j] or j in basis or red[j] <= options.pivot_tol:
                    continue
                d = np.linalg.solve(bmat, cols[:, j])
                pos = [i for i in range(m_act) if d[i] > d_tol]
                if not pos:
                    raise NumericalError("LP unbounded")
                # two-pass ratio test: every positive row bounds the step;
                # among the binding rows prefer the largest pivot element
                # (stability).  After a long degenerate streak fall back to
                # the lowest-basis-index rule to break potential cycles.
                theta = min(max(xb[i], 0.0) / d[i] for i in pos)
                binding = [i for i in pos
                           if max(xb[i], 0.0) / d[i]
                           <= theta + 1e-9 * (1.0 + theta)]
                if degenerate_streak > 50 * m_act:
                    best = min(binding, key=lambda i: basis[i])
                else:
                    best = max(binding, key=lambda i: (d[i], -basis[i]))
                if d[best] < options.ratio_floor:
                    raise NumericalError(
                        f"degenerate pivot {d[best]:.2e} below the stability "
                        "floor; retry with perturbation")
                degenerate_streak = degenerate_streak + 1 if theta <= 1e-12 else 0
                basis[best] = j
                entered = True
                break
            if not entered:
                return xb, red
        raise NumericalError("simplex exceeded pivot limit")

    allowed = np.ones(n + m, dtype=bool)
    xb, _ = run(phase1_c, allowed, cols, b0)
    infeas = float(xb[[i for i, j in enumerate(basis) if j >= n]].sum()) \
        if any(j >= n for j in basis) else 0.0
    if infeas > 1e-7 + perturb * m * m:
        raise NumericalError(f"LP infeasible (phase-1 objective {infeas:.3e})")

    # Drive artificials out of the basis; rows that cannot take a structural
    # pivot are redundant and dropped (with their artificial).
    drop_rows = []
    for pos in range(m):
        if basis[pos] < n:
            continue
        bmat = cols[:, basis]
        # row `pos` of B^-1 A over structural candidates
        e = np.zeros(m)
        e[pos] = 1.0
        row = np.linalg.solve(bmat.T, e) @ cols[:, :n]
        pivot_col = -1
        for j in range(n):
            if j not in basis and abs(row[j]) > options.ratio_floor:
                pivot_col = j
                break
        if pivot_col < 0:
            drop_rows.append(pos)
        else:
            basis[pos] = pivot_col
    kept = list(range(m))
    if drop_rows:
        kept = [i for i in range(m) if i not in drop_rows]
        cols = np.hstack([a0[kept], np.eye(len(kept))])
        b0 = b0[kept]
        remap = {n + old: n + new for new, old in enumerate(kept)}
        basis = [j if j < n else remap[j]
                 for pos, j in enumerate(basis) if pos not in drop_rows]
        m = len(kept)

    phase2_c = np.zeros(n + m)
    phase2_c[:n] = c
    allowed = np.zeros(n + m, dtype=bool)
    allowed[:n] = True  # artificials barred from re-entering
    _, red = run(phase2_c, allowed, cols, b0)

    # solve the final basis against the exact (unperturbed) rhs
    xb = np.linalg.solve(cols[:, basis], b_exact[kept])
    x = np.zeros(n)
    for i, j in enumerate(basis):
        if j < n:
            x[j] = xb[i]
    if x.min() < -1e-7:
        raise NumericalError(
            f"perturbed-optimal basis infeasible on the exact rhs "
            f"({x.min():.3e})")
    x = np.maximum(x, 0.0)
    residual = np.abs(a0 @ x - b_exact).max()
    if residual > 1e-7:
        raise NumericalError(f"simplex solution residual {residual:.3e}")
    return SimplexResult(x, float(c @ x), list(basis), red[:n])


@dataclass(frozen=True)
class LPSolution:
    """Optimal vertex of the relaxation plus the derived single-armed policy.

    ``y``: (|S|, 2) occupation measures; ``pibs``: conditional action
    probabilities per state with the 1/2-1/2 convention at zero-mass states;
    ``p_pibs``: induced transition matrix; ``mu_star``: its stationary
    distribution (the y-marginals); ``s_plus``/``s_zero``/``s_minus``: the
    always-active / randomized / never-active split of the positive-mass
    states; ``c_pibs``: activation probability per state.
    """

    y: np.ndarray
    r_rel: float
    pibs: np.ndarray
    p_pibs: np.ndarray
    mu_star: np.ndarray
    s_plus: tuple
    s_zero: tuple
    s_minus: tuple
    c_pibs: np.ndarray
    unique_optimum: bool
    alpha: float

    @property
    def n_states(self) -> int:
        return self.mu_star.shape[0]


def solve_lp(instance: RBInstance, options: SolveOptions = SolveOptions()) -> LPSolution:
    """Solve the relaxation and construct the optimal single-armed policy."""
    report = validate(instance)
    report.raise_if_invalid()
    n = instance.n_states
    nv = 2 * n  # variable order y(0,0), y(0,1), y(1,0), y(1,1), ...

    a_rows = []
    b_rows = []
    budget = np.zeros(nv)
    budget[1::2] = 1.0
    a_rows.append(budget)
    b_rows.append(instance.alpha)
    for s in range(n):
        row = np.zeros(nv)
        row[0::2] += instance.p0[:, s]
        row[1::2] += instance.p1[:, s]
        row[2 * s] -= 1.0
        row[2 * s + 1] -= 1.0
        a_rows.append(row)
        b_rows.append(0.0)
    a_rows.append(np.ones(nv))
    b_rows.append(1.0)

    c = np.empty(nv)
    c[0::2] = instance.r0
    c[1::2] = instance.r1

    # degenerate instances can defeat the unperturbed pivoting; retry with
    # increasing anti-degeneracy offsets before giving up
    last_err = None
    for perturb in (0.0, 1e-9, 1e-7, 1e-5):
        try:
            res = simplex_max(np.array(a_rows), np.array(b_rows), c, options,
                              perturb=perturb)
            break
        except NumericalError as exc:
            last_err = exc
    else:
        raise last_err
    y = res.x.reshape(n, 2)

    mu = y.sum(axis=1)
    pibs = np.full((n, 2), 0.5)
    pos = mu > _SUPPORT_TOL
    pibs[pos, 0] = y[pos, 0] / mu[pos]
    pibs[pos, 1] = y[pos, 1] / mu[pos]
    p_pibs = pibs[:, [0]] * instance.p0 + pibs[:, [1]] * instance.p1

    s_plus, s_zero, s_minus = [], [], []
    for s in range(n):
        if not pos[s]:
            continue
        p1 = pibs[s, 1]
        if p1 >= 1.0 - 1e-9:
            s_plus.append(s)
        elif p1 <= 1e-9:
            s_minus.append(s)
        else:
            s_zero.append(s)

    # Uniqueness (sufficient condition): every nonbasic structural column has
    # a strictly negative reduced cost at the optimal vertex.
    nonbasic = [j for j in range(nv) if j not in res.basis]
    unique = all(res.reduced_costs[j] < -1e-9 for j in nonbasic)

    for arr in (y, pibs, p_pibs, mu):
        arr.setflags(write=False)
    c_pibs = pibs[:, 1].copy()
    c_pibs.setflags(write=False)
    return LPSolution(
        y=y, r_rel=res.objective, pibs=pibs, p_pibs=p_pibs, mu_star=mu,
        s_plus=tuple(s_plus), s_zero=tuple(s_zero), s_minus=tuple(s_minus),
        c_pibs=c_pibs, unique_optimum=unique, alpha=instance.alpha,
    )


@dataclass(frozen=True)
class ChainReport:
    recurrent_classes: tuple
    transient_states: tuple
    is_unichain: bool
    is_aperiodic: bool
    slem: float

    @property
    def assumption_holds(self) -> bool:
        return self.is_unichain and self.is_aperiodic


def _class_period(p_support: np.ndarray, members: list) -> int:
    """Period of a strongly connected class: gcd of level[u]+1-level[v] over
    its edges, computed from BFS levels."""
    index = {s: i for i, s in enumerate(members)}
    level = {members[0]: 0}
    queue = [members[0]]
    while queue:
        u = queue.pop()
        for v in np.flatnonzero(p_support[u]):
            v = int(v)
            if v in index and v not in level:
                level[v] = level[u] + 1
                queue.append(v)
    g = 0
    for u in members:
        for v in np.flatnonzero(p_support[u]):
            v = int(v)
            if v in index:
                g = gcd(g, level[u] + 1 - level[v])
    return abs(g) if g else 1


def analyze_chain(solution: LPSolution) -> ChainReport:
    """Recurrent structure, period, and spectral gap of the induced chain."""
    p = solution.p_pibs
    n = p.shape[0]
    support = p > _SUPPORT_TOL
    n_comp, labels = connected_components(csr_matrix(support), directed=True,
                                          connection="strong")
    recurrent = []
    transient = []
    for comp in range(n_comp):
        members = [int(s) for s in np.flatnonzero(labels == comp)]
        leaves = False
        for u in members:
            for v in np.flatnonzero(support[u]):
                if labels[v] != comp:
                    leaves = True
                    break
            if leaves:
                break
        if leaves:
            transient.extend(members)
        else:
            recurrent.append(tuple(sorted(members)))
    recurrent.sort()
    is_unichain = len(recurrent) == 1
    is_aperiodic = is_unichain and _class_period(support, list(recurrent[0])) == 1

    eigs = np.linalg.eigvals(p)
    perron = int(np.argmin(np.abs(eigs - 1.0)))
    rest = np.delete(eigs, perron)
    slem = float(np.abs(rest).max()) if rest.size else 0.0

    return ChainReport(
        recurrent_classes=tuple(recurrent),
        transient_states=tuple(sorted(transient)),
        is_unichain=is_unichain,
        is_aperiodic=is_aperiodic,
        slem=slem,
    )


def stationary_distribution(p: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Unique stationary distribution of a unichain stochastic matrix.

    Computed from the null space of (P^T - I); raises if the null space is
    not one-dimensional (multichain input).
    """
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    u, s, vt = np.linalg.svd(p.T - np.eye(n))
    null_dim = int(np.sum(s < 1e-9))
    if null_dim == 0:
        raise NumericalError("no stationary distribution found")
    if null_dim > 1:
        raise InputError("stationary distribution not unique (multichain)")
    mu = vt[-1].real
    mu = mu / mu.sum()
    if mu.min() < -1e-9:
        raise NumericalError("stationary vector has negative entries")
    mu = np.maximum(mu, 0.0)
    mu /= mu.sum()
    residual = np.abs(mu @ p - mu).sum()
    if residual >= tol:
        raise NumericalError(f"stationary residual {residual:.3e} exceeds {tol:g}")
    return mu


def priority_order(solution: LPSolution) -> list:
    """Deterministic total order on states: S+ before S0 before S-, ties
    within S+/S- broken by descending y(s,1)/mu(s) then ascending index;
    zero-mass states go last (ascending index)."""
    if len(solution.s_zero) > 1:
        raise InputError("degenerate vertex required: more than one randomized state")
    mu = solution.mu_star
    ratio = np.zeros(solution.n_states)
    pos = mu > _SUPPORT_TOL
    ratio[pos] = solution.y[pos, 1] / mu[pos]
    ratio = np.round(ratio, 9)  # break float crumbs into honest ties

    def block(states):
        return sorted(states, key=lambda s: (-ratio[s], s))

    order = block(solution.s_plus) + list(solution.s_zero) + block(solution.s_minus)
    order += [s for s in range(solution.n_states) if not pos[s]]
    return order
