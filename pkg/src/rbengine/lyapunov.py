"""Weight matrix and drift machinery for the focus-set analysis.

``W`` solves (P - Xi) W (P - Xi)^T - W + I = 0 for the chain P induced by
the optimal single-armed policy, with Xi the rank-one matrix of stationary
rows.  Under the aperiodic-unichain condition the defining series converges
geometrically, one step of P contracts the W-weighted L2 distance to the
stationary point by 1 - 1/(2*lambda_W), and all W eigenvalues are >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rbengine.errors import InputError, NumericalError
from rbengine.lp import LPSolution
from rbengine.mdp import RBInstance

_W_INCREMENT_TOL = 1e-13
_W_MAX_ITER = 100_000


@dataclass(frozen=True)
class LyapunovKit:
    """W with its spectral data and cached Cholesky factor.

    ``lambda_w`` is the top eigenvalue, ``l_w = 2 sqrt(lambda_w)`` the
    Lipschitz constant of the subset distance in the set fraction, ``kappa``
    the W^-1 norm of the per-state activation probabilities, ``contraction``
    the one-step factor 1 - 1/(2 lambda_w).
    """

    w: np.ndarray
    lambda_w: float
    l_w: float
    kappa: float
    xi: np.ndarray
    contraction: float
    chol: np.ndarray  # lower factor L with W = L @ L.T
    mu_star: np.ndarray
    beta: float

    @property
    def n_states(self) -> int:
        return self.w.shape[0]

    def wnorm(self, v: np.ndarray) -> float:
        """sqrt(v W v^T) for a row vector v."""
        z = v @ self.chol
        return float(np.sqrt(z @ z))

    def wnorm_rows(self, vs: np.ndarray) -> np.ndarray:
        z = vs @ self.chol
        return np.sqrt(np.einsum("...s,...s->...", z, z))


def _iterate_w(p: np.ndarray, mu: np.ndarray) -> np.ndarray:
    n = p.shape[0]
    a = p - np.tile(mu, (n, 1))
    w = np.eye(n)
    history = []
    stall_msg = ("weight-matrix iteration did not converge (the induced chain "
                 "is not an aperiodic unichain or its spectral gap is ~0)")
    for it in range(_W_MAX_ITER):
        w_next = np.eye(n) + a @ w @ a.T
        inc = float(np.linalg.norm(w_next - w, ord="fro"))
        history.append(inc)
        w = w_next
        if inc < _W_INCREMENT_TOL:
            break
        # geometric convergence means steady shrinkage; a window without
        # progress signals a divergent or unit-gap chain
        if inc > 1e12 or (it >= 1000 and it % 500 == 0
                          and inc > 0.999 * history[it - 500]):
            raise NumericalError(stall_msg, history=history)
    else:
        raise NumericalError(stall_msg, history=history)
    residual = float(np.linalg.norm(a @ w @ a.T - w + np.eye(n), ord="fro"))
    if residual >= 1e-10:
        raise NumericalError(f"weight-matrix residual {residual:.3e} too large",
                             history=history)
    return 0.5 * (w + w.T)


def build_kit(solution: LPSolution, instance: RBInstance,
              identity_fallback: bool = False) -> LyapunovKit:
    """Build the kit for the chain induced by the optimal single-armed policy.

    ``identity_fallback`` substitutes W = I when the fixed-point iteration
    diverges (chain not aperiodic unichain); this keeps focus-set policies
    runnable on such instances but carries no drift guarantee.
    """
    mu = np.asarray(solution.mu_star, dtype=float).copy()
    n = solution.n_states
    try:
        w = _iterate_w(np.asarray(solution.p_pibs, dtype=float), mu)
    except NumericalError:
        if not identity_fallback:
            raise
        w = np.eye(n)
    eigs = np.linalg.eigvalsh(w)
    if eigs.min() < 1.0 - 1e-10:
        raise NumericalError(f"weight-matrix eigenvalue {eigs.min():.12g} below 1")
    lambda_w = float(eigs.max())
    chol = np.linalg.cholesky(w)
    # kappa = || c ||_{W^-1} via a triangular solve on the Cholesky factor.
    z = np.linalg.solve(chol, np.asarray(solution.c_pibs, dtype=float))
    kappa = float(np.sqrt(z @ z))
    xi = np.tile(mu, (n, 1))
    for arr in (w, xi, chol, mu):
        arr.setflags(write=False)
    return LyapunovKit(
        w=w, lambda_w=lambda_w, l_w=2.0 * np.sqrt(lambda_w), kappa=kappa,
        xi=xi, contraction=1.0 - 1.0 / (2.0 * lambda_w), chol=chol,
        mu_star=mu, beta=instance.beta,
    )


def _check_counts(x_d: np.ndarray, m: float, tol: float = 1e-9):
    x_d = np.asarray(x_d, dtype=float)
    if np.any(x_d < -tol):
        raise InputError("scaled counts must be nonnegative")
    if abs(float(x_d.sum()) - m) > tol:
        raise InputError(
            f"scaled counts sum {x_d.sum():.12g} does not match m={m:.12g}")
    return x_d


def h_w(kit: LyapunovKit, x_d: np.ndarray, m_frac: float) -> float:
    """W-weighted L2 distance between the scaled counts on a subset and the
    m-scaled stationary distribution."""
    x_d = _check_counts(x_d, m_frac)
    return kit.wnorm(x_d - m_frac * kit.mu_star)


def prefix_h_w(kit: LyapunovKit, states: np.ndarray) -> np.ndarray:
    """h_w of every prefix set [0], [1], ..., [N] of the arm ordering.

    Returns an (N+1,) array; entry n is the distance for the first n arms.
    """
    from rbengine import kernels
    return kernels.prefix_wnorms(np.asarray(states, dtype=np.int64),
                                 kit.mu_star, kit.chol)


def h_id(kit: LyapunovKit, states: np.ndarray, m: float) -> float:
    """Non-decreasing envelope of the prefix distances up to fraction m."""
    n_arms = len(states)
    n_prefix = int(round(m * n_arms))
    if abs(m * n_arms - n_prefix) > 1e-9 or not 0 <= n_prefix <= n_arms:
        raise InputError(f"m={m} is not a multiple of 1/N in [0, 1]")
    if n_prefix == 0:
        return 0.0
    return float(prefix_h_w(kit, states)[: n_prefix + 1].max())


def slack(instance: RBInstance, solution: LPSolution, x_d: np.ndarray,
          m: float) -> float:
    """beta*(1-m) minus half the L1 distance of the subset counts from the
    m-scaled stationary distribution; nonnegative slack certifies that arms
    in the subset can, in expectation, all take their ideal actions."""
    x_d = _check_counts(x_d, m)
    dist = float(np.abs(x_d - m * np.asarray(solution.mu_star)).sum())
    return instance.beta * (1.0 - m) - 0.5 * dist


def m_d(kit: LyapunovKit, instance: RBInstance, states: np.ndarray) -> float:
    """Largest m in the 1/N grid with kappa * h_id(x, m) <= beta * (1 - m).

    m = 0 always qualifies.  Every grid multiple is tested.
    """
    states = np.asarray(states, dtype=np.int64)
    n_arms = len(states)
    prefix = prefix_h_w(kit, states)
    envelope = np.maximum.accumulate(prefix)
    grid = np.arange(n_arms + 1) / n_arms
    ok = kit.kappa * envelope <= instance.beta * (1.0 - grid) + 1e-12
    return float(np.flatnonzero(ok).max() / n_arms)


@dataclass(frozen=True)
class BoundReport:
    c_se: float
    c_id: float
    c_so: float
    n_arms: tuple
    bounds_se: tuple
    bounds_id: tuple
    bounds_so: tuple


def gap_bounds(kit: LyapunovKit, instance: RBInstance, n_arms) -> BoundReport:
    """Optimality-gap constants of the three focus-set policies and the
    resulting C/sqrt(N) bounds for each requested N."""
    if np.isscalar(n_arms):
        n_arms = (int(n_arms),)
    n_arms = tuple(int(n) for n in n_arms)
    s = kit.n_states
    lam = kit.lambda_w
    beta = instance.beta
    r_max = instance.r_max
    c_se = 252.0 * r_max * lam**2 * s**2 / beta**2
    c_id = 672.0 * r_max * lam**2.5 * s**1.5 / beta**3
    c_so = 252.0 * r_max * lam**2 * s**2 / beta**2
    return BoundReport(
        c_se=c_se, c_id=c_id, c_so=c_so, n_arms=n_arms,
        bounds_se=tuple(float(c_se / np.sqrt(n)) for n in n_arms),
        bounds_id=tuple(float(c_id / np.sqrt(n)) for n in n_arms),
        bounds_so=tuple(float(c_so / np.sqrt(n)) for n in n_arms),
    )
