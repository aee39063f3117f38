"""Built-in problem instances, Dirichlet random generation, and the
local-instability (mean-field linearization) diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rbengine.errors import InputError
from rbengine.lp import LPSolution, analyze_chain, solve_lp
from rbengine.mdp import RBInstance


def _two_state_cycle() -> RBInstance:
    # Two states; one unit of reward whenever the state flips.  The passive
    # action flips state 0 with prob 1/2 and holds state 1; the active action
    # holds state 0 and flips state 1 with prob 1/2.  With alpha = 0.5 the
    # single-armed optimum activates exactly in state 1 and the stationary
    # distribution is (0.5, 0.5).
    p0 = [[0.5, 0.5], [0.0, 1.0]]
    p1 = [[1.0, 0.0], [0.5, 0.5]]
    r0 = [0.5, 0.0]  # expected reward = flip probability
    r1 = [0.0, 0.5]
    return RBInstance(2, p0, p1, r0, r1, alpha=0.5, name="two-state-cycle")


def _periodic_two_state() -> RBInstance:
    # State flips deterministically regardless of the action; reward 1 for
    # (A,0) and (B,1).  The relaxed optimum is 1 but every policy on the
    # N-armed system started in lockstep earns exactly 1/2.
    p = [[0.0, 1.0], [1.0, 0.0]]
    r0 = [1.0, 0.0]
    r1 = [0.0, 1.0]
    return RBInstance(2, p, p, r0, r1, alpha=0.5, name="periodic-two-state")


def _three_state_nongap() -> RBInstance:
    # published to 8 decimals; some rows carry 1e-8 rounding residue, so
    # renormalize to make them exactly stochastic
    p0 = np.array([
        [0.02232142, 0.10229283, 0.87538575],
        [0.03426605, 0.17175704, 0.79397691],
        [0.52324756, 0.45523298, 0.02151947],
    ])
    p1 = np.array([
        [0.14874601, 0.30435809, 0.54689589],
        [0.56845754, 0.41117331, 0.02036915],
        [0.25265570, 0.27310439, 0.47423990],
    ])
    p0 /= p0.sum(axis=1, keepdims=True)
    p1 /= p1.sum(axis=1, keepdims=True)
    r0 = [0.0, 0.0, 0.0]
    r1 = [0.37401552, 0.11740814, 0.07866135]
    return RBInstance(3, p0, p1, r0, r1, alpha=0.4, name="three-state-nongap")


def _eight_state_nongap() -> RBInstance:
    # Eight states in a ring.  The preferred action (1 below state 4, else 0)
    # advances to (s+1) mod 8 with prob 0.1; the other action steps back to
    # (s-1)^+ with prob p_left[s].  Unused probability stays put.
    n = 8
    p_right = np.full(n, 0.1)
    p_left = np.array([1.0, 1.0, 0.48, 0.47, 0.46, 0.45, 0.44, 0.43])
    p0 = np.zeros((n, n))
    p1 = np.zeros((n, n))
    for s in range(n):
        preferred = 1 if s < 4 else 0
        fwd = np.zeros(n)
        fwd[(s + 1) % n] += p_right[s]
        fwd[s] += 1.0 - p_right[s]
        back = np.zeros(n)
        back[max(s - 1, 0)] += p_left[s]
        back[s] += 1.0 - p_left[s]
        if preferred == 1:
            p1[s], p0[s] = fwd, back
        else:
            p0[s], p1[s] = fwd, back
    r0 = np.zeros(n)
    r1 = np.zeros(n)
    r0[7] = 0.1
    r1[0] = 1.0 / 300.0
    return RBInstance(n, p0, p1, r0, r1, alpha=0.5, name="eight-state-nongap")


def _required_action_instance(name, n, required, moves, reward_states, alpha):
    """Assemble a graph-defined instance: taking the required action at state s
    moves uniformly over ``moves[s]``; the other action jumps to state 0.
    Reward 1 accrues for the required action at each state in reward_states.
    """
    p0 = np.zeros((n, n))
    p1 = np.zeros((n, n))
    r0 = np.zeros(n)
    r1 = np.zeros(n)
    jump = np.zeros(n)
    jump[0] = 1.0
    for s in range(n):
        good = np.zeros(n)
        for t in moves[s]:
            good[t] += 1.0 / len(moves[s])
        if required[s] == 1:
            p1[s], p0[s] = good, jump
        else:
            p0[s], p1[s] = good, jump
        if s in reward_states:
            (r1 if required[s] == 1 else r0)[s] = 1.0
    return RBInstance(n, p0, p1, r0, r1, alpha=alpha, name=name)


def _non_sa_8() -> RBInstance:
    # Ladder 0-1-2-3 requires actions 1,1,1,0 to enter the rewarded cycle on
    # {4,5,6,7}: 4 -(1)-> 5 -(1)-> 6 -(0)-> {4,7}, 7 -(1)-> 6.  Cycle action
    # runs never contain three consecutive 1s, so a follower copying a
    # leader's actions can never climb past state 2.  Activation fraction of
    # the cycle is 0.6 = alpha.
    required = [1, 1, 1, 0, 1, 1, 0, 1]
    moves = {0: [1], 1: [2], 2: [3], 3: [4], 4: [5], 5: [6], 6: [4, 7], 7: [6]}
    return _required_action_instance("non-sa-8", 8, required, moves, {4, 5, 6, 7}, 0.6)


def _non_sa_12() -> RBInstance:
    # Ladder 0..4 requires actions 1,1,1,1,0 (four consecutive 1s) to reach
    # the hub state 8.  The rewarded part is a hub with two loops of coprime
    # lengths: 8 -(1)-> {5,9}; 5 -(1)-> 6 -(0)-> 7 -(0)-> 11 -(0)-> 8 (length
    # 5) and 9 -(1)-> 10 -(0)-> 8 (length 3).  Stationary weights: hub 1/4,
    # other cycle states 1/8 each, so activation = 1/4 + 1/8 + 1/8 = 1/2 =
    # alpha, and cycle action runs never exceed two consecutive 1s.
    required = [1, 1, 1, 1, 0, 1, 0, 0, 1, 1, 0, 0]
    moves = {
        0: [1], 1: [2], 2: [3], 3: [4], 4: [8],
        8: [5, 9], 5: [6], 6: [7], 7: [11], 11: [8],
        9: [10], 10: [8],
    }
    return _required_action_instance("non-sa-12", 12, required, moves,
                                     {5, 6, 7, 8, 9, 10, 11}, 0.5)


_BUILTINS = {
    "two-state-cycle": _two_state_cycle,
    "periodic-two-state": _periodic_two_state,
    "three-state-nongap": _three_state_nongap,
    "eight-state-nongap": _eight_state_nongap,
    "non-sa-8": _non_sa_8,
    "non-sa-12": _non_sa_12,
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> RBInstance:
    """Return a built-in instance by name."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise InputError(
            f"unknown builtin {name!r}; choose from {', '.join(BUILTIN_NAMES)}"
        ) from None
    return factory()


def gen_dirichlet(n_states: int, dirichlet_param: float,
                  rng: np.random.Generator, name: str | None = None) -> RBInstance:
    """Random instance: every transition row and both reward vectors are
    i.i.d. Dirichlet(param * 1) draws; alpha ~ U[0.1, 0.9] rounded down to the
    nearest 0.01."""
    if n_states < 2:
        raise InputError("n_states must be at least 2")
    if dirichlet_param <= 0:
        raise InputError("dirichlet_param must be positive")
    conc = np.full(n_states, dirichlet_param)
    p0 = rng.dirichlet(conc, size=n_states)
    p1 = rng.dirichlet(conc, size=n_states)
    r0 = rng.dirichlet(conc)
    r1 = rng.dirichlet(conc)
    alpha = np.floor(rng.uniform(0.1, 0.9) * 100.0) / 100.0
    return RBInstance(n_states, p0, p1, r0, r1, alpha=float(alpha),
                      name=name or f"dirichlet-{dirichlet_param:g}")


@dataclass(frozen=True)
class PhiReport:
    """Mean-field linearization around the optimal stationary point.

    ``phi`` is the local update matrix of the scaled state-count deviation
    under any priority policy consistent with the LP solution; spectral
    radius > 1 certifies local instability.  The matrix is only defined for
    instances whose LP optimum is unique, has no transient states, and has a
    (single) randomized state s_tilde.
    """

    phi: np.ndarray | None
    spectral_radius: float
    locally_unstable: bool
    well_defined: bool
    s_tilde: int | None


def phi_report(instance: RBInstance, solution: LPSolution) -> PhiReport:
    not_defined = PhiReport(None, float("nan"), False, False, None)
    if not solution.unique_optimum:
        return not_defined
    if np.any(solution.mu_star <= 0):
        return not_defined
    randomized = [s for s in range(instance.n_states)
                  if solution.y[s, 0] > 0 and solution.y[s, 1] > 0]
    if len(randomized) != 1:
        return not_defined
    s_tilde = randomized[0]
    one = np.ones(instance.n_states)
    c = solution.c_pibs
    phi = (solution.p_pibs
           - np.outer(one, solution.mu_star)
           - np.outer(c - instance.alpha * one,
                      instance.p1[s_tilde] - instance.p0[s_tilde]))
    radius = float(np.abs(np.linalg.eigvals(phi)).max())
    phi = phi.copy()
    phi.setflags(write=False)
    return PhiReport(phi, radius, radius > 1.0, True, s_tilde)


@dataclass(frozen=True)
class ScanRow:
    instance_id: int
    slem: float
    phi_radius: float
    well_defined: bool
    locally_unstable: bool
    alpha: float


@dataclass(frozen=True)
class ScanSummary:
    rows: tuple
    n_generated: int
    n_well_defined: int
    n_below_cutoff: int
    n_unstable_below_cutoff: int
    slem_cutoff: float

    @property
    def unstable_fraction(self) -> float:
        """Fraction locally unstable among well-defined instances with
        slem below the cutoff."""
        if self.n_below_cutoff == 0:
            return float("nan")
        return self.n_unstable_below_cutoff / self.n_below_cutoff


def scan(n_instances: int, n_states: int, dirichlet_param: float,
         slem_cutoff: float, seed: int,
         target_well_defined: int | None = None) -> ScanSummary:
    """Generate random instances, solve each LP, and tally local instability.

    With ``target_well_defined`` set, generation continues past
    ``n_instances`` until that many well-defined instances are collected
    (bounded at 20x the target).
    """
    rows = []
    n_generated = n_well = n_below = n_unstable = 0
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    limit = n_instances if target_well_defined is None else 20 * max(target_well_defined, 1)
    while True:
        if target_well_defined is None:
            if n_generated >= n_instances:
                break
        elif n_well >= target_well_defined or n_generated >= limit:
            break
        inst = gen_dirichlet(n_states, dirichlet_param, rng,
                             name=f"dirichlet-{dirichlet_param:g}-{n_generated}")
        sol = solve_lp(inst)
        chain = analyze_chain(sol)
        report = phi_report(inst, sol)
        rows.append(ScanRow(
            instance_id=n_generated,
            slem=chain.slem,
            phi_radius=report.spectral_radius,
            well_defined=report.well_defined,
            locally_unstable=report.locally_unstable,
            alpha=inst.alpha,
        ))
        n_generated += 1
        if report.well_defined:
            n_well += 1
            if chain.slem < slem_cutoff:
                n_below += 1
                if report.locally_unstable:
                    n_unstable += 1
    return ScanSummary(tuple(rows), n_generated, n_well, n_below, n_unstable,
                       slem_cutoff)
