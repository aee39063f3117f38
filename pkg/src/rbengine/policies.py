"""Policy step functions: each maps the current states to a joint action
vector meeting the exact per-step budget.

Random draws are consumed in fixed, documented blocks so that trajectories
are reproducible: a set-update block (set-expansion / set-optimization
only), an ideal-action block, a tie-break block, and transition blocks drawn
by the simulator.  Uniform random subset selection everywhere means "the k
candidates with the smallest uniforms", an exchangeable and therefore
uniform choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rbengine import kernels
from rbengine.errors import InputError
from rbengine.focus import max_feasible_m, solve_set_optimization
from rbengine.lp import LPSolution, priority_order
from rbengine.lyapunov import LyapunovKit
from rbengine.mdp import RBInstance

POLICY_KINDS = (
    "set-expansion",
    "set-expansion-lp-index",
    "id",
    "set-optimization",
    "lp-priority",
    "ftva",
    "random",
)


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise InputError(
                f"unknown policy kind {self.kind!r}; choose from {', '.join(POLICY_KINDS)}")

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        """Parse a CLI policy string, e.g. ``id`` or ``set-expansion:lp-index``."""
        text = text.strip()
        if text == "set-expansion:lp-index":
            text = "set-expansion-lp-index"
        return cls(kind=text)

    @property
    def needs_kit(self) -> bool:
        return self.kind == "set-optimization"

    @property
    def has_ideal_actions(self) -> bool:
        return self.kind not in ("lp-priority", "random")

    @property
    def is_focus_set(self) -> bool:
        return self.kind in ("set-expansion", "set-expansion-lp-index",
                             "id", "set-optimization")


@dataclass(frozen=True)
class PolicyStep:
    """One step's decisions: the budget-exact action vector, plus the
    sampled ideal actions, focus set, and conforming subset where the policy
    defines them.  ``ftva_coupled`` marks arms whose real transition must
    copy the virtual one (same state, same action)."""

    actions: np.ndarray
    ideal_actions: np.ndarray | None = None
    focus_set: np.ndarray | None = None
    conformity_set: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    ftva_coupled: np.ndarray | None = None


def sample_ideal_actions(solution: LPSolution, states: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw each arm's ideal action from the optimal single-armed policy,
    consuming one uniform per arm in arm order."""
    u = rng.random(states.shape[0])
    return kernels.ideal_actions(solution.c_pibs, states, u)


def pick_k_smallest(candidates: np.ndarray, u: np.ndarray, k: int) -> np.ndarray:
    """The k candidates with the smallest uniforms (a uniform random subset)."""
    if k <= 0:
        return candidates[:0]
    if k >= candidates.shape[0]:
        return candidates
    sel = np.argpartition(u[candidates], k - 1)[:k]
    return candidates[sel]


def _conformity(focus_mask, actions, ahat):
    conform = focus_mask & (actions == ahat)
    return np.flatnonzero(conform)


def _rectify(ahat, focus_mask, budget, u_rect, rank_of_state=None, states=None):
    """Budget-exact rectification giving arms in the focus set precedence to
    keep their ideal actions.  Ties are broken uniformly at random via the
    tie-break uniforms, or by state priority when ``rank_of_state`` is given
    (smaller rank = higher priority); the priority variant also assigns the
    leftover budget outside the focus set by priority instead of by ideal
    action."""
    n = ahat.shape[0]
    in_sum = int(ahat[focus_mask].sum())
    size = int(focus_mask.sum())
    actions = np.zeros(n, dtype=np.int8)

    def choose(cand, k, prefer_low_priority=False):
        if rank_of_state is None:
            return pick_k_smallest(cand, u_rect, k)
        key = rank_of_state[states[cand]]
        if prefer_low_priority:
            key = -key
        order = np.lexsort((cand, key))
        return cand[order[:k]]

    if in_sum >= budget:
        cand = np.flatnonzero(focus_mask & (ahat == 1))
        actions[choose(cand, budget)] = 1
    elif in_sum <= budget - (n - size):
        cand = np.flatnonzero(focus_mask & (ahat == 0))
        actions[:] = 1
        actions[choose(cand, n - budget, prefer_low_priority=True)] = 0
    else:
        actions[focus_mask] = ahat[focus_mask]
        spare = budget - in_sum
        outside = np.flatnonzero(~focus_mask)
        if rank_of_state is not None:
            order = np.lexsort((outside, rank_of_state[states[outside]]))
            actions[outside[order[:spare]]] = 1
        else:
            ones = outside[ahat[outside] == 1]
            if ones.shape[0] >= spare:
                actions[pick_k_smallest(ones, u_rect, spare)] = 1
            else:
                actions[ones] = 1
                zeros = outside[ahat[outside] == 0]
                extra = pick_k_smallest(zeros, u_rect, spare - ones.shape[0])
                actions[extra] = 1
    return actions


def step_id(solution: LPSolution, instance: RBInstance, states: np.ndarray,
            rng: np.random.Generator, budget: int | None = None,
            kit: LyapunovKit | None = None) -> PolicyStep:
    """Walk the arms in ID order giving each its ideal action while the
    budget allows; the remaining tail is forced constant."""
    n = states.shape[0]
    if budget is None:
        budget = int(round(instance.alpha * n))
    ahat = sample_ideal_actions(solution, states, rng)
    actions, n_pibs = kernels.id_rectify(ahat, budget)
    diag = {"n_pibs": float(n_pibs)}
    focus = conformity = None
    if kit is not None:
        # the coverage prefix [N m_d] acts as the focus set; the conforming
        # part is its overlap with the ideal-action prefix
        from rbengine.lyapunov import m_d
        md = m_d(kit, instance, states)
        diag["m_d"] = md
        n_md = int(round(md * n))
        focus = np.arange(n_md)
        conformity = np.arange(min(n_md, n_pibs))
    return PolicyStep(actions=actions, ideal_actions=ahat, focus_set=focus,
                      conformity_set=conformity, diagnostics=diag)


def step_lp_priority(solution: LPSolution, instance: RBInstance,
                     states: np.ndarray, budget: int | None = None,
                     rank_of_state: np.ndarray | None = None) -> PolicyStep:
    """Activate arms from high-priority states downward until the budget is
    exactly spent; within a state, lower arm index first.  Deterministic."""
    n = states.shape[0]
    if budget is None:
        budget = int(round(instance.alpha * n))
    if rank_of_state is None:
        rank_of_state = rank_array(solution)
    actions = kernels.priority_actions(rank_of_state, states, budget)
    return PolicyStep(actions=actions)


def rank_array(solution: LPSolution) -> np.ndarray:
    """rank[s] = position of s in the priority order (0 = highest)."""
    order = priority_order(solution)
    rank = np.empty(len(order), dtype=np.int64)
    for pos, s in enumerate(order):
        rank[s] = pos
    return rank


def step_random(instance: RBInstance, states: np.ndarray,
                rng: np.random.Generator, budget: int | None = None) -> PolicyStep:
    """Uniformly random subset of exactly budget arms activated."""
    n = states.shape[0]
    if budget is None:
        budget = int(round(instance.alpha * n))
    u = rng.random(n)
    actions = np.zeros(n, dtype=np.int8)
    actions[pick_k_smallest(np.arange(n), u, budget)] = 1
    return PolicyStep(actions=actions)


def step_ftva(solution: LPSolution, instance: RBInstance, states: np.ndarray,
              virtual_states: np.ndarray, rng: np.random.Generator,
              budget: int | None = None):
    """Virtual arms follow the optimal single-armed policy unconstrained;
    real actions copy the virtual ones, with a uniformly random subset
    flipped to meet the budget.  Returns (step, next_virtual_states); arms
    whose state and action agree with their virtual twin are marked for a
    coupled transition (the simulator copies the virtual next state).
    """
    n = states.shape[0]
    if budget is None:
        budget = int(round(instance.alpha * n))
    ahat = sample_ideal_actions(solution, virtual_states, rng)
    u_rect = rng.random(n)
    actions = ahat.copy()
    total = int(ahat.sum())
    if total > budget:
        flip = pick_k_smallest(np.flatnonzero(ahat == 1), u_rect, total - budget)
        actions[flip] = 0
    elif total < budget:
        flip = pick_k_smallest(np.flatnonzero(ahat == 0), u_rect, budget - total)
        actions[flip] = 1
    u_virt = rng.random(n)
    next_virtual = kernels.transitions(_cdf(instance), virtual_states,
                                       ahat, u_virt)
    coupled = (states == virtual_states) & (actions == ahat)
    good = int(coupled.sum())
    step = PolicyStep(actions=actions, ideal_actions=ahat,
                      diagnostics={"n_good": float(good)},
                      ftva_coupled=coupled)
    return step, next_virtual


_CDF_CACHE = {}


def _cdf(instance: RBInstance) -> np.ndarray:
    """(2, S, S) row-cumulative transition matrix, cached per instance.

    Keyed by object identity; the instance is pinned in the cache entry so
    the id stays valid, and the cache is reset when it grows large.
    """
    key = id(instance)
    hit = _CDF_CACHE.get(key)
    if hit is None:
        if len(_CDF_CACHE) > 64:
            _CDF_CACHE.clear()
        cdf = np.stack([np.cumsum(instance.p0, axis=1),
                        np.cumsum(instance.p1, axis=1)])
        _CDF_CACHE[key] = (instance, cdf)
        return cdf
    return hit[1]


def _realize_counts(states, target_counts, keep_mask, eligible_mask, u_set,
                    n_states):
    """Pick a set with the given per-state counts: everything in keep_mask is
    retained and per-state shortfalls are filled from eligible_mask by
    smallest uniform.  Requires per-state targets of at least the kept counts
    and at most kept + eligible."""
    mask = keep_mask.copy()
    kept = np.bincount(states[keep_mask], minlength=n_states)
    need = np.asarray(target_counts) - kept
    if not (need > 0).any():
        return mask
    cand = np.flatnonzero(eligible_mask & ~keep_mask)
    if cand.size == 0:
        return mask
    # one sort groups candidates by state with uniforms ascending inside;
    # each candidate's within-state rank decides membership
    order = cand[np.lexsort((u_set[cand], states[cand]))]
    cs = states[order]
    starts = np.searchsorted(cs, np.arange(n_states), side="left")
    rank = np.arange(order.size) - starts[cs]
    mask[order[rank < need[cs]]] = True
    return mask


def _set_expansion_target(counts_prev, counts_all, n, mu, beta):
    """Target per-state counts (and the expand/shrink flag) of the
    set-expansion update, a pure function of the two count vectors."""
    m_prev = counts_prev.sum() / n
    delta_prev = (beta * (1.0 - m_prev)
                  - 0.5 * np.abs(counts_prev / n - m_prev * mu).sum())
    expanding = delta_prev > 0
    if expanding:
        lo, hi = counts_prev / n, counts_all / n
    else:
        lo, hi = np.zeros(counts_prev.shape[0]), counts_prev / n
    _, z_star = max_feasible_m(lo, hi, mu, beta)
    target = np.floor(n * z_star + 1e-9).astype(np.int64)
    if expanding:
        target = np.maximum(target, counts_prev)
    return target, expanding


def step_set_expansion(kit: LyapunovKit | None, solution: LPSolution,
                       instance: RBInstance, states: np.ndarray,
                       prev_focus_mask: np.ndarray, rng: np.random.Generator,
                       use_lp_index_tiebreak: bool = False,
                       budget: int | None = None,
                       rank_of_state: np.ndarray | None = None,
                       cache: dict | None = None,
                       collect_diagnostics: bool = True) -> PolicyStep:
    """Grow (or trim) the focus set to the largest slack-feasible fraction,
    then rectify ideal actions around it.

    The set update solves the relaxed mass problem exactly and realizes the
    set by flooring per-state masses to counts: previous members are kept
    first and per-state extras (or shrink survivors) are drawn uniformly.
    The realized slack may dip below zero by at most ~2|S|/N from flooring.
    The update depends only on the previous and full count vectors, so it is
    memoized in ``cache`` when one is supplied.
    """
    n = states.shape[0]
    n_states = instance.n_states
    if budget is None:
        budget = int(round(instance.alpha * n))
    mu = np.asarray(solution.mu_star)
    u_set = rng.random(n)

    counts_all = np.bincount(states, minlength=n_states)
    counts_prev = np.bincount(states[prev_focus_mask], minlength=n_states)
    key = counts_prev.tobytes() + counts_all.tobytes() if cache is not None else None
    hit = cache.get(key) if cache is not None else None
    if hit is None:
        hit = _set_expansion_target(counts_prev, counts_all, n, mu,
                                    instance.beta)
        if cache is not None:
            cache[key] = hit
    target, expanding = hit
    if expanding:
        keep, eligible = prev_focus_mask, ~prev_focus_mask
    else:
        keep, eligible = np.zeros(n, dtype=bool), prev_focus_mask
    mask = _realize_counts(states, target, keep, eligible, u_set, n_states)

    ahat = sample_ideal_actions(solution, states, rng)
    u_rect = rng.random(n)
    if use_lp_index_tiebreak:
        if rank_of_state is None:
            rank_of_state = rank_array(solution)
        actions = _rectify(ahat, mask, budget, u_rect, rank_of_state, states)
    else:
        actions = _rectify(ahat, mask, budget, u_rect)

    if not collect_diagnostics:
        return PolicyStep(actions=actions, ideal_actions=ahat,
                          focus_set=np.flatnonzero(mask))
    m_t = mask.sum() / n
    counts_t = np.bincount(states[mask], minlength=n_states)
    delta_t = (instance.beta * (1.0 - m_t)
               - 0.5 * np.abs(counts_t / n - m_t * mu).sum())
    diag = {"m_focus": float(m_t), "slack": float(delta_t)}
    if kit is not None:
        diag["h_w"] = kit.wnorm(counts_t / n - m_t * mu)
    return PolicyStep(actions=actions, ideal_actions=ahat,
                      focus_set=np.flatnonzero(mask),
                      conformity_set=_conformity(mask, actions, ahat),
                      diagnostics=diag)


def step_set_optimization(kit: LyapunovKit, solution: LPSolution,
                          instance: RBInstance, states: np.ndarray,
                          rng: np.random.Generator,
                          budget: int | None = None,
                          cache: dict | None = None,
                          warm: dict | None = None,
                          collect_diagnostics: bool = True) -> PolicyStep:
    """Choose the focus set minimizing h_W + L_W (1 - m) over slack-feasible
    sets (maximal among near-optima), realized per state uniformly at
    random; rectification is the same random tie-breaking as set-expansion.

    The count-level solution depends only on the full state counts, so it is
    memoized in ``cache`` when one is supplied.
    """
    n = states.shape[0]
    n_states = instance.n_states
    if budget is None:
        budget = int(round(instance.alpha * n))
    mu = np.asarray(solution.mu_star)
    u_set = rng.random(n)

    counts_all = np.bincount(states, minlength=n_states)
    key = counts_all.tobytes()
    target = cache.get(key) if cache is not None else None
    if target is None:
        target = solve_set_optimization(counts_all, n, mu, instance.beta,
                                        kit.w, kit.lambda_w, warm=warm)
        if cache is not None:
            cache[key] = target
    mask = _realize_counts(states, target, np.zeros(n, dtype=bool),
                           np.ones(n, dtype=bool), u_set, n_states)

    ahat = sample_ideal_actions(solution, states, rng)
    u_rect = rng.random(n)
    actions = _rectify(ahat, mask, budget, u_rect)

    if not collect_diagnostics:
        return PolicyStep(actions=actions, ideal_actions=ahat,
                          focus_set=np.flatnonzero(mask))
    m_t = mask.sum() / n
    counts_t = np.bincount(states[mask], minlength=n_states)
    dev = counts_t / n - m_t * mu
    delta_t = instance.beta * (1.0 - m_t) - 0.5 * np.abs(dev).sum()
    h_val = kit.wnorm(dev)
    diag = {"m_focus": float(m_t), "slack": float(delta_t), "h_w": h_val,
            "objective": h_val + kit.l_w * (1.0 - m_t)}
    return PolicyStep(actions=actions, ideal_actions=ahat,
                      focus_set=np.flatnonzero(mask),
                      conformity_set=_conformity(mask, actions, ahat),
                      diagnostics=diag)


def ftva_pair_trace(solution: LPSolution, instance: RBInstance,
                    leader_start: int, follower_start: int, horizon: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Leader-follower coupling probe: the leader follows the optimal
    single-armed policy, the follower copies the leader's actions, and both
    transition independently until their states first coincide.

    Returns the (horizon, 2) state trace; synchronization would show as a
    row with equal entries.
    """
    cdf = _cdf(instance)
    trace = np.empty((horizon, 2), dtype=np.int64)
    leader, follower = leader_start, follower_start
    for t in range(horizon):
        trace[t] = leader, follower
        if leader == follower:
            break
        a = int(rng.random() < solution.c_pibs[leader])
        u = rng.random(2)
        leader = int(kernels.transitions(cdf, np.array([leader]),
                                         np.array([a], dtype=np.int8), u[:1])[0])
        follower = int(kernels.transitions(cdf, np.array([follower]),
                                           np.array([a], dtype=np.int8), u[1:])[0])
    return trace[: t + 1]
