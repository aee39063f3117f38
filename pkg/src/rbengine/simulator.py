"""Discrete-time N-armed simulation with reward accounting, batch-means
confidence intervals, focus-set trajectory diagnostics, persistence
measurement, and an exact small-system oracle.

Reproducibility: replication r of a run seeds its own generator from
SeedSequence([seed, r]); within a step the draw order is fixed (set-update
block, ideal-action block, tie-break block, transition block(s)), each an
N-length uniform array, so identical (instance, config, policy, seed) give
identical trajectories.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from rbengine import kernels
from rbengine.errors import InputError, RBError
from rbengine.lp import LPSolution, solve_lp, stationary_distribution
from rbengine.lyapunov import LyapunovKit, build_kit, prefix_h_w
from rbengine.mdp import ArmConfig, RBInstance
from rbengine.policies import (
    PolicySpec,
    PolicyStep,
    _cdf,
    rank_array,
    step_ftva,
    step_id,
    step_lp_priority,
    step_random,
    step_set_expansion,
    step_set_optimization,
)

BURN_IN_FRACTION = 0.25
PERSISTENCE_BURN_IN = 5000


@dataclass
class SystemState:
    """Per-arm states with cached per-state counts."""

    states: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_states(cls, states, n_states):
        states = np.asarray(states, dtype=np.int64)
        return cls(states, np.bincount(states, minlength=n_states))

    def scaled_counts(self):
        return self.counts / self.states.shape[0]


@dataclass(frozen=True)
class FocusTrace:
    """Per-step focus-set diagnostics, one row per replication."""

    m_focus: np.ndarray
    slack: np.ndarray
    conformity_deficit: np.ndarray
    shrinkage: np.ndarray
    coverage_residual: np.ndarray


@dataclass(frozen=True)
class RunResult:
    reward_trace: np.ndarray  # (replications, horizon)
    avg_reward: float
    ci_half_width: float
    optimality_ratio: float
    r_rel: float
    focus_trace: FocusTrace | None
    persistence: np.ndarray | None  # (horizon,) of rep-0 window fractions
    seed: int
    horizon: int
    n_replications: int
    instance_name: str
    policy: str
    n_arms: int
    batch_means_values: np.ndarray


def _rng_for(seed: int, replication: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), int(replication)])))


def make_stepper(spec: PolicySpec, instance: RBInstance, solution: LPSolution,
                 kit: LyapunovKit | None, budget: int, with_kit_diag: bool):
    """Internal per-step driver: returns f(states, rng) -> (PolicyStep,
    coupled_next or None), threading policy scratch (previous focus set,
    virtual states, set-optimization cache) between calls."""
    kind = spec.kind
    if kind == "id":
        def step(states, rng):
            return step_id(solution, instance, states, rng, budget=budget), None
        return step
    if kind == "lp-priority":
        rank = rank_array(solution)

        def step(states, rng):
            return step_lp_priority(solution, instance, states, budget=budget,
                                    rank_of_state=rank), None
        return step
    if kind == "random":
        def step(states, rng):
            return step_random(instance, states, rng, budget=budget), None
        return step
    if kind == "ftva":
        scratch = {"virtual": None}

        def step(states, rng):
            if scratch["virtual"] is None:
                scratch["virtual"] = states.copy()
            out, nxt_virtual = step_ftva(solution, instance, states,
                                         scratch["virtual"], rng, budget=budget)
            coupled_next = nxt_virtual
            scratch["virtual"] = nxt_virtual
            return out, coupled_next
        return step
    if kind in ("set-expansion", "set-expansion-lp-index"):
        use_lpi = kind == "set-expansion-lp-index"
        rank = rank_array(solution) if use_lpi else None
        scratch = {"mask": None}
        cache = {}
        diag_kit = kit if with_kit_diag else None

        def step(states, rng):
            if scratch["mask"] is None:
                scratch["mask"] = np.zeros(states.shape[0], dtype=bool)
            out = step_set_expansion(diag_kit, solution, instance, states,
                                     scratch["mask"], rng,
                                     use_lp_index_tiebreak=use_lpi,
                                     budget=budget, rank_of_state=rank,
                                     cache=cache,
                                     collect_diagnostics=with_kit_diag)
            mask = np.zeros(states.shape[0], dtype=bool)
            mask[out.focus_set] = True
            scratch["mask"] = mask
            return out, None
        return step
    if kind == "set-optimization":
        if kit is None:
            raise InputError("set-optimization requires a Lyapunov kit")
        cache = {}
        warm = {}

        def step(states, rng):
            return step_set_optimization(kit, solution, instance, states, rng,
                                         budget=budget, cache=cache, warm=warm,
                                         collect_diagnostics=with_kit_diag), None
        return step
    raise InputError(f"unhandled policy kind {kind}")


def _id_trace_values(kit, instance, states, n_pibs):
    """Focus-set diagnostics of the ID policy: coverage fraction, slack,
    conformity deficit, and the coverage-condition residual."""
    n = states.shape[0]
    prefix = prefix_h_w(kit, states)
    envelope = np.maximum.accumulate(prefix)
    grid = np.arange(n + 1) / n
    ok = kit.kappa * envelope <= instance.beta * (1.0 - grid) + 1e-12
    n_md = int(np.flatnonzero(ok).max())
    md = n_md / n
    h_id_val = float(envelope[n_md])
    mu = kit.mu_star
    counts = np.bincount(states[:n_md], minlength=instance.n_states)
    delta = instance.beta * (1.0 - md) - 0.5 * np.abs(counts / n - md * mu).sum()
    deficit = max(n_md - n_pibs, 0) / n
    slack_term = (2.0 * kit.kappa * np.sqrt(kit.lambda_w) + instance.beta) / (
        instance.beta * n)
    coverage = (1.0 - md) - (kit.kappa / instance.beta) * h_id_val - slack_term
    return md, delta, deficit, coverage


def _run_replication(args):
    (instance, config, spec, horizon, seed, rep, solution, kit,
     collect_traces) = args
    n = config.n_arms
    budget = config.budget
    rng = _rng_for(seed, rep)
    states = config.draw_initial_states(instance.n_states, rng)
    cdf = _cdf(instance)
    r0, r1 = instance.r0, instance.r1

    fused_kinds = {"id": 0, "lp-priority": 1, "random": 2, "ftva": 3}
    if (kernels.HAS_FUSED and not collect_traces
            and spec.kind in fused_kinds):
        rank = rank_array(solution) if spec.kind == "lp-priority" else None
        reward = kernels.run_simple_policy(
            fused_kinds[spec.kind], states, cdf, solution.c_pibs, rank,
            budget, horizon, r0, r1, rng.bit_generator)
        return reward, None, None

    stepper = make_stepper(spec, instance, solution, kit, budget,
                           with_kit_diag=collect_traces and kit is not None)
    reward = np.empty(horizon)
    traces = None
    conform = None
    if collect_traces:
        traces = {k: np.full(horizon, np.nan) for k in
                  ("m_focus", "slack", "conformity_deficit", "shrinkage",
                   "coverage_residual")}
        if spec.has_ideal_actions:
            conform = np.empty((horizon, n), dtype=bool)
    prev_m = None
    for t in range(horizon):
        step, coupled_next = stepper(states, rng)
        actions = step.actions
        if int(actions.sum()) != budget:
            raise RBError(
                f"budget violated at t={t}: {int(actions.sum())} != {budget}")
        reward[t] = kernels.mean_reward(r0, r1, states, actions)
        if collect_traces:
            _record_trace(traces, conform, t, step, states, instance, solution,
                          kit, spec, prev_m)
            if not np.isnan(traces["m_focus"][t]):
                prev_m = traces["m_focus"][t]
        u_trans = rng.random(n)
        nxt = kernels.transitions(cdf, states, actions, u_trans)
        if step.ftva_coupled is not None:
            nxt[step.ftva_coupled] = coupled_next[step.ftva_coupled]
        states = nxt
    return reward, traces, conform


def _record_trace(traces, conform, t, step, states, instance, solution, kit,
                  spec, prev_m):
    if conform is not None and step.ideal_actions is not None:
        conform[t] = step.actions == step.ideal_actions
    kind = spec.kind
    if kind == "id" and kit is not None:
        md, delta, deficit, coverage = _id_trace_values(
            kit, instance, states, int(step.diagnostics["n_pibs"]))
        traces["m_focus"][t] = md
        traces["slack"][t] = delta
        traces["conformity_deficit"][t] = deficit
        traces["coverage_residual"][t] = coverage
    elif kind in ("set-expansion", "set-expansion-lp-index", "set-optimization"):
        m_t = step.diagnostics["m_focus"]
        traces["m_focus"][t] = m_t
        traces["slack"][t] = step.diagnostics["slack"]
        traces["conformity_deficit"][t] = (
            len(step.focus_set) - len(step.conformity_set)) / states.shape[0]
        if kit is not None and "h_w" in step.diagnostics:
            n = states.shape[0]
            s_count = instance.n_states
            traces["coverage_residual"][t] = (
                (1.0 - m_t)
                - np.sqrt(s_count) / instance.beta * step.diagnostics["h_w"]
                - 2.0 / (instance.beta * n))
    if prev_m is not None and not np.isnan(traces["m_focus"][t]):
        traces["shrinkage"][t - 1] = max(prev_m - traces["m_focus"][t], 0.0)


def batch_means(trace: np.ndarray, n_batches: int):
    """Split a trace into equal batches; return (mean of batch means,
    95% half-width from the t distribution over the batch means)."""
    trace = np.asarray(trace, dtype=float)
    if trace.ndim != 1:
        raise InputError("batch_means expects a 1-D trace")
    if n_batches < 2:
        raise InputError("need at least 2 batches")
    if trace.shape[0] % n_batches:
        raise InputError(
            f"trace length {trace.shape[0]} not divisible by {n_batches} batches")
    means = trace.reshape(n_batches, -1).mean(axis=1)
    return _mean_ci(means)


def _mean_ci(means: np.ndarray):
    k = means.shape[0]
    if k < 2:
        raise InputError("need at least 2 batch means for a confidence interval")
    center = float(means.mean())
    spread = float(means.std(ddof=1))
    half = float(sps.t.ppf(0.975, k - 1) * spread / np.sqrt(k))
    return center, half


def run(instance: RBInstance, config: ArmConfig, policy: PolicySpec | str,
        horizon: int, replications: int = 5, seed: int = 0, *,
        solution: LPSolution | None = None, kit: LyapunovKit | None = None,
        collect_traces: bool = False, n_batches: int = 4,
        burn_in_fraction: float = BURN_IN_FRACTION,
        strict_batching: bool = False, jobs: int = 1,
        persistence_window: int | None = None) -> RunResult:
    """Simulate a policy and aggregate batch-means statistics.

    The first ``burn_in_fraction`` of each replication is discarded before
    batching unless ``strict_batching`` (which batches the whole path).
    """
    if horizon < 1:
        raise InputError("horizon must be at least 1")
    if isinstance(policy, str):
        policy = PolicySpec.parse(policy)
    if solution is None:
        solution = solve_lp(instance)
    if kit is None and (policy.needs_kit or (collect_traces and policy.is_focus_set)):
        kit = build_kit(solution, instance, identity_fallback=True)

    tasks = [(instance, config, policy, horizon, seed, rep, solution, kit,
              collect_traces) for rep in range(replications)]
    if jobs > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_replication, tasks))
    else:
        outs = [_run_replication(t) for t in tasks]

    reward = np.stack([o[0] for o in outs])
    burn = 0 if strict_batching else int(horizon * burn_in_fraction)
    usable = horizon - burn
    usable -= usable % n_batches
    if usable < n_batches:
        raise InputError("horizon too short for the requested batching")
    start = horizon - usable
    all_means = np.concatenate([
        reward[r, start:].reshape(n_batches, -1).mean(axis=1)
        for r in range(replications)])
    avg, half = _mean_ci(all_means)

    focus = None
    if collect_traces and outs[0][1] is not None:
        focus = FocusTrace(**{
            key: np.stack([o[1][key] for o in outs])
            for key in outs[0][1]})
    persistence_trace = None
    if (collect_traces and outs[0][2] is not None and persistence_window
            and PERSISTENCE_BURN_IN + persistence_window <= horizon):
        persistence_trace = persistence(outs[0][2], persistence_window)

    return RunResult(
        reward_trace=reward,
        avg_reward=avg,
        ci_half_width=half,
        optimality_ratio=avg / solution.r_rel if solution.r_rel else np.inf,
        r_rel=solution.r_rel,
        focus_trace=focus,
        persistence=persistence_trace,
        seed=seed,
        horizon=horizon,
        n_replications=replications,
        instance_name=instance.name,
        policy=policy.kind,
        n_arms=config.n_arms,
        batch_means_values=all_means,
    )


def persistence(conform: np.ndarray, window: int,
                burn_in: int = PERSISTENCE_BURN_IN) -> np.ndarray:
    """Fraction of arms following their ideal actions throughout
    [t, t+window-1], for each t past the burn-in; NaN elsewhere.

    ``conform`` is the (horizon, N) boolean conformity matrix of one
    replication.
    """
    horizon, n = conform.shape
    if window < 1:
        raise InputError("window must be positive")
    if burn_in + window > horizon:
        raise InputError("window exceeds the remaining horizon after burn-in")
    runs = np.zeros(n, dtype=np.int64)
    run_len = np.empty((horizon, n), dtype=np.int64)
    for t in range(horizon):
        runs = np.where(conform[t], runs + 1, 0)
        run_len[t] = runs
    out = np.full(horizon, np.nan)
    valid_t = np.arange(burn_in, horizon - window + 1)
    out[valid_t] = (run_len[valid_t + window - 1] >= window).mean(axis=1)
    return out


@dataclass(frozen=True)
class ConditionBound:
    mean: float
    se: float
    bound: float

    @property
    def ok(self) -> bool:
        return bool(self.mean <= self.bound + 3.0 * self.se)


@dataclass(frozen=True)
class ConditionReport:
    """Time-averaged focus-set condition diagnostics against the policy's
    drift-lemma constants: majority conformity, almost non-shrinking, and
    the pointwise coverage residual (should never exceed ~0)."""

    conformity: ConditionBound
    shrinkage: ConditionBound
    coverage_max: float

    @property
    def ok(self) -> bool:
        return (self.conformity.ok and self.shrinkage.ok
                and self.coverage_max <= 1e-9)


def condition_diagnostics(result: RunResult, kit: LyapunovKit,
                          instance: RBInstance) -> ConditionReport:
    ft = result.focus_trace
    if ft is None:
        raise InputError("run was not collected with traces for a focus-set policy")
    n = result.n_arms
    s_count = instance.n_states
    beta = instance.beta
    root_n = np.sqrt(n)

    def agg(values):
        per_rep = np.nanmean(values, axis=1)
        se = (per_rep.std(ddof=1) / np.sqrt(len(per_rep))
              if len(per_rep) > 1 else 0.0)
        return float(per_rep.mean()), float(se)

    if result.policy == "id":
        conf_bound = 2.0 / (beta * root_n) + 1.0 / n
        shrink_bound = (4.0 * kit.kappa * np.sqrt(kit.lambda_w) * (1 + beta)
                        / (beta**2 * root_n)
                        + (2.0 * kit.kappa * np.sqrt(kit.lambda_w) + beta)
                        / (beta * n))
    else:
        conf_bound = 1.0 / root_n + 1.0 / n
        shrink_bound = ((np.sqrt(s_count) + 1.0) / (beta * root_n)
                        + (1.0 + (beta + 1.0) * s_count) / (beta * n))
        if result.policy == "set-optimization":
            shrink_bound = np.nan  # no non-shrinking guarantee for this policy

    conf_mean, conf_se = agg(ft.conformity_deficit)
    shrink_mean, shrink_se = agg(ft.shrinkage)
    coverage_max = float(np.nanmax(ft.coverage_residual))
    return ConditionReport(
        conformity=ConditionBound(conf_mean, conf_se, float(conf_bound)),
        shrinkage=ConditionBound(shrink_mean, shrink_se, float(shrink_bound)),
        coverage_max=coverage_max,
    )


# ---------------------------------------------------------------------------
# Exact small-system oracle
# ---------------------------------------------------------------------------

def _oracle_id_actions(ahat, budget):
    n = len(ahat)
    total = sum(ahat)
    actions = list(ahat)
    if total >= budget:
        used = 0
        n_pibs = 0
        for i, a in enumerate(ahat):
            if used + a > budget:
                break
            used += a
            n_pibs = i + 1
        actions = list(ahat[:n_pibs]) + [0] * (n - n_pibs)
    else:
        idles = 0
        n_pibs = 0
        for i, a in enumerate(ahat):
            if idles + (1 - a) > n - budget:
                break
            idles += 1 - a
            n_pibs = i + 1
        actions = list(ahat[:n_pibs]) + [1] * (n - n_pibs)
    return tuple(actions)


def _oracle_priority_actions(states, order, budget):
    rank = {s: i for i, s in enumerate(order)}
    by_priority = sorted(range(len(states)), key=lambda i: (rank[states[i]], i))
    actions = [0] * len(states)
    for i in by_priority[:budget]:
        actions[i] = 1
    return tuple(actions)


def exact_small_oracle(instance: RBInstance, config: ArmConfig,
                       policy: PolicySpec | str,
                       solution: LPSolution | None = None) -> float:
    """Exact long-run average reward of the ID or priority policy on a tiny
    system, from the stationary analysis of the full joint chain.

    Ideal-action randomness is marginalized by enumerating all action
    combinations per joint state; periodic recurrent classes are handled via
    their stationary (time-average) distributions, and transient mass via
    absorption probabilities from the initial distribution.
    """
    if isinstance(policy, str):
        policy = PolicySpec.parse(policy)
    if policy.kind not in ("id", "lp-priority"):
        raise InputError("oracle supports only the id and lp-priority policies")
    n = config.n_arms
    if n > 4:
        raise InputError("oracle limited to N <= 4")
    s_count = instance.n_states
    n_joint = s_count**n
    if n_joint > 10_000:
        raise InputError("joint state space too large for the oracle")
    if solution is None:
        solution = solve_lp(instance)
    budget = config.budget

    joint_states = list(itertools.product(range(s_count), repeat=n))
    index = {js: i for i, js in enumerate(joint_states)}
    p_act = [instance.p0, instance.p1]
    trans = np.zeros((n_joint, n_joint))
    rew = np.zeros(n_joint)
    if policy.kind == "lp-priority":
        from rbengine.lp import priority_order
        order = priority_order(solution)

    for js in joint_states:
        i = index[js]
        if policy.kind == "lp-priority":
            combos = [(1.0, _oracle_priority_actions(js, order, budget))]
        else:
            combos = []
            for ahat in itertools.product((0, 1), repeat=n):
                prob = 1.0
                for arm, a in enumerate(ahat):
                    prob *= solution.pibs[js[arm], a]
                if prob == 0.0:
                    continue
                combos.append((prob, _oracle_id_actions(ahat, budget)))
        for prob, actions in combos:
            rew[i] += prob * np.mean([
                (instance.r1 if a else instance.r0)[s]
                for s, a in zip(js, actions)])
            block = np.ones(1)
            for s, a in zip(js, actions):
                block = np.kron(block, p_act[a][s])
            trans[i] += prob * block

    support = trans > 1e-15
    n_comp, labels = connected_components(csr_matrix(support), directed=True,
                                          connection="strong")
    is_recurrent_comp = np.ones(n_comp, dtype=bool)
    for i in range(n_joint):
        for j in np.flatnonzero(support[i]):
            if labels[j] != labels[i]:
                is_recurrent_comp[labels[i]] = False
                break

    if isinstance(config.initial_states, str):
        if config.initial_states == "uniform-random":
            nu = np.full(n_joint, 1.0 / n_joint)
        else:
            k = int(config.initial_states.removeprefix("all-state-"))
            nu = np.zeros(n_joint)
            nu[index[tuple([k] * n)]] = 1.0
    else:
        nu = np.zeros(n_joint)
        nu[index[tuple(int(s) for s in config.initial_states)]] = 1.0

    transient = ~is_recurrent_comp[labels]
    t_idx = np.flatnonzero(transient)
    value = 0.0
    for comp in np.flatnonzero(is_recurrent_comp):
        members = np.flatnonzero(labels == comp)
        sub = trans[np.ix_(members, members)]
        mu = stationary_distribution(sub, tol=1e-9)
        g = float(mu @ rew[members])
        absorb_mass = float(nu[members].sum())
        if t_idx.size:
            q = trans[np.ix_(t_idx, t_idx)]
            r_to_comp = trans[np.ix_(t_idx, members)].sum(axis=1)
            b = np.linalg.solve(np.eye(t_idx.size) - q, r_to_comp)
            absorb_mass += float(nu[t_idx] @ b)
        value += absorb_mass * g
    return value
