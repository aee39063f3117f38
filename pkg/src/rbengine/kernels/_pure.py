"""Numpy implementations of the per-step kernels.

All randomness enters through explicit uniform arrays so that results are
reproducible and backend-independent.  Transition sampling uses row CDFs:
next state = first index whose cumulative probability exceeds the uniform.
"""

import numpy as np


def ideal_actions(p1_by_state, states, u):
    """Sample actions from the per-state activation probabilities."""
    return (u < p1_by_state[states]).view(np.int8)


def transitions(cdf, states, actions, u):
    """Sample next states; ``cdf`` has shape (2, S, S) of row-cumulative sums."""
    rows = cdf[actions, states]  # (N, S)
    nxt = (rows <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, cdf.shape[2] - 1)


def id_rectify(ahat, budget):
    """Follow ideal actions by arm order for as long as the budget permits;
    the tail is forced constant.  Returns (actions, count of prefix arms kept
    on their ideal action)."""
    n = ahat.shape[0]
    total = int(ahat.sum())
    csum = np.cumsum(ahat)
    if total >= budget:
        # largest prefix whose activation requirement stays within budget
        n_pibs = int(np.searchsorted(csum, budget, side="right"))
        actions = np.zeros(n, dtype=np.int8)
        actions[:n_pibs] = ahat[:n_pibs]
    else:
        zeros = np.arange(1, n + 1) - csum
        n_pibs = int(np.searchsorted(zeros, n - budget, side="right"))
        actions = np.ones(n, dtype=np.int8)
        actions[:n_pibs] = ahat[:n_pibs]
    return actions, n_pibs


def priority_actions(rank_of_state, states, budget):
    """Activate arms by ascending state rank (0 = highest priority), breaking
    ties within a rank by ascending arm index."""
    order = np.argsort(rank_of_state[states], kind="stable")
    actions = np.zeros(states.shape[0], dtype=np.int8)
    actions[order[:budget]] = 1
    return actions


def prefix_wnorms(states, mu, chol):
    """Weighted distance of every prefix's scaled counts from the scaled
    stationary distribution; entry n covers the first n arms."""
    n = states.shape[0]
    s = mu.shape[0]
    steps = np.zeros((n + 1, s))
    steps[1:] = np.eye(s)[states]
    cum = np.cumsum(steps, axis=0) / n
    v = cum - (np.arange(n + 1)[:, None] / n) * mu
    z = v @ chol
    return np.sqrt(np.einsum("ns,ns->n", z, z))


def mean_reward(r0, r1, states, actions):
    """Average per-arm reward r(s, a) of one step."""
    vals = np.where(actions == 1, r1[states], r0[states])
    return float(vals.mean())
