# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-step kernels plus fused whole-horizon runners for the
policies without per-step optimization (id, lp-priority, random, ftva).

Random draws match the pure backend exactly: the fused runners pull doubles
from the generator in the same blocks (ideal actions, tie-breaks, virtual
transitions, real transitions; each N doubles in arm order) that the
pure-python driver consumes via ``rng.random(N)``.
"""

import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport sqrt
from numpy.random cimport bitgen_t

cnp.import_array()


def ideal_actions(const double[::1] p1_by_state, const cnp.int64_t[::1] states,
                  const double[::1] u):
    cdef Py_ssize_t n = states.shape[0]
    out = np.empty(n, dtype=np.int8)
    cdef signed char[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = 1 if u[i] < p1_by_state[states[i]] else 0
    return out


cdef inline Py_ssize_t _draw_state(const double[:, :, ::1] cdf, Py_ssize_t a,
                                   Py_ssize_t s, double u) noexcept:
    cdef Py_ssize_t lo = 0
    cdef Py_ssize_t hi = cdf.shape[2]
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[a, s, mid] <= u:
            lo = mid + 1
        else:
            hi = mid
    if lo >= cdf.shape[2]:
        lo = cdf.shape[2] - 1
    return lo


def transitions(const double[:, :, ::1] cdf, const cnp.int64_t[::1] states,
                const signed char[::1] actions, const double[::1] u):
    cdef Py_ssize_t n = states.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = _draw_state(cdf, actions[i], states[i], u[i])
    return out


def id_rectify(const signed char[::1] ahat, Py_ssize_t budget):
    cdef Py_ssize_t n = ahat.shape[0]
    out = np.empty(n, dtype=np.int8)
    cdef signed char[::1] o = out
    cdef Py_ssize_t i, n_pibs
    cdef long total = 0
    for i in range(n):
        total += ahat[i]
    n_pibs = _id_fill(ahat, budget, total, o)
    return out, n_pibs


cdef Py_ssize_t _id_fill(const signed char[::1] ahat, Py_ssize_t budget, long total,
                         signed char[::1] o) noexcept:
    cdef Py_ssize_t n = ahat.shape[0]
    cdef Py_ssize_t i, n_pibs = 0
    cdef long used = 0
    if total >= budget:
        for i in range(n):
            if used + ahat[i] > budget:
                break
            used += ahat[i]
            n_pibs = i + 1
        for i in range(n):
            o[i] = ahat[i] if i < n_pibs else 0
    else:
        for i in range(n):
            if used + (1 - ahat[i]) > n - budget:
                break
            used += 1 - ahat[i]
            n_pibs = i + 1
        for i in range(n):
            o[i] = ahat[i] if i < n_pibs else 1
    return n_pibs


def priority_actions(const cnp.int64_t[::1] rank_of_state, const cnp.int64_t[::1] states,
                     Py_ssize_t budget):
    cdef Py_ssize_t n = states.shape[0]
    out = np.zeros(n, dtype=np.int8)
    cdef signed char[::1] o = out
    _priority_fill(rank_of_state, states, budget, o)
    return out


cdef void _priority_fill(const cnp.int64_t[::1] rank_of_state,
                         const cnp.int64_t[::1] states, Py_ssize_t budget,
                         signed char[::1] o) noexcept:
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t n_ranks = rank_of_state.shape[0]
    cdef cnp.int64_t[::1] cnt = np.zeros(n_ranks, dtype=np.int64)
    cdef Py_ssize_t i, r
    cdef long cum = 0, leftover = 0
    cdef Py_ssize_t r_star = n_ranks
    for i in range(n):
        cnt[rank_of_state[states[i]]] += 1
    for r in range(n_ranks):
        if cum + cnt[r] >= budget:
            r_star = r
            leftover = budget - cum
            break
        cum += cnt[r]
    for i in range(n):
        o[i] = 0
        r = rank_of_state[states[i]]
        if r < r_star:
            o[i] = 1
        elif r == r_star and leftover > 0:
            o[i] = 1
            leftover -= 1


def mean_reward(const double[::1] r0, const double[::1] r1, const cnp.int64_t[::1] states,
                const signed char[::1] actions):
    cdef Py_ssize_t n = states.shape[0]
    cdef double total = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        total += r1[states[i]] if actions[i] else r0[states[i]]
    return total / n


def prefix_wnorms(const cnp.int64_t[::1] states, const double[::1] mu, const double[:, ::1] chol):
    """Incremental O(N*S) evaluation of the prefix distances: maintains the
    deviation vector v, W v, and the quadratic form v W v^T."""
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t ns = mu.shape[0]
    w_np = np.asarray(chol) @ np.asarray(chol).T
    wmu_np = w_np @ np.asarray(mu)
    cdef double[:, ::1] w = w_np
    cdef double[::1] wmu = wmu_np
    cdef double muwmu = float(np.asarray(mu) @ wmu_np)
    out = np.zeros(n + 1)
    cdef double[::1] o = out
    cdef double[::1] wv = np.zeros(ns)
    cdef double q = 0.0, dwv, dwd
    cdef double inv_n = 1.0 / n
    cdef Py_ssize_t i, s, j
    cdef double mu_dot_wv
    for i in range(n):
        s = states[i]
        mu_dot_wv = 0.0
        for j in range(ns):
            mu_dot_wv += mu[j] * wv[j]
        dwv = (wv[s] - mu_dot_wv) * inv_n
        dwd = (w[s, s] - 2.0 * wmu[s] + muwmu) * inv_n * inv_n
        q += 2.0 * dwv + dwd
        for j in range(ns):
            wv[j] += (w[j, s] - wmu[j]) * inv_n
        o[i + 1] = sqrt(q) if q > 0.0 else 0.0
    return out


# ---------------------------------------------------------------------------
# Fused whole-horizon runners
# ---------------------------------------------------------------------------

cdef inline void _fill_doubles(bitgen_t *gen, double[::1] buf,
                               Py_ssize_t n) noexcept:
    cdef Py_ssize_t i
    for i in range(n):
        buf[i] = gen.next_double(gen.state)


cdef double _kth_smallest(double[::1] scratch, Py_ssize_t n,
                          Py_ssize_t k) noexcept:
    """k-th smallest (1-based) of scratch[:n]; scratch is permuted."""
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, tmp
    cdef Py_ssize_t target = k - 1
    while lo < hi:
        pivot = scratch[(lo + hi) >> 1]
        i = lo
        j = hi
        while i <= j:
            while scratch[i] < pivot:
                i += 1
            while scratch[j] > pivot:
                j -= 1
            if i <= j:
                tmp = scratch[i]
                scratch[i] = scratch[j]
                scratch[j] = tmp
                i += 1
                j -= 1
        if target <= j:
            hi = j
        elif target >= i:
            lo = i
        else:
            return scratch[target]
    return scratch[target]


cdef void _select_k_smallest(const double[::1] u, signed char[::1] member,
                             signed char flag_from, signed char flag_to,
                             Py_ssize_t k, double[::1] scratch) noexcept:
    """Among arms with member[i] == flag_from, set the k with the smallest
    uniforms to flag_to (ties resolved by arm index)."""
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t i, m = 0
    cdef double thresh
    cdef Py_ssize_t remaining
    if k <= 0:
        return
    for i in range(n):
        if member[i] == flag_from:
            scratch[m] = u[i]
            m += 1
    if k >= m:
        for i in range(n):
            if member[i] == flag_from:
                member[i] = flag_to
        return
    thresh = _kth_smallest(scratch, m, k)
    remaining = k
    for i in range(n):
        if member[i] == flag_from and u[i] < thresh:
            member[i] = flag_to
            remaining -= 1
    for i in range(n):
        if remaining == 0:
            break
        if member[i] == flag_from and u[i] == thresh:
            member[i] = flag_to
            remaining -= 1


def run_simple_policy(int kind, cnp.int64_t[::1] states,
                      const double[:, :, ::1] cdf, const double[::1] c_pibs, rank,
                      Py_ssize_t budget, Py_ssize_t horizon,
                      const double[::1] r0, const double[::1] r1, bit_generator):
    """Run one replication of a per-step-closed-form policy.

    kind: 0 = id, 1 = lp-priority, 2 = random, 3 = ftva.  ``states`` is
    advanced in place; returns the (horizon,) per-step mean reward trace.
    """
    cdef Py_ssize_t n = states.shape[0]
    reward_np = np.empty(horizon)
    cdef double[::1] reward = reward_np
    cdef double[::1] u1 = np.empty(n)
    cdef double[::1] u2 = np.empty(n)
    cdef double[::1] u3 = np.empty(n)
    cdef double[::1] scratch = np.empty(n)
    cdef signed char[::1] ahat = np.empty(n, dtype=np.int8)
    cdef signed char[::1] actions = np.empty(n, dtype=np.int8)
    cdef cnp.int64_t[::1] nxt = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] virt = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] nxt_virt = np.empty(n, dtype=np.int64)
    cdef const cnp.int64_t[::1] rank_view
    cdef bitgen_t *gen = <bitgen_t *> PyCapsule_GetPointer(
        bit_generator.capsule, "BitGenerator")
    cdef Py_ssize_t t, i
    cdef long total
    cdef double acc

    if kind == 1:
        rank_view = rank
    if kind == 3:
        for i in range(n):
            virt[i] = states[i]

    with bit_generator.lock:
        for t in range(horizon):
            if kind == 0:  # id
                _fill_doubles(gen, u1, n)
                total = 0
                for i in range(n):
                    ahat[i] = 1 if u1[i] < c_pibs[states[i]] else 0
                    total += ahat[i]
                _id_fill(ahat, budget, total, actions)
            elif kind == 1:  # lp-priority
                _priority_fill(rank_view, states, budget, actions)
            elif kind == 2:  # random
                _fill_doubles(gen, u1, n)
                for i in range(n):
                    actions[i] = 0
                _select_k_smallest(u1, actions, 0, 1, budget, scratch)
            else:  # ftva
                _fill_doubles(gen, u1, n)
                total = 0
                for i in range(n):
                    ahat[i] = 1 if u1[i] < c_pibs[virt[i]] else 0
                    total += ahat[i]
                _fill_doubles(gen, u2, n)
                for i in range(n):
                    actions[i] = ahat[i]
                if total > budget:
                    _select_k_smallest(u2, actions, 1, 0, total - budget,
                                       scratch)
                elif total < budget:
                    _select_k_smallest(u2, actions, 0, 1, budget - total,
                                       scratch)
                _fill_doubles(gen, u3, n)
                for i in range(n):
                    nxt_virt[i] = _draw_state(cdf, ahat[i], virt[i], u3[i])

            acc = 0.0
            for i in range(n):
                acc += r1[states[i]] if actions[i] else r0[states[i]]
            reward[t] = acc / n

            _fill_doubles(gen, u1, n)
            for i in range(n):
                nxt[i] = _draw_state(cdf, actions[i], states[i], u1[i])
            if kind == 3:
                for i in range(n):
                    if states[i] == virt[i] and actions[i] == ahat[i]:
                        nxt[i] = nxt_virt[i]
                    virt[i] = nxt_virt[i]
            for i in range(n):
                states[i] = nxt[i]
    return reward_np


# ---------------------------------------------------------------------------
# Set-optimization inner solver
# ---------------------------------------------------------------------------

DEF MAX_S = 16

cdef void _clip_box(double *z, const double *lo, const double *hi,
                    Py_ssize_t s) noexcept:
    cdef Py_ssize_t i
    for i in range(s):
        if z[i] < lo[i]:
            z[i] = lo[i]
        elif z[i] > hi[i]:
            z[i] = hi[i]


cdef void _proj_box_slice_c(const double *v, const double *lo,
                            const double *hi, double m, Py_ssize_t s,
                            double *out) noexcept:
    """Euclidean projection onto {lo <= z <= hi, sum z = m}."""
    cdef double bps[2 * MAX_S]
    cdef Py_ssize_t nbp = 2 * s
    cdef Py_ssize_t i, j
    cdef double key, t, total, x, phi_prev, phi_cur
    for i in range(s):
        bps[i] = v[i] - hi[i]
        bps[s + i] = v[i] - lo[i]
    for i in range(1, nbp):
        key = bps[i]
        j = i - 1
        while j >= 0 and bps[j] > key:
            bps[j + 1] = bps[j]
            j -= 1
        bps[j + 1] = key

    # phi(t) = sum clip(v - t) is non-increasing; walk to the segment
    # containing m and interpolate.
    t = bps[0]
    phi_prev = 0.0
    for j in range(s):
        x = v[j] - t
        if x < lo[j]:
            x = lo[j]
        elif x > hi[j]:
            x = hi[j]
        phi_prev += x
    if m < phi_prev:
        for i in range(1, nbp):
            phi_cur = 0.0
            for j in range(s):
                x = v[j] - bps[i]
                if x < lo[j]:
                    x = lo[j]
                elif x > hi[j]:
                    x = hi[j]
                phi_cur += x
            if phi_cur <= m:
                if phi_prev - phi_cur > 1e-15:
                    t = bps[i - 1] + (bps[i] - bps[i - 1]) * (phi_prev - m) / (
                        phi_prev - phi_cur)
                else:
                    t = bps[i]
                break
            phi_prev = phi_cur
            t = bps[i]
        else:
            t = bps[nbp - 1]
    for j in range(s):
        x = v[j] - t
        if x < lo[j]:
            x = lo[j]
        elif x > hi[j]:
            x = hi[j]
        out[j] = x


cdef void _proj_l1_c(double *d, double radius, Py_ssize_t s) noexcept:
    """Project d onto the L1 ball (in place)."""
    cdef double a[MAX_S]
    cdef Py_ssize_t i, j, rho
    cdef double total = 0.0, key, csum, theta
    for i in range(s):
        a[i] = d[i] if d[i] >= 0 else -d[i]
        total += a[i]
    if total <= radius:
        return
    for i in range(1, s):
        key = a[i]
        j = i - 1
        while j >= 0 and a[j] < key:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = key
    csum = 0.0
    theta = 0.0
    rho = -1
    for i in range(s):
        csum += a[i]
        if a[i] - (csum - radius) / (i + 1) > 0:
            rho = i
            theta = (csum - radius) / (i + 1)
    for i in range(s):
        if d[i] > theta:
            d[i] -= theta
        elif d[i] < -theta:
            d[i] += theta
        else:
            d[i] = 0.0


cdef void _proj_feasible_c(double *z, const double *lo, const double *hi,
                           double m, const double *center, double radius,
                           Py_ssize_t s) noexcept:
    """Dykstra projection onto (box & slice) intersect L1 ball around
    center (in place)."""
    cdef double p[MAX_S]
    cdef double q[MAX_S]
    cdef double y[MAX_S]
    cdef double tmp[MAX_S]
    cdef double znew[MAX_S]
    cdef Py_ssize_t i, sweep
    cdef double diff, total
    for i in range(s):
        p[i] = 0.0
        q[i] = 0.0
    # quick exit: already feasible
    total = 0.0
    for i in range(s):
        diff = z[i] - center[i]
        total += diff if diff >= 0 else -diff
    if total <= radius + 1e-14:
        _proj_box_slice_c(z, lo, hi, m, s, znew)
        total = 0.0
        for i in range(s):
            diff = znew[i] - center[i]
            total += diff if diff >= 0 else -diff
        if total <= radius + 1e-14:
            for i in range(s):
                z[i] = znew[i]
            return
    for sweep in range(400):
        for i in range(s):
            tmp[i] = z[i] + p[i]
        _proj_box_slice_c(tmp, lo, hi, m, s, y)
        for i in range(s):
            p[i] = tmp[i] - y[i]
            tmp[i] = y[i] + q[i] - center[i]
        _proj_l1_c(tmp, radius, s)
        diff = 0.0
        for i in range(s):
            znew[i] = center[i] + tmp[i]
            q[i] = y[i] + q[i] - znew[i]
            if znew[i] > z[i]:
                diff += znew[i] - z[i]
            else:
                diff += z[i] - znew[i]
            z[i] = znew[i]
        if diff < 1e-14:
            break


cdef int _kkt_polish(double *z, const double *x_all, const double *center,
                     const double[:, ::1] w, double m, double radius,
                     Py_ssize_t s, bint use_ball, double tol_active) noexcept:
    """Solve the equality-constrained QP fixed by the current active set and
    verify all KKT conditions; returns 1 and overwrites z on success.
    ``use_ball`` controls whether the L1 constraint is treated as active
    (the two modes are tried in turn; with a degenerate active set the ball
    row can duplicate the slice row and must be dropped)."""
    cdef Py_ssize_t i, j, k, nf, ncon, dim, piv
    cdef int free_idx[MAX_S]
    cdef int sigma[MAX_S]
    cdef int at_zero[MAX_S]
    cdef double y[MAX_S]
    cdef double g[MAX_S]
    cdef double kkt[(MAX_S + 2) * (MAX_S + 2)]
    cdef double rhs[MAX_S + 2]
    cdef double znew[MAX_S]
    cdef double total, ball_gap, best, tmpv, nu, lam, resid
    cdef bint ball_active

    total = 0.0
    for i in range(s):
        y[i] = z[i] - center[i]
        total += y[i] if y[i] >= 0 else -y[i]
    ball_active = use_ball and total >= radius - 1e-9

    nf = 0
    for i in range(s):
        at_zero[i] = 0
        if z[i] <= tol_active or z[i] >= x_all[i] - tol_active:
            continue  # box-active: stays fixed
        if ball_active and (y[i] if y[i] >= 0 else -y[i]) <= tol_active:
            at_zero[i] = 1  # pinned at the kink
            continue
        sigma[nf] = 1 if y[i] > 0 else -1
        free_idx[nf] = i
        nf += 1

    ncon = 2 if ball_active else 1
    dim = nf + ncon
    if dim == 0:
        return 0

    # residual sums over fixed coordinates
    cdef double sum_fixed = 0.0, ball_fixed = 0.0
    for i in range(s):
        is_free = 0
        for j in range(nf):
            if free_idx[j] == i:
                is_free = 1
                break
        if not is_free:
            if z[i] >= x_all[i] - tol_active:
                znew[i] = x_all[i]
            elif z[i] <= tol_active:
                znew[i] = 0.0
            else:
                znew[i] = center[i]  # kink-pinned
            sum_fixed += znew[i]
            tmpv = znew[i] - center[i]
            ball_fixed += tmpv if tmpv >= 0 else -tmpv

    # KKT system over (y_free, nu, lambda?):
    #   2 W_ff y_f + 2 W_fa y_a + nu + lam*sigma = 0
    #   sum y_f = m - sum_fixed - sum(center_free)
    #   sigma . y_f = radius - ball_fixed  (when the ball binds)
    for i in range(dim * dim):
        kkt[i] = 0.0
    for i in range(nf):
        for j in range(nf):
            kkt[i * dim + j] = 2.0 * w[free_idx[i], free_idx[j]]
        kkt[i * dim + nf] = 1.0
        if ball_active:
            kkt[i * dim + nf + 1] = sigma[i]
        rhs[i] = 0.0
        for k in range(s):
            is_free = 0
            for j in range(nf):
                if free_idx[j] == k:
                    is_free = 1
                    break
            if not is_free:
                rhs[i] -= 2.0 * w[free_idx[i], k] * (znew[k] - center[k])
    total = m - sum_fixed
    for i in range(nf):
        total -= center[free_idx[i]]
        kkt[nf * dim + i] = 1.0
    rhs[nf] = total
    if ball_active:
        for i in range(nf):
            kkt[(nf + 1) * dim + i] = sigma[i]
        rhs[nf + 1] = radius - ball_fixed

    # dense Gaussian elimination with partial pivoting
    for k in range(dim):
        piv = k
        best = kkt[k * dim + k]
        if best < 0:
            best = -best
        for i in range(k + 1, dim):
            tmpv = kkt[i * dim + k]
            if tmpv < 0:
                tmpv = -tmpv
            if tmpv > best:
                best = tmpv
                piv = i
        if best < 1e-13:
            return 0
        if piv != k:
            for j in range(dim):
                tmpv = kkt[k * dim + j]
                kkt[k * dim + j] = kkt[piv * dim + j]
                kkt[piv * dim + j] = tmpv
            tmpv = rhs[k]
            rhs[k] = rhs[piv]
            rhs[piv] = tmpv
        for i in range(k + 1, dim):
            tmpv = kkt[i * dim + k] / kkt[k * dim + k]
            for j in range(k, dim):
                kkt[i * dim + j] -= tmpv * kkt[k * dim + j]
            rhs[i] -= tmpv * rhs[k]
    for k in range(dim - 1, -1, -1):
        tmpv = rhs[k]
        for j in range(k + 1, dim):
            tmpv -= kkt[k * dim + j] * rhs[j]
        rhs[k] = tmpv / kkt[k * dim + k]

    nu = rhs[nf]
    lam = rhs[nf + 1] if ball_active else 0.0
    if ball_active and lam < -1e-10:
        return 0

    for i in range(nf):
        k = free_idx[i]
        znew[k] = center[k] + rhs[i]
        # sign pattern (only meaningful with an active ball) and box
        # membership must persist
        if ball_active and sigma[i] == 1 and rhs[i] < -1e-12:
            return 0
        if ball_active and sigma[i] == -1 and rhs[i] > 1e-12:
            return 0
        if znew[k] < -1e-12 or znew[k] > x_all[k] + 1e-12:
            return 0

    # ball feasibility and dual feasibility of the fixed coordinates
    total = 0.0
    for i in range(s):
        tmpv = znew[i] - center[i]
        total += tmpv if tmpv >= 0 else -tmpv
    if not ball_active and total > radius + 1e-12:
        return 0
    if ball_active and total > radius + 1e-9:
        return 0
    for i in range(s):
        g[i] = 0.0
        for j in range(s):
            g[i] += 2.0 * w[i, j] * (znew[j] - center[j])
    for i in range(s):
        if x_all[i] <= 1e-12:
            continue  # empty state: both box bounds coincide, duals free
        if at_zero[i]:
            tmpv = g[i] + nu
            if tmpv < 0:
                tmpv = -tmpv
            if tmpv > lam + 1e-9:
                return 0
        elif znew[i] <= 1e-12 and z[i] <= tol_active:
            # lower-box active: the multiplier must push downward, i.e. the
            # stationarity residual cannot be negative (with the kink the
            # residual may take any subgradient sign, so test the best case)
            if ball_active and znew[i] - center[i] >= -1e-12 and \
                    znew[i] - center[i] <= 1e-12:
                if g[i] + nu + lam < -1e-9:
                    return 0
            else:
                tmpv = 1.0 if znew[i] - center[i] >= 0 else -1.0
                if g[i] + nu + lam * tmpv < -1e-9:
                    return 0
        elif znew[i] >= x_all[i] - 1e-12 and z[i] >= x_all[i] - tol_active:
            tmpv = 1.0 if znew[i] - center[i] >= 0 else -1.0
            if g[i] + nu + lam * tmpv > 1e-9:
                return 0
    for i in range(s):
        z[i] = znew[i]
    return 1


def so_inner_solve(double m, const double[::1] x_all, const double[::1] mu,
                   double beta, const double[:, ::1] w, double lambda_w,
                   double[::1] z_warm, double stat_tol=1e-9,
                   int max_iter=10_000):
    """min || z - m*mu ||_W over the slack-feasible polytope at fraction m.

    Projected gradient with backtracking, warm-started from ``z_warm``
    (overwritten with the solution), with an exact finite polish: once the
    active set settles, the reduced KKT system is solved directly and all
    optimality conditions verified.  Returns h = the minimal norm.
    """
    cdef Py_ssize_t s = x_all.shape[0]
    cdef double z[MAX_S]
    cdef double zl[MAX_S]
    cdef double lo[MAX_S]
    cdef double center[MAX_S]
    cdef double grad[MAX_S]
    cdef double trial[MAX_S]
    cdef double radius = 2.0 * beta * (1.0 - m)
    cdef double eta = 1.0 / (2.0 * lambda_w)
    cdef double obj, trial_obj, step, move, diff
    cdef Py_ssize_t i, j, it, bt
    cdef const double *xp = &x_all[0]

    for i in range(s):
        lo[i] = 0.0
        center[i] = m * mu[i]
        z[i] = z_warm[i]
    _proj_feasible_c(z, lo, xp, m, center, radius, s)

    obj = 0.0
    for i in range(s):
        for j in range(s):
            obj += (z[i] - center[i]) * w[i, j] * (z[j] - center[j])

    for it in range(max_iter):
        if it % 25 == 24 or it == 2:
            done = 0
            for tol_i in range(3):
                tol_a = 1e-10 if tol_i == 0 else (1e-6 if tol_i == 1 else 1e-4)
                if _kkt_polish(z, xp, center, w, m, radius, s, 1, tol_a):
                    done = 1
                    break
                if _kkt_polish(z, xp, center, w, m, radius, s, 0, tol_a):
                    done = 1
                    break
            if done:
                break
        for i in range(s):
            grad[i] = 0.0
            for j in range(s):
                grad[i] += 2.0 * w[i, j] * (z[j] - center[j])
        step = eta
        for bt in range(40):
            for i in range(s):
                trial[i] = z[i] - step * grad[i]
            _proj_feasible_c(trial, lo, xp, m, center, radius, s)
            trial_obj = 0.0
            for i in range(s):
                for j in range(s):
                    trial_obj += (trial[i] - center[i]) * w[i, j] * (
                        trial[j] - center[j])
            if trial_obj <= obj + 1e-15:
                break
            step *= 0.5
        move = 0.0
        for i in range(s):
            diff = trial[i] - z[i]
            if diff < 0:
                diff = -diff
            if diff > move:
                move = diff
            z[i] = trial[i]
        obj = trial_obj
        if move / step <= stat_tol:
            break

    obj = 0.0
    for i in range(s):
        z_warm[i] = z[i]
        for j in range(s):
            obj += (z[i] - center[i]) * w[i, j] * (z[j] - center[j])
    return sqrt(obj) if obj > 0.0 else 0.0


def max_feasible_m_c(const double[::1] lo, const double[::1] hi,
                     const double[::1] mu, double beta):
    """Largest m in [sum lo, sum hi] with min-L1 distance g(m) within the
    slack budget 2*beta*(1-m); exact breakpoint scan of the concave margin.
    Returns (m_star, z_star)."""
    cdef Py_ssize_t s = mu.shape[0]
    cdef double pts[4 * MAX_S + 8]
    cdef double res[4 * MAX_S + 8]
    cdef double fvals[4 * MAX_S + 8]
    cdef Py_ssize_t npts = 0, i, j, k
    cdef double m_lo = 0.0, m_hi = 0.0, b, key, m_star

    for i in range(s):
        m_lo += lo[i]
        m_hi += hi[i]
    pts[npts] = m_lo; npts += 1
    pts[npts] = m_hi; npts += 1
    for i in range(s):
        if mu[i] > 1e-12:
            b = lo[i] / mu[i]
            if m_lo < b < m_hi:
                pts[npts] = b; npts += 1
            b = hi[i] / mu[i]
            if m_lo < b < m_hi:
                pts[npts] = b; npts += 1
    for i in range(1, npts):
        key = pts[i]
        j = i - 1
        while j >= 0 and pts[j] > key:
            pts[j + 1] = pts[j]
            j -= 1
        pts[j + 1] = key

    cdef double tau, zc, total
    for i in range(npts):
        total = 0.0
        for j in range(s):
            tau = pts[i] * mu[j]
            zc = tau
            if zc < lo[j]:
                zc = lo[j]
            elif zc > hi[j]:
                zc = hi[j]
            total += zc
        res[i] = pts[i] - total

    # insert sign-change roots of the mass residual
    cdef double roots[4 * MAX_S + 8]
    cdef Py_ssize_t nroots = 0
    for i in range(npts - 1):
        if res[i] * res[i + 1] < 0:
            roots[nroots] = pts[i] + (pts[i + 1] - pts[i]) * (-res[i]) / (
                res[i + 1] - res[i])
            nroots += 1
    for k in range(nroots):
        key = roots[k]
        i = npts
        j = npts - 1
        while j >= 0 and pts[j] > key:
            pts[j + 1] = pts[j]
            j -= 1
        pts[j + 1] = key
        npts += 1

    cdef double g, dev
    for i in range(npts):
        g = 0.0
        total = 0.0
        for j in range(s):
            tau = pts[i] * mu[j]
            zc = tau
            if zc < lo[j]:
                zc = lo[j]
            elif zc > hi[j]:
                zc = hi[j]
            dev = zc - tau
            g += dev if dev >= 0 else -dev
            total += zc
        dev = pts[i] - total
        g += dev if dev >= 0 else -dev
        fvals[i] = 2.0 * beta * (1.0 - pts[i]) - g

    cdef Py_ssize_t last = -1
    for i in range(npts):
        if fvals[i] >= -1e-15:
            last = i
    if last < 0:
        m_star = m_lo
    elif last == npts - 1:
        m_star = pts[npts - 1]
    elif fvals[last] <= 0:
        m_star = pts[last]
    else:
        m_star = pts[last] + (pts[last + 1] - pts[last]) * fvals[last] / (
            fvals[last] - fvals[last + 1])

    z = np.empty(s)
    cdef double[::1] zv = z
    cdef double delta = m_star, room, take
    for j in range(s):
        tau = m_star * mu[j]
        zc = tau
        if zc < lo[j]:
            zc = lo[j]
        elif zc > hi[j]:
            zc = hi[j]
        zv[j] = zc
        delta -= zc
    if delta > 1e-12:
        for j in range(s):
            room = hi[j] - zv[j]
            take = room if room < delta else delta
            zv[j] += take
            delta -= take
            if delta <= 1e-12:
                break
    elif delta < -1e-12:
        delta = -delta
        for j in range(s):
            room = zv[j] - lo[j]
            take = room if room < delta else delta
            zv[j] -= take
            delta -= take
            if delta <= 1e-12:
                break
    return m_star, z
