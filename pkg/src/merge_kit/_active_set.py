"""Goldfarb-Idnani dual active-set kernels.

``dual_solve`` works in constraint space; ``gi_solve`` is the classic primal
form and serves as the accurate fallback.

Problem form (rows of ``C`` are constraint normals)::

    minimize    1/2 x' G x + a' x
    subject to  C[j] . x  = b[j]     j <  meq
                C[j] . x >= b[j]     j >= meq

With ``x0 = -G^-1 a``, ``K = C G^-1 C'`` and ``s0 = C x0 - b`` every iterate
is ``x = x0 + G^-1 C' lam`` with residuals ``s = s0 + K lam``, so the kernel
only ever touches ``K``.  Callers that solve many problems with the same
Hessian and rows (the planner) compute ``K`` once.  The Cholesky factor of
``K`` restricted to the active set is updated by appending rows and by Givens
downdates.

An optional initial active set is honoured by factoring it in bulk and
discarding members until the multipliers are non-negative; the result is a
valid dual-feasible start, so the final answer does not depend on the guess.
"""

import numpy as np
from numba import njit

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2

# Schur complement below this fraction of K[p, p]: row p is linearly dependent
DEPENDENCE_TOL = 1e-11
# exact residual refreshes before giving up on drift-induced violations
MAX_REFRESH = 4


@njit(cache=True)
def _forward(L, q, rhs, out):
    for i in range(q):
        acc = rhs[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]


@njit(cache=True)
def _backward(L, q, rhs, out):
    for i in range(q - 1, -1, -1):
        acc = rhs[i]
        for k in range(i + 1, q):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]


@njit(cache=True)
def _drop(L, active, lam, q, k):
    """Remove position ``k`` from the factor; returns the new size."""
    for i in range(k, q - 1):
        for j in range(q):
            L[i, j] = L[i + 1, j]
        active[i] = active[i + 1]
        lam[i] = lam[i + 1]
    q1 = q - 1
    for i in range(k, q1):
        a_ = L[i, i]
        b_ = L[i, i + 1]
        h = np.hypot(a_, b_)
        if h == 0.0:
            continue
        c = a_ / h
        s = b_ / h
        for r in range(i, q1):
            ta = L[r, i]
            tb = L[r, i + 1]
            L[r, i] = c * ta + s * tb
            L[r, i + 1] = -s * ta + c * tb
    for j in range(q):
        L[q1, j] = 0.0
        L[j, q1] = 0.0
    active[q1] = -1
    lam[q1] = 0.0
    return q1


@njit(cache=True)
def _refresh(K, s0, sign, active, lam, q, s):
    """Recompute residuals from the multipliers."""
    m = s0.shape[0]
    for j in range(m):
        s[j] = s0[j]
    for i in range(q):
        p = active[i]
        coef = lam[i] * sign[p]
        for j in range(m):
            s[j] += coef * K[p, j]
    for j in range(m):
        s[j] *= sign[j]


@njit(cache=True)
def _refine(K, s0, sign, active, lam, q, meq, L, s, work, out):
    """Iterative refinement of the active multipliers against exact residuals.

    Incremental updates let the active residuals drift when multipliers are
    large (slack rows carry about ``SLACK_PENALTY``); two correction solves
    with the maintained factor bring them back to roundoff.
    """
    for _ in range(2):
        _refresh(K, s0, sign, active, lam, q, s)
        for i in range(q):
            work[i] = -s[active[i]]
        _forward(L, q, work, out)
        _backward(L, q, out, work)
        for i in range(q):
            lam[i] += work[i]
            if active[i] >= meq and lam[i] < 0.0:
                lam[i] = 0.0
    _refresh(K, s0, sign, active, lam, q, s)


@njit(cache=True)
def dual_solve(K, s0, row_norm, thresh, meq, warm, cap, max_iter):
    """Returns ``(lam, active, status, iterations)``; ``lam`` has one entry per row.

    ``thresh[j]`` is the residual below which row ``j`` counts as violated
    (negative values); ``cap`` bounds the active-set size (primal dimension).
    """
    m = s0.shape[0]
    cap = max(cap, 1)
    L = np.zeros((cap, cap))
    active = np.full(cap, -1, dtype=np.int64)
    lam = np.zeros(cap)
    in_active = np.zeros(m, dtype=np.bool_)
    sign = np.ones(m)
    s = s0.copy()
    kp = np.empty(cap)
    ell = np.empty(cap)
    r = np.empty(cap)
    w = np.empty(m)
    q = 0
    it = 0
    status = OPTIMAL

    # initial guess: bulk factor, then shed members with negative multipliers
    for idx in range(warm.shape[0]):
        p = warm[idx]
        if p < meq or p >= m or in_active[p] or q >= cap:
            continue
        for i in range(q):
            kp[i] = K[p, active[i]]
        _forward(L, q, kp, ell)
        delta = K[p, p]
        for i in range(q):
            delta -= ell[i] * ell[i]
        if delta <= DEPENDENCE_TOL * max(K[p, p], 1e-300):
            continue
        for i in range(q):
            L[q, i] = ell[i]
        L[q, q] = np.sqrt(delta)
        active[q] = p
        in_active[p] = True
        q += 1
    while q > 0:
        for i in range(q):
            kp[i] = -s0[active[i]]
        _forward(L, q, kp, ell)
        _backward(L, q, ell, r)
        worst = 0.0
        kdrop = -1
        for i in range(q):
            if r[i] < worst:
                worst = r[i]
                kdrop = i
        if kdrop < 0:
            for i in range(q):
                lam[i] = r[i]
            break
        in_active[active[kdrop]] = False
        q = _drop(L, active, lam, q, kdrop)
    if q > 0:
        _refresh(K, s0, sign, active, lam, q, s)

    next_eq = 0
    refreshes = 0
    while True:
        # pick the row to add: equalities in order, then the most violated
        p = -1
        if next_eq < meq:
            p = next_eq
            next_eq += 1
            if s[p] > 0.0:
                sign[p] = -1.0
                s[p] = -s[p]
        else:
            best = 0.0
            for j in range(meq, m):
                if in_active[j] or s[j] >= -thresh[j]:
                    continue
                score = -s[j] / row_norm[j]
                if score > best:
                    best = score
                    p = j
            if p < 0:
                if refreshes >= MAX_REFRESH:
                    break
                refreshes += 1
                _refine(K, s0, sign, active, lam, q, meq, L, s, kp, ell)
                again = False
                for j in range(meq, m):
                    if not in_active[j] and s[j] < -thresh[j]:
                        again = True
                        break
                if not again:
                    break
                continue
        sp = sign[p]
        lam_p = 0.0

        while True:
            it += 1
            if it > max_iter:
                status = MAX_ITER
                break
            for i in range(q):
                a_i = active[i]
                kp[i] = sp * sign[a_i] * K[p, a_i]
            _forward(L, q, kp, ell)
            _backward(L, q, ell, r)
            delta = K[p, p]
            for i in range(q):
                delta -= ell[i] * ell[i]

            t1 = np.inf
            kdrop = -1
            for i in range(q):
                if active[i] >= meq and r[i] > 0.0:
                    ratio = lam[i] / r[i]
                    if ratio < t1:
                        t1 = ratio
                        kdrop = i
            t2 = np.inf
            if delta > DEPENDENCE_TOL * max(K[p, p], 1e-300):
                t2 = max(-s[p], 0.0) / delta
            t = min(t1, t2)
            if t == np.inf:
                if p < meq and abs(s[p]) <= thresh[p]:
                    in_active[p] = True  # satisfied, linearly dependent equality
                    break
                status = INFEASIBLE
                break

            if t > 0.0:
                for j in range(m):
                    w[j] = sp * K[p, j]
                for i in range(q):
                    coef = -sign[active[i]] * r[i]
                    if coef != 0.0:
                        row = active[i]
                        for j in range(m):
                            w[j] += coef * K[row, j]
                for j in range(m):
                    s[j] += t * sign[j] * w[j]
                for i in range(q):
                    lam[i] -= t * r[i]
                lam_p += t

            if t2 <= t1:
                if q >= cap:
                    status = INFEASIBLE
                    break
                for i in range(q):
                    L[q, i] = ell[i]
                L[q, q] = np.sqrt(delta)
                active[q] = p
                lam[q] = lam_p
                in_active[p] = True
                s[p] = 0.0
                q += 1
                break
            lam[kdrop] = 0.0
            in_active[active[kdrop]] = False
            q = _drop(L, active, lam, q, kdrop)
        if status != OPTIMAL:
            break

    out = np.zeros(m)
    for i in range(q):
        out[active[i]] = lam[i] * sign[active[i]]
    return out, active[:q].copy(), status, it


@njit(cache=True)
def _givens(a, b):
    h = np.hypot(a, b)
    if h == 0.0:
        return 1.0, 0.0, 0.0
    return a / h, b / h, h


@njit(cache=True)
def gi_solve(J0, a, C, b, meq, max_iter, feas_tol):
    """Primal-space variant: maintains ``J = L^-T Q`` and ``R`` by Givens rotations.

    Slower than ``dual_solve`` but its accuracy depends on the condition of
    ``G`` rather than of ``C G^-1 C'``; used when the fast path cannot certify
    its answer.  Returns ``(x, lam, status, iterations, active)``.
    """
    n = a.shape[0]
    m = b.shape[0]
    J = J0.copy()
    R = np.zeros((n, n))
    x = -(J @ (J.T @ a))
    active = np.full(n, -1, dtype=np.int64)
    u = np.zeros(n)
    in_active = np.zeros(m, dtype=np.bool_)
    sign = np.ones(m)
    row_norm = np.empty(m)
    for j in range(m):
        row_norm[j] = max(np.sqrt(np.dot(C[j], C[j])), 1e-300)
    q = 0
    it = 0
    next_eq = 0
    status = OPTIMAL
    d = np.empty(n)
    z = np.empty(n)
    r = np.empty(n)

    while True:
        p = -1
        if next_eq < meq:
            p = next_eq
            next_eq += 1
            s = np.dot(C[p], x) - b[p]
            if s > 0.0:
                sign[p] = -1.0
        else:
            worst = 0.0
            for j in range(meq, m):
                if in_active[j]:
                    continue
                viol = b[j] - np.dot(C[j], x)
                if viol > feas_tol * max(1.0, abs(b[j])):
                    score = viol / row_norm[j]
                    if score > worst:
                        worst = score
                        p = j
            if p < 0:
                break
        npv = sign[p] * C[p]
        bp = sign[p] * b[p]
        u_new = 0.0

        added = False
        while not added:
            it += 1
            if it > max_iter:
                status = MAX_ITER
                break
            for i in range(n):
                acc = 0.0
                for k in range(n):
                    acc += J[k, i] * npv[k]
                d[i] = acc
            for i in range(n):
                acc = 0.0
                for k in range(q, n):
                    acc += J[i, k] * d[k]
                z[i] = acc
            for i in range(q - 1, -1, -1):
                acc = d[i]
                for k in range(i + 1, q):
                    acc -= R[i, k] * r[k]
                r[i] = acc / R[i, i]

            t1 = np.inf
            kdrop = -1
            for j in range(q):
                if active[j] >= meq and r[j] > 0.0:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        kdrop = j
            zn = np.dot(z, npv)
            scale = 1e-14 * max(1.0, np.dot(npv, npv))
            t2 = np.inf
            if zn > scale:
                t2 = (bp - np.dot(npv, x)) / zn
                if t2 < 0.0:
                    t2 = 0.0
            t = min(t1, t2)
            if t == np.inf:
                if p < meq and abs(bp - np.dot(npv, x)) <= feas_tol * max(1.0, abs(bp)):
                    added = True
                    in_active[p] = True
                    break
                status = INFEASIBLE
                break

            if t2 == np.inf:
                for j in range(q):
                    u[j] -= t * r[j]
                u_new += t
            else:
                for i in range(n):
                    x[i] += t * z[i]
                for j in range(q):
                    u[j] -= t * r[j]
                u_new += t
                if t2 <= t1:
                    for j in range(n - 1, q, -1):
                        c, s, h = _givens(d[j - 1], d[j])
                        if s == 0.0:
                            continue
                        d[j - 1] = h
                        d[j] = 0.0
                        for i in range(n):
                            t_a = J[i, j - 1]
                            t_b = J[i, j]
                            J[i, j - 1] = c * t_a + s * t_b
                            J[i, j] = -s * t_a + c * t_b
                    for i in range(q + 1):
                        R[i, q] = d[i]
                    active[q] = p
                    u[q] = u_new
                    in_active[p] = True
                    q += 1
                    added = True
                    break
            in_active[active[kdrop]] = False
            for col in range(kdrop, q - 1):
                for i in range(q):
                    R[i, col] = R[i, col + 1]
                active[col] = active[col + 1]
                u[col] = u[col + 1]
            for i in range(q):
                R[i, q - 1] = 0.0
            active[q - 1] = -1
            u[q - 1] = 0.0
            for j in range(kdrop, q - 1):
                c, s, h = _givens(R[j, j], R[j + 1, j])
                if s == 0.0:
                    continue
                for col in range(j, q - 1):
                    t_a = R[j, col]
                    t_b = R[j + 1, col]
                    R[j, col] = c * t_a + s * t_b
                    R[j + 1, col] = -s * t_a + c * t_b
                for i in range(n):
                    t_a = J[i, j]
                    t_b = J[i, j + 1]
                    J[i, j] = c * t_a + s * t_b
                    J[i, j + 1] = -s * t_a + c * t_b
            q -= 1
        if status != OPTIMAL:
            break

    lam = np.zeros(m)
    for j in range(q):
        lam[active[j]] = u[j] * sign[active[j]]
    return x, lam, status, it, active[:q].copy()
