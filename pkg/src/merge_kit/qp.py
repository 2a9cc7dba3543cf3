"""Dense convex QP solver with slack-certified infeasibility.

Problems are stated as::

    minimize    1/2 x' H x + c' x
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                A_soft x <= b_soft     (safety rows, relaxed by slacks)
                lo <= x <= hi

Each soft block ``(A, b)`` shares one non-negative slack, so at the optimum
the slack equals the block's worst violation.  Slacks carry an exact (linear)
penalty of ``SLACK_PENALTY`` plus a unit quadratic term.  A problem whose hard
part is feasible but whose safety rows are not is reported as ``infeasible``
with the minimal violation in ``slack_norm``.

Problems sharing a Hessian and constraint matrices (only ``c`` and the
right-hand sides change) can share a ``QpWorkspace``; ``solve_qp`` also takes
the active set of an earlier solution as an initial guess.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._active_set import INFEASIBLE, MAX_ITER, OPTIMAL, dual_solve, gi_solve

SLACK_PENALTY = 1e7
SLACK_QUADRATIC = 1.0
FEASIBILITY_TOL = 1e-6
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 20000
# proximal shift relative to the Hessian scale for merely semidefinite input
PROX_SHIFT = 1e-4
# iteration cap of the fast path per kernel row before the primal fallback
FAST_PATH_ITER = 3


class QpError(ValueError):
    """Rejected QP input (shape mismatch, non-PSD Hessian, NaN data)."""


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


def _pairs(blocks, n):
    rows, rhs = [], []
    for mat, vec in blocks:
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        vec = np.atleast_1d(np.asarray(vec, dtype=float))
        if mat.shape[1] != n or mat.shape[0] != vec.shape[0]:
            raise QpError(f"constraint block shape {mat.shape} / {vec.shape} does not match n={n}")
        rows.append(mat)
        rhs.append(vec)
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(rows), np.concatenate(rhs)


@dataclass
class QpProblem:
    hessian: np.ndarray
    linear_term: np.ndarray
    eq_constraints: list = field(default_factory=list)
    ineq_constraints: list = field(default_factory=list)
    variable_bounds: tuple | None = None
    soft_constraints: list = field(default_factory=list)
    # precomputed data for this Hessian and these constraint matrices; when
    # supplied the symmetry and PSD checks are skipped
    workspace: "QpWorkspace | None" = None

    @property
    def n(self) -> int:
        return int(np.asarray(self.linear_term).shape[0])

    def stacked(self):
        """Return (A_eq, b_eq, A_in, b_in, A_soft, b_soft, lo, hi) as arrays."""
        n = self.n
        a_eq, b_eq = _pairs(self.eq_constraints, n)
        a_in, b_in = _pairs(self.ineq_constraints, n)
        a_soft, b_soft = _pairs(self.soft_constraints, n)
        if self.variable_bounds is None:
            lo = np.full(n, -np.inf)
            hi = np.full(n, np.inf)
        else:
            lo = np.broadcast_to(np.asarray(self.variable_bounds[0], dtype=float), (n,)).copy()
            hi = np.broadcast_to(np.asarray(self.variable_bounds[1], dtype=float), (n,)).copy()
        return a_eq, b_eq, a_in, b_in, a_soft, b_soft, lo, hi

    def soft_groups(self) -> np.ndarray:
        """Slack index of every soft row."""
        sizes = [np.atleast_1d(np.asarray(vec)).shape[0] for _, vec in self.soft_constraints]
        return np.repeat(np.arange(len(sizes)), sizes).astype(np.int64)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    kkt_residual: float
    slack_norm: float
    multipliers: dict = field(default_factory=dict)
    iterations: int = 0
    # kernel row indices (order: eq, ineq, soft, slack >= 0, lower, upper
    # bounds with finite values); pass back as ``initial_active``
    active_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    slack: np.ndarray = field(default_factory=lambda: np.zeros(0))  # one value per soft block

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass(frozen=True)
class QpWorkspace:
    """Hessian- and row-dependent data shared by problems that differ only in c and b."""

    n: int
    n_soft: int
    layout: tuple  # row counts: eq, ineq, soft, slack, lower, upper
    lo_mask: np.ndarray
    hi_mask: np.ndarray
    rows: np.ndarray  # kernel normals over [x, slack], ">=" form
    hessian: np.ndarray  # slack-augmented, including any proximal shift
    factor: np.ndarray  # inverse transposed Cholesky factor of ``hessian``
    ginv: np.ndarray
    ginv_rows: np.ndarray
    gram: np.ndarray
    row_norm: np.ndarray
    prox: float  # proximal shift folded into ginv; 0 for a positive-definite Hessian

    @property
    def n_eq(self) -> int:
        return self.layout[0]


def _check_problem(problem: QpProblem):
    h = np.asarray(problem.hessian, dtype=float)
    c = np.asarray(problem.linear_term, dtype=float)
    n = c.shape[0]
    if h.shape != (n, n):
        raise QpError(f"hessian shape {h.shape} does not match linear term length {n}")
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise QpError("non-finite entries in objective")
    scale = max(1.0, float(np.max(np.abs(h))) if h.size else 1.0)
    if np.max(np.abs(h - h.T), initial=0.0) > 1e-8 * scale:
        raise QpError("hessian is not symmetric")
    return h, c


def _augmented_hessian(h, n_soft):
    n = h.shape[0]
    g = np.zeros((n + n_soft, n + n_soft))
    g[:n, :n] = h
    g[n:, n:] = np.eye(n_soft) * SLACK_QUADRATIC
    return g


def _kernel_rows(a_eq, a_in, a_soft, groups, n_soft, lo_mask, hi_mask):
    n = a_eq.shape[1]
    nt = n + n_soft
    idx = np.arange(n)

    def pad(mat):
        out = np.zeros((mat.shape[0], nt))
        out[:, :n] = mat
        return out

    soft = -pad(a_soft)
    soft[np.arange(a_soft.shape[0]), n + groups] = 1.0
    slack_pos = np.zeros((n_soft, nt))
    slack_pos[:, n:] = np.eye(n_soft)
    lo_rows = np.zeros((int(lo_mask.sum()), nt))
    lo_rows[np.arange(lo_rows.shape[0]), idx[lo_mask]] = 1.0
    hi_rows = np.zeros((int(hi_mask.sum()), nt))
    hi_rows[np.arange(hi_rows.shape[0]), idx[hi_mask]] = -1.0
    blocks = [pad(a_eq), -pad(a_in), soft, slack_pos, lo_rows, hi_rows]
    layout = tuple(int(b.shape[0]) for b in blocks)
    return np.ascontiguousarray(np.vstack(blocks)), layout


def _kernel_rhs(arrays, ws: QpWorkspace):
    _, b_eq, _, b_in, _, b_soft, lo, hi = arrays
    return np.concatenate([b_eq, -b_in, -b_soft, np.zeros(ws.n_soft), lo[ws.lo_mask], -hi[ws.hi_mask]])


def prepare_workspace(problem: QpProblem) -> QpWorkspace:
    """Factor the Hessian and the constraint Gram matrix of ``problem``.

    Raises ``QpError`` when the Hessian is not positive semidefinite.
    """
    h, _ = _check_problem(problem)
    a_eq, _, a_in, _, a_soft, _, lo, hi = problem.stacked()
    groups = problem.soft_groups()
    n, ns = h.shape[0], len(problem.soft_constraints)
    eig = np.linalg.eigvalsh(h) if n else np.zeros(0)
    scale = max(1.0, float(np.max(np.abs(eig), initial=0.0)))
    if eig.size and eig[0] < -1e-8 * scale:
        raise QpError(f"hessian is not positive semidefinite (min eigenvalue {eig[0]:.3e})")
    g = _augmented_hessian(h, ns)
    prox = 0.0
    if eig.size and eig[0] <= 1e-12 * scale:
        prox = PROX_SHIFT * scale
        g[:n, :n] += prox * np.eye(n)
    low = np.linalg.cholesky(g)
    linv = np.linalg.inv(low)
    ginv = linv.T @ linv
    lo_mask, hi_mask = np.isfinite(lo), np.isfinite(hi)
    rows, layout = _kernel_rows(a_eq, a_in, a_soft, groups, ns, lo_mask, hi_mask)
    half = rows @ linv.T
    gram = half @ half.T
    gram = 0.5 * (gram + gram.T)
    row_norm = np.maximum(np.sqrt(np.einsum("ij,ij->i", rows, rows)), 1e-300)
    arrays = [lo_mask, hi_mask, rows, g, np.ascontiguousarray(linv.T), ginv, np.ascontiguousarray(ginv @ rows.T), np.ascontiguousarray(gram),
              row_norm]
    for arr in arrays:
        arr.setflags(write=False)
    return QpWorkspace(n, ns, layout, *arrays, prox)


def _check_workspace(ws: QpWorkspace, problem: QpProblem, arrays):
    a_eq, _, a_in, _, a_soft, _, lo, hi = arrays
    expected = (a_eq.shape[0], a_in.shape[0], a_soft.shape[0], len(problem.soft_constraints))
    if ws.n != problem.n or ws.layout[:4] != expected or ws.n_soft != expected[3]:
        raise QpError("workspace was prepared for a differently shaped problem")
    if not (np.array_equal(ws.lo_mask, np.isfinite(lo)) and np.array_equal(ws.hi_mask, np.isfinite(hi))):
        raise QpError("workspace bound pattern does not match the problem")


def _split_multipliers(lam, ws: QpWorkspace):
    ne, ni, ns_rows, ns, n_lo, _ = ws.layout
    pos = np.cumsum((0,) + ws.layout)
    # kernel stationarity is G x + a - C' lam = 0; equality rows enter with +A_eq
    out = {"eq": -lam[pos[0]:pos[1]], "ineq": lam[pos[1]:pos[2]], "soft": lam[pos[2]:pos[3]]}
    lower = np.zeros(ws.n)
    lower[ws.lo_mask] = lam[pos[4]:pos[5]]
    upper = np.zeros(ws.n)
    upper[ws.hi_mask] = lam[pos[5]:pos[6]]
    out["lower"] = lower
    out["upper"] = upper
    return out


def kkt_residual(problem: QpProblem, candidate, multipliers, slack=None) -> float:
    """Scaled KKT violation of ``candidate`` with the given multipliers.

    ``multipliers`` is a dict with keys ``eq``, ``ineq``, ``soft``, ``lower``,
    ``upper`` (missing keys mean zero); inequality multipliers use the
    convention that a non-negative value certifies optimality.  ``slack``
    holds one value per soft block.  Returns the maximum of the
    stationarity, primal feasibility, dual feasibility and complementary
    slackness violations, each relative to the magnitude of the terms it
    balances.
    """
    arrays = problem.stacked()
    a_eq, b_eq, a_in, b_in, a_soft, b_soft, lo, hi = arrays
    h, c = np.asarray(problem.hessian, float), np.asarray(problem.linear_term, float)
    x = np.asarray(candidate, dtype=float)
    n = x.shape[0]
    if n != problem.n:
        raise QpError("candidate length does not match problem")

    def get(key, size):
        v = multipliers.get(key) if multipliers else None
        return np.zeros(size) if v is None else np.asarray(v, dtype=float)

    y_eq = get("eq", a_eq.shape[0])
    y_in = get("ineq", a_in.shape[0])
    y_soft = get("soft", a_soft.shape[0])
    y_lo = get("lower", n)
    y_hi = get("upper", n)
    groups = problem.soft_groups()
    s = np.zeros(a_soft.shape[0]) if slack is None else np.asarray(slack, float)[groups]

    hx = h @ x
    # Lagrangian:  f + y_eq(A_eq x - b) + y_in(A_in x - b) + ... - y_lo(x - lo) + y_hi(x - hi)
    terms = [hx, c, a_eq.T @ y_eq, a_in.T @ y_in, a_soft.T @ y_soft, y_lo, y_hi]
    grad = terms[0] + terms[1] + terms[2] + terms[3] + terms[4] - y_lo + y_hi
    scale = 1.0 + max(float(np.max(np.abs(t), initial=0.0)) for t in terms)
    stationarity = float(np.max(np.abs(grad), initial=0.0)) / scale

    fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
    lo_ref = np.where(fin_lo, lo, 0.0)
    hi_ref = np.where(fin_hi, hi, 0.0)
    res_eq = a_eq @ x - b_eq
    res_in = a_in @ x - b_in
    res_soft = a_soft @ x - s - b_soft
    res_lo = np.where(fin_lo, lo - x, 0.0)
    res_hi = np.where(fin_hi, x - hi, 0.0)

    def rel(res, ref):
        if res.size == 0:
            return 0.0
        return float(np.max(res / (1.0 + np.abs(ref))))

    primal = max(
        rel(np.abs(res_eq), b_eq),
        rel(np.maximum(res_in, 0.0), b_in),
        rel(np.maximum(res_soft, 0.0), b_soft),
        rel(np.maximum(res_lo, 0.0), lo_ref),
        rel(np.maximum(res_hi, 0.0), hi_ref),
    )
    duals = np.concatenate([y_in, y_soft, y_lo, y_hi])
    dual_scale = 1.0 + float(np.max(np.abs(duals), initial=0.0))
    dual = float(np.max(np.maximum(-duals, 0.0), initial=0.0)) / dual_scale

    comp = 0.0
    for y, res, ref in ((y_in, res_in, b_in), (y_soft, res_soft, b_soft),
                        (y_lo, res_lo, lo_ref), (y_hi, res_hi, hi_ref)):
        if y.size:
            comp = max(comp, float(np.max(np.abs(y * res) / (dual_scale * (1.0 + np.abs(ref))))))
    return max(stationarity, primal, dual, comp)


def _kkt_kernel_form(ws: QpWorkspace, h, c, z, lam, b) -> float:
    """``kkt_residual`` evaluated from kernel rows; same definition, less overhead."""
    n = ws.n
    x = z[:n]
    pos = np.cumsum((0,) + ws.layout)
    res = ws.rows @ z - b  # kernel residuals, >= 0 when satisfied
    ref = 1.0 + np.abs(b)
    hx = h @ x
    scale = max(float(np.max(np.abs(hx), initial=0.0)), float(np.max(np.abs(c), initial=0.0)))
    grad = hx + c
    for blk in (0, 1, 2, 4, 5):
        lo_, hi_ = pos[blk], pos[blk + 1]
        if hi_ > lo_:
            term = ws.rows[lo_:hi_, :n].T @ lam[lo_:hi_]
            grad -= term
            scale = max(scale, float(np.max(np.abs(term))))
    stationarity = float(np.max(np.abs(grad), initial=0.0)) / (1.0 + scale)

    primal = float(np.max(np.abs(res[:pos[1]]) / ref[:pos[1]], initial=0.0))
    sel = np.r_[pos[1]:pos[3], pos[4]:pos[6]]
    if sel.size:
        primal = max(primal, float(np.max(np.maximum(-res[sel], 0.0) / ref[sel])))
        duals = lam[sel]
        dual_scale = 1.0 + float(np.max(np.abs(duals)))
        dual = float(np.max(np.maximum(-duals, 0.0))) / dual_scale
        comp = float(np.max(np.abs(duals * res[sel]) / (dual_scale * ref[sel])))
    else:
        dual = comp = 0.0
    return max(stationarity, primal, dual, comp)


def _kernel(ws: QpWorkspace, a, b, warm, max_iter, feas_tol):
    x0 = -(ws.ginv @ a)
    s0 = ws.rows @ x0 - b
    thresh = feas_tol * np.maximum(1.0, np.abs(b))
    lam, active, code, iters = dual_solve(ws.gram, s0, ws.row_norm, thresh, ws.n_eq, warm,
                                          ws.ginv.shape[0], max_iter)
    z = x0 + ws.ginv_rows[:, active] @ lam[active]
    return z, lam, active, code, iters


def _robust_kernel(ws: QpWorkspace, a, b, max_iter, feas_tol):
    z, lam, code, iters, active = gi_solve(ws.factor, a, ws.rows, b, ws.n_eq, max_iter, feas_tol)
    return z, lam, active, code, iters


def _polish(ws: QpWorkspace, a, b, active):
    """Re-solve the equality-constrained problem on ``active`` in primal form.

    The kernel works with ``C G^-1 C'``, whose condition number is the square
    of the primal one; on nearly degenerate active sets this recovers the
    digits lost there.
    """
    nt, q = ws.hessian.shape[0], active.shape[0]
    c_a = ws.rows[active]
    kkt = np.zeros((nt + q, nt + q))
    kkt[:nt, :nt] = ws.hessian
    kkt[:nt, nt:] = -c_a.T
    kkt[nt:, :nt] = c_a
    try:
        sol = np.linalg.solve(kkt, np.concatenate([-a, b[active]]))
    except np.linalg.LinAlgError:
        return None
    lam = np.zeros(b.shape[0])
    lam[active] = sol[nt:]
    return sol[:nt], lam


def _prox_loop(ws, a, b, max_iter, tol):
    """Proximal-point iterations for a merely PSD Hessian."""
    n = ws.n
    z = np.zeros(ws.ginv.shape[0])
    used = 0
    while True:
        shift = np.zeros_like(z)
        shift[:n] = ws.prox * z[:n]
        z_new, lam, active, code, it = _robust_kernel(ws, a - shift, b, max(1, max_iter - used), tol * 1e-3)
        used += it
        if code != OPTIMAL:
            return z_new, lam, active, code, used
        step = float(np.max(np.abs(z_new - z), initial=0.0))
        z = z_new
        if step <= tol * 1e-3 * (1.0 + float(np.max(np.abs(z), initial=0.0))):
            return z, lam, active, code, used
        if used >= max_iter:
            return z, lam, active, MAX_ITER, used


def solve_qp(problem: QpProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             initial_active=None) -> QpSolution:
    """Solve ``problem``; see the module docstring for the problem form.

    ``initial_active`` is a guess of the optimal active set in kernel row
    numbering (see ``QpSolution.active_set``); it only affects the work done.
    Raises ``QpError`` for malformed input or a Hessian that is not PSD.
    """
    ws = problem.workspace
    if ws is None:
        h, c = _check_problem(problem)
    else:
        h, c = np.asarray(problem.hessian, dtype=float), np.asarray(problem.linear_term, dtype=float)
        if h.shape != (ws.n, ws.n) or not np.all(np.isfinite(c)):
            raise QpError("objective does not match the workspace or is not finite")
    arrays = problem.stacked()
    a_eq, b_eq, a_in, b_in, a_soft, b_soft, lo, hi = arrays
    n = c.shape[0]
    for block in (b_eq, b_in, b_soft, lo, hi):
        if np.any(np.isnan(block)):
            raise QpError("NaN in constraint data")
    if np.any(lo > hi):
        return QpSolution(np.clip(np.zeros(n), lo, hi), np.nan, QpStatus.INFEASIBLE, np.inf, np.inf)

    if ws is None:
        ws = prepare_workspace(problem)
    else:
        _check_workspace(ws, problem, arrays)
    b = _kernel_rhs(arrays, ws)
    a_full = np.concatenate([c, np.full(ws.n_soft, SLACK_PENALTY)])
    warm = np.zeros(0, dtype=np.int64) if initial_active is None else np.asarray(initial_active, dtype=np.int64)

    def certify(z, lam):
        return _kkt_kernel_form(ws, h, c, z, lam, b)

    if ws.prox > 0.0:
        z, lam, active, code, iters = _prox_loop(ws, a_full, b, max_iter, tol)
        kkt = np.inf if code == INFEASIBLE else certify(z, lam)
    else:
        cap = min(max_iter, FAST_PATH_ITER * b.shape[0])

        def fast(rows):
            z, lam, active, code, it = _kernel(ws, a_full, b, rows, cap, tol * 1e-3)
            kkt = np.inf if code == INFEASIBLE else certify(z, lam)
            if code == OPTIMAL and kkt > tol:
                polished = _polish(ws, a_full, b, active)
                if polished is not None:
                    kkt_p = certify(*polished)
                    if kkt_p < kkt:
                        z, lam, kkt = polished[0], polished[1], kkt_p
            return z, lam, active, code, it, kkt

        def run(rows):
            z, lam, active, code, iters, kkt = fast(rows)
            if code == MAX_ITER and rows.size:
                # a stale guess can send the dual iteration round a degenerate vertex
                z, lam, active, code, more, kkt = fast(np.zeros(0, dtype=np.int64))
                iters += more
            if kkt > tol and iters < max_iter:
                # the fast path squares the conditioning; redo it in primal space
                z, lam, active, code, more = _robust_kernel(ws, a_full, b, max_iter - iters, tol * 1e-3)
                iters += more
                kkt = np.inf if code == INFEASIBLE else certify(z, lam)
            return z, lam, active, code, iters, kkt

        z, lam, active, code, iters, kkt = run(warm)
        if warm.size and np.max(np.abs(z[n:]), initial=0.0) > FEASIBILITY_TOL:
            # the certificate is relative to the slack price, so a warm start can stop
            # at a slack well above the minimal one; only a cold solve may declare infeasible
            z, lam, active, code, more, kkt = run(np.zeros(0, dtype=np.int64))
            iters += more
    x = z[:n]
    slack = z[n:]
    multipliers = _split_multipliers(lam, ws)
    slack_norm = float(np.max(np.abs(slack), initial=0.0))
    objective = float(0.5 * x @ h @ x + c @ x)
    if code == INFEASIBLE:
        return QpSolution(x, objective, QpStatus.INFEASIBLE, np.inf, slack_norm, multipliers, iters, active, slack)
    # the certificate decides: a degenerate vertex can stall the iteration at the cap
    # on a point that already satisfies the KKT conditions
    if code == MAX_ITER and kkt > tol:
        status = QpStatus.MAX_ITER
    elif slack_norm > FEASIBILITY_TOL:
        status = QpStatus.INFEASIBLE
    elif kkt > tol:
        status = QpStatus.MAX_ITER
    else:
        status = QpStatus.OPTIMAL
    return QpSolution(x, objective, status, kkt, slack_norm, multipliers, iters, active, slack)
