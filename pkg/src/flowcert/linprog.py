"""Dense two-phase simplex solver with optimality certificates.

Solves min c.x subject to G x <= h, E x = d and per-variable bounds.
Every Optimal answer is re-derived from the final basis and certified:
the reported duality gap covers both the primal-dual objective mismatch
and any dual infeasibility, and the primal residual is measured against
the original constraints. Infeasible answers carry a Farkas vector and
unbounded answers an improving feasible ray; a solve that cannot
certify its own answer raises SolverStallError instead of returning.

Pivoting is deterministic: Dantzig's rule with lowest-index
tie-breaking, switching to Bland's rule (which cannot cycle) after a
fixed number of iterations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import _kernels
from .errors import LpInputError, SolverStallError
from .grid import FEAS_TOL, Flow, FlowMatrix, GridImage, build_flow_matrix

LP_TOL_ENV = "FLOWCERT_LP_TOL"
DEFAULT_LP_TOL = 1e-7

# Pivot-level tolerance; certificate tolerances are handled separately.
_PIVOT_TOL = 1e-9


def default_lp_tol() -> float:
    raw = os.environ.get(LP_TOL_ENV)
    if raw is None or raw.strip() == "":
        return DEFAULT_LP_TOL
    try:
        value = float(raw)
    except ValueError:
        raise LpInputError(f"{LP_TOL_ENV} must be a float, got {raw!r}")
    if value <= 0:
        raise LpInputError(f"{LP_TOL_ENV} must be positive, got {value}")
    return value


class LpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


def _as_matrix(name, value, width):
    arr = np.atleast_2d(np.asarray(value, dtype=np.float64))
    if arr.size == 0:
        return np.zeros((0, width))
    if arr.shape[1] != width:
        raise LpInputError(f"{name} has {arr.shape[1]} columns, expected {width}")
    if not np.all(np.isfinite(arr)):
        raise LpInputError(f"{name} contains non-finite entries")
    return arr


def _as_vector(name, value, length, allow_inf=False):
    arr = np.asarray(value, dtype=np.float64).ravel()
    if arr.size != length:
        raise LpInputError(f"{name} has length {arr.size}, expected {length}")
    if not allow_inf and not np.all(np.isfinite(arr)):
        raise LpInputError(f"{name} contains non-finite entries")
    if allow_inf and np.any(np.isnan(arr)):
        raise LpInputError(f"{name} contains NaN entries")
    return arr


@dataclass(frozen=True)
class LinearProgram:
    """min c.x  s.t.  G x <= h,  E x = d,  lb <= x <= ub.

    G/h and E/d may be omitted. Bounds default to free variables; use
    -inf/inf entries for one-sided bounds.
    """

    c: np.ndarray
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        c = _as_vector("c", self.c, np.asarray(self.c).size)
        n = c.size
        if n == 0:
            raise LpInputError("LP must have at least one variable")
        object.__setattr__(self, "c", c)

        if (self.G is None) != (self.h is None):
            raise LpInputError("G and h must be given together")
        if (self.E is None) != (self.d is None):
            raise LpInputError("E and d must be given together")
        G = _as_matrix("G", self.G, n) if self.G is not None else np.zeros((0, n))
        h = _as_vector("h", self.h, G.shape[0]) if self.h is not None else np.zeros(0)
        E = _as_matrix("E", self.E, n) if self.E is not None else np.zeros((0, n))
        d = _as_vector("d", self.d, E.shape[0]) if self.d is not None else np.zeros(0)
        lb = (
            _as_vector("lb", self.lb, n, allow_inf=True)
            if self.lb is not None
            else np.full(n, -np.inf)
        )
        ub = (
            _as_vector("ub", self.ub, n, allow_inf=True)
            if self.ub is not None
            else np.full(n, np.inf)
        )
        if np.any(lb > ub):
            raise LpInputError("lb exceeds ub for some variable")
        for name, val in (("G", G), ("h", h), ("E", E), ("d", d)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def n_vars(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class LpSolution:
    status: LpStatus
    x: Optional[np.ndarray]
    objective_value: float
    duality_gap: float
    max_primal_residual: float
    iterations: int
    ray: Optional[np.ndarray] = None
    farkas: Optional[np.ndarray] = None


class _StandardForm:
    """min cs.y  s.t.  A y = b, y >= 0, plus the map back to x.

    x = offset + col_sign * y[col] summed over the columns owned by each
    original variable (one shifted column per bounded variable, a +/-
    pair per free variable). Finite two-sided bounds add a row
    y_col <= ub - lb.
    """

    def __init__(self, lp: LinearProgram):
        n = lp.n_vars
        col_owner = []  # (original var index, sign)
        offset = np.zeros(n)
        bound_rows = []  # (std col, upper value)
        for i in range(n):
            lo, hi = lp.lb[i], lp.ub[i]
            if np.isfinite(lo):
                offset[i] = lo
                col_owner.append((i, 1.0))
                if np.isfinite(hi):
                    bound_rows.append((len(col_owner) - 1, hi - lo))
            elif np.isfinite(hi):
                offset[i] = hi
                col_owner.append((i, -1.0))
            else:
                col_owner.append((i, 1.0))
                col_owner.append((i, -1.0))
        self.offset = offset
        self.col_owner = col_owner
        n_cols = len(col_owner)

        # S maps standard columns back to original variables.
        S = np.zeros((n, n_cols))
        for j, (i, sign) in enumerate(col_owner):
            S[i, j] = sign
        self.S = S

        GS = lp.G @ S
        ES = lp.E @ S
        h_shift = lp.h - lp.G @ offset
        d_shift = lp.d - lp.E @ offset

        n_bounds = len(bound_rows)
        B_rows = np.zeros((n_bounds, n_cols))
        b_vals = np.zeros(n_bounds)
        for r, (col, val) in enumerate(bound_rows):
            B_rows[r, col] = 1.0
            b_vals[r] = val

        n_ineq = GS.shape[0] + n_bounds
        n_eq = ES.shape[0]
        body = np.vstack([GS, B_rows, ES])
        rhs = np.concatenate([h_shift, b_vals, d_shift])

        # Slack columns for the inequality rows.
        slack = np.zeros((body.shape[0], n_ineq))
        slack[:n_ineq, :] = np.eye(n_ineq)
        A = np.hstack([body, slack])
        cs = np.concatenate([lp.c @ S, np.zeros(n_ineq)])

        # Flip rows with negative rhs so b >= 0 for phase 1.
        flip = rhs < 0
        A[flip] *= -1.0
        rhs = np.where(flip, -rhs, rhs)

        self.A = A
        self.b = rhs
        self.cs = cs
        self.n_struct = n_cols
        self.n_ineq = n_ineq
        self.flip = flip

    def map_point(self, y: np.ndarray) -> np.ndarray:
        return self.offset + self.S @ y[: self.S.shape[1]]

    def map_direction(self, y: np.ndarray) -> np.ndarray:
        return self.S @ y[: self.S.shape[1]]


def _primal_residual(lp: LinearProgram, x: np.ndarray) -> float:
    res = 0.0
    if lp.G.shape[0]:
        res = max(res, float(np.max(lp.G @ x - lp.h, initial=0.0)))
    if lp.E.shape[0]:
        res = max(res, float(np.max(np.abs(lp.E @ x - lp.d), initial=0.0)))
    finite_lb = np.isfinite(lp.lb)
    finite_ub = np.isfinite(lp.ub)
    if finite_lb.any():
        res = max(res, float(np.max(lp.lb[finite_lb] - x[finite_lb], initial=0.0)))
    if finite_ub.any():
        res = max(res, float(np.max(x[finite_ub] - lp.ub[finite_ub], initial=0.0)))
    return max(res, 0.0)


def _basis_solve(A, b, basis):
    """Solve B x = b for the current basis with one refinement pass."""
    B = A[:, basis]
    try:
        x = np.linalg.solve(B, b)
        x += np.linalg.solve(B, b - B @ x)
    except np.linalg.LinAlgError as exc:
        raise SolverStallError(f"singular basis during extraction: {exc}")
    return x


def _run_pivots(T, basis, ncols, max_iters, bland_after):
    status, detail, iters = _kernels.pivot_loop(
        T, basis, ncols, _PIVOT_TOL, bland_after, max_iters
    )
    if status == 2:
        raise SolverStallError(f"simplex stalled after {iters} iterations")
    return status, detail, iters


def solve_lp(lp: LinearProgram, tol: Optional[float] = None) -> LpSolution:
    """Solve the LP, returning a certified solution.

    ``tol`` is the certificate tolerance (duality gap and primal
    residual); it defaults to 1e-7 or the FLOWCERT_LP_TOL env var.
    """
    if tol is None:
        tol = default_lp_tol()
    sf = _StandardForm(lp)
    A, b, cs = sf.A, sf.b, sf.cs
    m, ncols = A.shape

    total_iters = 0
    if m == 0:
        basis = np.zeros(0, dtype=np.int64)
        x_std = np.zeros(ncols)
        entering = np.nonzero(cs < -_PIVOT_TOL)[0]
        if entering.size:
            return _unbounded_solution(lp, sf, x_std, int(entering[0]), basis, 0)
        return _optimal_solution(lp, sf, basis, tol, 0)

    max_iters = int(2000 + 60 * m + 5 * ncols)
    bland_after = int(1000 + 20 * m)

    # Phase 1: artificials for rows whose slack cannot start basic.
    slack_ok = np.zeros(m, dtype=bool)
    slack_ok[: sf.n_ineq] = ~sf.flip[: sf.n_ineq]
    art_rows = np.nonzero(~slack_ok)[0]
    n_art = art_rows.size
    basis = np.zeros(m, dtype=np.int64)
    basis[slack_ok] = sf.n_struct + np.nonzero(slack_ok)[0]

    if n_art:
        art_cols = np.zeros((m, n_art))
        for k, r in enumerate(art_rows):
            art_cols[r, k] = 1.0
            basis[r] = ncols + k
        A1 = np.hstack([A, art_cols])
        T = np.zeros((m + 1, ncols + n_art + 1))
        T[1:, :-1] = A1
        T[1:, -1] = b
        # Reduced costs for min sum(artificials): subtract artificial rows.
        T[0, :] = -T[1 + art_rows, :].sum(axis=0)
        T[0, ncols : ncols + n_art] = 0.0
        T = np.ascontiguousarray(T)
        status, detail, iters = _run_pivots(T, basis, ncols + n_art, max_iters, bland_after)
        total_iters += iters
        if status == 1:
            raise SolverStallError("phase-1 problem reported unbounded; inputs are inconsistent")
        phase1_obj = -T[0, -1]
        feas_tol = 1e-8 * (1.0 + float(np.abs(b).max(initial=0.0)))
        if phase1_obj > feas_tol:
            return _infeasible_solution(lp, sf, A1, basis, total_iters)

        # Drive leftover artificials out of the basis; drop redundant rows.
        drop_rows = []
        for r in range(m):
            if basis[r] >= ncols:
                row = T[r + 1, :ncols]
                cands = np.nonzero(np.abs(row) > 1e-9)[0]
                entered = False
                for j in cands:
                    if int(j) not in basis:
                        _pivot_single(T, basis, r + 1, int(j))
                        entered = True
                        break
                if not entered:
                    drop_rows.append(r)
        if drop_rows:
            keep = np.setdiff1d(np.arange(m), np.array(drop_rows))
            T = np.ascontiguousarray(np.vstack([T[:1], T[1:][keep]]))
            basis = basis[keep]
            A = A[keep]
            b = b[keep]
            m = len(keep)
        T2 = np.empty((m + 1, ncols + 1))
        T2[1:, :ncols] = T[1:, :ncols]
        T2[1:, -1] = T[1:, -1]
    else:
        T2 = np.empty((m + 1, ncols + 1))
        T2[1:, :ncols] = A
        T2[1:, -1] = b

    cb = cs[basis]
    T2[0, :ncols] = cs - cb @ T2[1:, :ncols]
    T2[0, -1] = -(cb @ T2[1:, -1])
    T2 = np.ascontiguousarray(T2)

    status, detail, iters = _run_pivots(T2, basis, ncols, max_iters, bland_after)
    total_iters += iters
    if status == 1:
        y_std = np.zeros(ncols)
        y_std[basis] = _basis_solve(A, b, basis)
        return _unbounded_solution(lp, sf, y_std, detail, basis, total_iters, A=A, T=T2)
    return _optimal_solution(lp, sf, basis, tol, total_iters, A=A, b=b)


def _pivot_single(T, basis, row, col):
    T[row] *= 1.0 / T[row, col]
    T[row, col] = 1.0
    f = T[:, col].copy()
    f[row] = 0.0
    T -= np.outer(f, T[row])
    T[:, col] = 0.0
    T[row, col] = 1.0
    basis[row - 1] = col


def _optimal_solution(lp, sf, basis, tol, iters, A=None, b=None):
    if A is None:
        A, b = sf.A, sf.b
    ncols = A.shape[1]
    y = np.zeros(ncols)
    duals = np.zeros(A.shape[0])
    if basis.size:
        y[basis] = _basis_solve(A, b, basis)
        try:
            duals = np.linalg.solve(A[:, basis].T, sf.cs[basis])
        except np.linalg.LinAlgError as exc:
            raise SolverStallError(f"singular basis during dual extraction: {exc}")
    if y.min(initial=0.0) < -1e-7:
        raise SolverStallError("extracted basic solution is not nonnegative")
    y = np.maximum(y, 0.0)

    reduced = sf.cs - A.T @ duals
    dual_viol = max(0.0, -float(reduced.min(initial=0.0)))
    gap = abs(float(sf.cs @ y - duals @ b))
    defect = max(gap, dual_viol)

    x = sf.map_point(y)
    residual = _primal_residual(lp, x)
    if defect > tol or residual > tol:
        raise SolverStallError(
            f"optimal basis failed certification: gap {defect:.3e}, residual {residual:.3e}"
        )
    return LpSolution(
        status=LpStatus.OPTIMAL,
        x=x,
        objective_value=float(lp.c @ x),
        duality_gap=defect,
        max_primal_residual=residual,
        iterations=iters,
    )


def _unbounded_solution(lp, sf, y_feas, entering, basis, iters, A=None, T=None):
    if A is None:
        A = sf.A
    ncols = A.shape[1]
    ray = np.zeros(ncols)
    ray[entering] = 1.0
    if basis.size:
        if T is not None:
            ray[basis] = -T[1:, entering]
        else:
            ray[basis] = -_basis_solve(A, A[:, entering], basis)
    if ray.min(initial=0.0) < -1e-6:
        raise SolverStallError("unbounded ray is not a feasible direction")
    ray = np.maximum(ray, 0.0)
    if sf.cs @ ray >= -1e-12:
        raise SolverStallError("unbounded ray does not improve the objective")
    x_ray = sf.map_direction(ray)
    x_feas = sf.map_point(y_feas)
    return LpSolution(
        status=LpStatus.UNBOUNDED,
        x=x_feas,
        objective_value=-np.inf,
        duality_gap=np.nan,
        max_primal_residual=_primal_residual(lp, x_feas),
        iterations=iters,
        ray=x_ray,
    )


def _infeasible_solution(lp, sf, A1, basis, iters):
    # Farkas vector from the phase-1 dual: y.A <= 0 and y.b > 0 over the
    # standard-form rows [inequalities; bounds; equalities].
    m = sf.A.shape[0]
    c1 = np.zeros(A1.shape[1])
    c1[sf.A.shape[1] :] = 1.0
    try:
        duals = np.linalg.solve(A1[:, basis].T, c1[basis])
    except np.linalg.LinAlgError as exc:
        raise SolverStallError(f"singular basis during Farkas extraction: {exc}")
    scale = float(np.abs(duals).max(initial=0.0))
    if scale == 0.0:
        raise SolverStallError("failed to certify infeasibility with a Farkas vector")
    duals = duals / scale
    score = float(duals @ sf.b)
    viol = float(np.max(sf.A.T @ duals, initial=0.0))
    if score <= 1e-10 or viol > 1e-7:
        raise SolverStallError("failed to certify infeasibility with a Farkas vector")
    # Undo row flips so the certificate refers to the caller's rows.
    farkas = np.where(sf.flip, -duals, duals)
    return LpSolution(
        status=LpStatus.INFEASIBLE,
        x=None,
        objective_value=np.nan,
        duality_gap=np.nan,
        max_primal_residual=np.nan,
        iterations=iters,
        farkas=farkas,
    )


def project_l1_feasible(
    point: Flow,
    center: Flow,
    eps: float,
    reference: GridImage,
    matrix: Optional[FlowMatrix] = None,
    tol: Optional[float] = None,
) -> Flow:
    """Project a flow onto the eps L1-ball around ``center`` intersected
    with the feasible flows of ``reference``.

    The projection minimizes the L1 distance to ``point``. ``center``
    must itself be feasible, so the constraint set is nonempty. The
    flow variable is split as center + s - t with s, t >= 0, and an
    auxiliary vector u majorizes |delta - point|:

        min sum(u)  s.t.  -A(s - t) <= R + A.center,
                          +-((center - point) + s - t) <= u,
                          sum(s + t) <= eps.
    """
    shape = point.shape
    if center.shape != shape or reference.shape != shape:
        raise LpInputError("point, center and reference must share one grid shape")
    if eps < 0:
        raise LpInputError(f"eps must be nonnegative, got {eps}")
    if matrix is None:
        matrix = build_flow_matrix(shape)
    K = shape.flow_dim
    if K == 0:
        return center

    Ad = matrix.dense()
    gap = center.vec - point.vec
    eye = np.eye(K)

    # Variables z = [s, t, u], all >= 0.
    G = np.vstack(
        [
            np.hstack([-Ad, Ad, np.zeros((matrix.n_rows, K))]),
            np.hstack([eye, -eye, -eye]),
            np.hstack([-eye, eye, -eye]),
            np.concatenate([np.ones(2 * K), np.zeros(K)])[None, :],
        ]
    )
    h = np.concatenate(
        [reference.mass + matrix.matvec(center.vec), -gap, gap, [float(eps)]]
    )
    c = np.concatenate([np.zeros(2 * K), np.ones(K)])
    lp = LinearProgram(c=c, G=G, h=h, lb=np.zeros(3 * K))
    sol = solve_lp(lp, tol=tol)
    if sol.status != LpStatus.OPTIMAL:
        raise SolverStallError(
            f"projection LP ended {sol.status.value}; is the center flow feasible?"
        )
    s = sol.x[:K]
    t = sol.x[K : 2 * K]
    return Flow(shape, center.vec + s - t)
