"""Couplings between grid images and their conversion to flows.

A transport plan says how much mass moves from each source pixel to
each target pixel. Any plan can be decomposed into per-edge flows by
walking an L-shaped path for every move (horizontal along the source
row, then vertical along the target column), which yields a right
inverse of the flow application map. The exact 1-Wasserstein distance
is computed as a linear program directly in the flow domain, where the
variable count stays linear in the number of edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels
from .errors import ShapeMismatchError, SolverStallError
from .grid import Flow, GridImage, GridShape, build_flow_matrix
from .linprog import LinearProgram, LpStatus, solve_lp


class CouplingStrategy(Enum):
    NORTH_WEST_CORNER = "nw"
    PRODUCT = "product"
    EXACT_OT = "exact"


@dataclass(frozen=True)
class TransportPlan:
    """Sparse coupling: mass[e] moves from pixel src[e] to pixel dst[e].

    Pixel indices are row-major. Entries are positive; pairs never
    repeat.
    """

    shape: GridShape
    src: np.ndarray
    dst: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        mass = np.asarray(self.mass, dtype=np.float64)
        if not (src.shape == dst.shape == mass.shape) or src.ndim != 1:
            raise ShapeMismatchError("plan arrays must be 1-d and equally long")
        npx = self.shape.pixels
        if src.size and (src.min() < 0 or src.max() >= npx or dst.min() < 0 or dst.max() >= npx):
            raise ShapeMismatchError("plan indices out of range for the grid")
        if mass.size and mass.min() < 0:
            raise ValueError("plan masses must be nonnegative")
        for name, arr in (("src", src), ("dst", dst), ("mass", mass)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        source = np.zeros(self.shape.pixels)
        target = np.zeros(self.shape.pixels)
        np.add.at(source, self.src, self.mass)
        np.add.at(target, self.dst, self.mass)
        return source, target

    def total_cost(self) -> float:
        """Transport cost under the L1 ground metric."""
        m = self.shape.cols
        si, sj = np.divmod(self.src, m)
        di, dj = np.divmod(self.dst, m)
        return float(np.sum(self.mass * (np.abs(si - di) + np.abs(sj - dj))))


def _check_pair(source: GridImage, target: GridImage):
    if source.shape != target.shape:
        raise ShapeMismatchError(f"image shapes differ: {source.shape} vs {target.shape}")


def _northwest_plan(source: GridImage, target: GridImage) -> TransportPlan:
    supply = source.mass.copy()
    demand = target.mass.copy()
    n = supply.size
    src, dst, mass = [], [], []
    i = j = 0
    while i < n and j < n:
        move = min(supply[i], demand[j])
        if move > 0.0:
            src.append(i)
            dst.append(j)
            mass.append(move)
            supply[i] -= move
            demand[j] -= move
        if supply[i] <= 0.0:
            i += 1
        else:
            j += 1
    return TransportPlan(source.shape, np.array(src), np.array(dst), np.array(mass))


def _product_plan(source: GridImage, target: GridImage) -> TransportPlan:
    s_idx = np.nonzero(source.mass > 0.0)[0]
    t_idx = np.nonzero(target.mass > 0.0)[0]
    src = np.repeat(s_idx, t_idx.size)
    dst = np.tile(t_idx, s_idx.size)
    mass = np.outer(source.mass[s_idx], target.mass[t_idx]).ravel()
    return TransportPlan(source.shape, src, dst, mass)


def _ground_costs(shape: GridShape) -> np.ndarray:
    idx = np.arange(shape.pixels)
    rows, cols = np.divmod(idx, shape.cols)
    return np.abs(rows[:, None] - rows[None, :]) + np.abs(cols[:, None] - cols[None, :])


def _exact_plan(source: GridImage, target: GridImage) -> TransportPlan:
    """Optimal coupling by solving the transportation LP.

    The plan matrix has pixels^2 variables, so this is intended for
    desk-scale grids; use exact_w1 for distances on larger grids.
    """
    npx = source.shape.pixels
    cost = _ground_costs(source.shape).ravel().astype(np.float64)
    rows = np.zeros((2 * npx, npx * npx))
    for i in range(npx):
        rows[i, i * npx : (i + 1) * npx] = 1.0
    cols_block = np.tile(np.eye(npx), npx)
    rows[npx:, :] = cols_block
    d = np.concatenate([source.mass, target.mass])
    lp = LinearProgram(c=cost, E=rows, d=d, lb=np.zeros(npx * npx))
    sol = solve_lp(lp)
    if sol.status != LpStatus.OPTIMAL:
        raise SolverStallError(f"transport LP unexpectedly {sol.status.value}")
    pi = sol.x
    keep = np.nonzero(pi > 1e-14)[0]
    return TransportPlan(source.shape, keep // npx, keep % npx, pi[keep])


def make_coupling(
    source: GridImage, target: GridImage, strategy: CouplingStrategy
) -> TransportPlan:
    """Build a valid coupling of two images; it need not be optimal."""
    _check_pair(source, target)
    if strategy is CouplingStrategy.NORTH_WEST_CORNER:
        return _northwest_plan(source, target)
    if strategy is CouplingStrategy.PRODUCT:
        return _product_plan(source, target)
    if strategy is CouplingStrategy.EXACT_OT:
        return _exact_plan(source, target)
    raise ValueError(f"unknown strategy {strategy!r}")


def plan_to_flow(plan: TransportPlan) -> Flow:
    """Decompose a plan into edge flows along L-shaped paths.

    Every move goes horizontally along its source row first, then
    vertically along its target column. Applying the result to the
    plan's source marginal reproduces its target marginal.
    """
    n, m = plan.shape.rows, plan.shape.cols
    right = np.zeros((n, max(m - 1, 0)))
    down = np.zeros((max(n - 1, 0), m))
    if plan.src.size:
        _kernels.accumulate_paths(plan.src, plan.dst, plan.mass, m, right, down)
    return Flow.from_parts(plan.shape, right, down)


def delta_inverse(
    reference: GridImage, image: GridImage, strategy: CouplingStrategy
) -> Flow:
    """A flow that maps the reference onto the image (a right inverse
    of the application map)."""
    return plan_to_flow(make_coupling(reference, image, strategy))


def exact_w1(mu: GridImage, nu: GridImage) -> tuple[float, Flow]:
    """Exact 1-Wasserstein distance (L1 ground metric) and an optimal flow.

    Solves min |delta|_1 over flows with A delta = nu - mu, splitting
    delta into positive and negative parts. The optimum equals the best
    coupling cost.
    """
    _check_pair(mu, nu)
    shape = mu.shape
    K = shape.flow_dim
    if K == 0:
        return 0.0, Flow.zero(shape)
    Ad = build_flow_matrix(shape).dense()
    lp = LinearProgram(
        c=np.ones(2 * K),
        E=np.hstack([Ad, -Ad]),
        d=nu.mass - mu.mass,
        lb=np.zeros(2 * K),
    )
    sol = solve_lp(lp)
    if sol.status != LpStatus.OPTIMAL:
        raise SolverStallError(f"W1 flow LP unexpectedly {sol.status.value}")
    delta = Flow(shape, sol.x[:K] - sol.x[K:])
    return float(sol.objective_value), delta
