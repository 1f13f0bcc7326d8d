"""Grid images, flows, and the flow application map.

A gray-scale image is a probability distribution over the pixels of an
n x m grid. A flow assigns signed mass movement to every horizontal and
vertical edge of the grid; applying a flow to an image redistributes
mass between neighbouring pixels. The application map is affine in the
flow, which is what the whole certification pipeline is built on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MassError, ShapeMismatchError

MASS_TOL = 1e-6
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class GridShape:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must have positive dimensions, got {self.rows}x{self.cols}")

    @property
    def pixels(self) -> int:
        return self.rows * self.cols

    @property
    def flow_dim(self) -> int:
        """Number of grid edges: n(m-1) horizontal plus (n-1)m vertical."""
        return self.rows * (self.cols - 1) + (self.rows - 1) * self.cols

    @property
    def w1_diameter(self) -> float:
        """Largest L1 distance between two pixels; upper bounds any W1 value."""
        return float(self.rows + self.cols - 2)

    def __str__(self):
        return f"{self.rows}x{self.cols}"


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype).ravel()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RawGrid:
    """Unconstrained per-pixel values, row-major; the codomain of apply_flow."""

    shape: GridShape
    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values)
        if arr.size != self.shape.pixels:
            raise ShapeMismatchError(
                f"expected {self.shape.pixels} values for shape {self.shape}, got {arr.size}"
            )
        object.__setattr__(self, "values", arr)

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.shape.rows, self.shape.cols)

    def total_mass(self) -> float:
        return float(self.values.sum())

    def min_value(self) -> float:
        return float(self.values.min())

    def to_image(self, tol: float = FEAS_TOL) -> "GridImage":
        """Reinterpret as a distribution, clipping negatives within tol."""
        return GridImage(self.shape, self.values, tol=tol)


@dataclass(frozen=True)
class GridImage:
    """Nonnegative pixel mass on a grid, normalized to total mass 1.

    Construction clips tiny negatives (within ``tol``) to zero and
    renormalizes, which absorbs the float noise produced by transport
    arithmetic. Anything worse raises MassError.
    """

    shape: GridShape
    mass: np.ndarray
    tol: float = field(default=FEAS_TOL, repr=False, compare=False)

    def __post_init__(self):
        arr = np.array(self.mass, dtype=np.float64).ravel()
        if arr.size != self.shape.pixels:
            raise ShapeMismatchError(
                f"expected {self.shape.pixels} pixels for shape {self.shape}, got {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise MassError("pixel masses must be finite")
        low = arr.min()
        if low < -self.tol:
            raise MassError(f"pixel mass {low} below -{self.tol}")
        arr = np.maximum(arr, 0.0)
        total = arr.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise MassError(f"total mass {total} not within {MASS_TOL} of 1")
        arr /= total
        arr.flags.writeable = False
        object.__setattr__(self, "mass", arr)

    @classmethod
    def from_values(cls, shape: GridShape, values, tol: float = FEAS_TOL) -> "GridImage":
        """Normalize arbitrary nonnegative intensities by their total mass."""
        arr = np.array(values, dtype=np.float64).ravel()
        if arr.size != shape.pixels:
            raise ShapeMismatchError(
                f"expected {shape.pixels} values for shape {shape}, got {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise MassError("pixel values must be finite")
        if arr.min() < -tol:
            raise MassError(f"pixel value {arr.min()} below -{tol}")
        arr = np.maximum(arr, 0.0)
        total = arr.sum()
        if total <= 0.0:
            raise MassError("image has zero total mass")
        return cls(shape, arr / total, tol=tol)

    @classmethod
    def point_mass(cls, shape: GridShape, row: int, col: int) -> "GridImage":
        arr = np.zeros(shape.pixels)
        arr[row * shape.cols + col] = 1.0
        return cls(shape, arr)

    def as_matrix(self) -> np.ndarray:
        return self.mass.reshape(self.shape.rows, self.shape.cols)

    def as_raw(self) -> RawGrid:
        return RawGrid(self.shape, self.mass)


@dataclass(frozen=True)
class Flow:
    """Signed mass movement per grid edge.

    The flat layout is fixed package-wide: all rightward entries
    (n x (m-1), row-major; positive moves mass one pixel rightward),
    then all downward entries ((n-1) x m, row-major; positive moves
    mass one pixel downward).
    """

    shape: GridShape
    vec: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.vec)
        if arr.size != self.shape.flow_dim:
            raise ShapeMismatchError(
                f"expected flow dimension {self.shape.flow_dim} for shape {self.shape}, got {arr.size}"
            )
        object.__setattr__(self, "vec", arr)

    @classmethod
    def zero(cls, shape: GridShape) -> "Flow":
        return cls(shape, np.zeros(shape.flow_dim))

    @classmethod
    def from_parts(cls, shape: GridShape, right, down) -> "Flow":
        right = np.asarray(right, dtype=np.float64)
        down = np.asarray(down, dtype=np.float64)
        n, m = shape.rows, shape.cols
        if right.shape != (n, m - 1) or down.shape != (n - 1, m):
            raise ShapeMismatchError(
                f"flow parts must be {n}x{m - 1} and {n - 1}x{m}, got {right.shape} and {down.shape}"
            )
        return cls(shape, np.concatenate([right.ravel(), down.ravel()]))

    @property
    def right(self) -> np.ndarray:
        n, m = self.shape.rows, self.shape.cols
        return self.vec[: n * (m - 1)].reshape(n, m - 1)

    @property
    def down(self) -> np.ndarray:
        n, m = self.shape.rows, self.shape.cols
        return self.vec[n * (m - 1) :].reshape(n - 1, m)

    def l1(self) -> float:
        return float(np.abs(self.vec).sum())

    def _check_same_grid(self, other: "Flow"):
        if self.shape != other.shape:
            raise ShapeMismatchError(f"flow shapes differ: {self.shape} vs {other.shape}")

    def __add__(self, other: "Flow") -> "Flow":
        self._check_same_grid(other)
        return Flow(self.shape, self.vec + other.vec)

    def __sub__(self, other: "Flow") -> "Flow":
        self._check_same_grid(other)
        return Flow(self.shape, self.vec - other.vec)

    def __mul__(self, scalar: float) -> "Flow":
        return Flow(self.shape, self.vec * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "Flow":
        return Flow(self.shape, -self.vec)


@dataclass(frozen=True)
class FlowMatrix:
    """The matrix A with apply_flow(R, delta) == R + A @ delta.vec.

    Every column holds exactly one +1 (the pixel the edge feeds) and one
    -1 (the pixel it drains), so columns sum to zero and applying any
    flow conserves total mass. Stored as two index arrays instead of a
    dense nm x flow_dim matrix.
    """

    shape: GridShape
    plus: np.ndarray
    minus: np.ndarray

    def __post_init__(self):
        plus = _frozen_array(self.plus, dtype=np.int64)
        minus = _frozen_array(self.minus, dtype=np.int64)
        if plus.size != self.shape.flow_dim or minus.size != self.shape.flow_dim:
            raise ShapeMismatchError("index arrays must have one entry per grid edge")
        object.__setattr__(self, "plus", plus)
        object.__setattr__(self, "minus", minus)

    @property
    def n_rows(self) -> int:
        return self.shape.pixels

    @property
    def n_cols(self) -> int:
        return self.shape.flow_dim

    def matvec(self, flow_vec: np.ndarray) -> np.ndarray:
        """A @ v without materializing A."""
        out = np.zeros(self.shape.pixels)
        np.add.at(out, self.plus, flow_vec)
        np.subtract.at(out, self.minus, flow_vec)
        return out

    def premultiply(self, w: np.ndarray) -> np.ndarray:
        """W @ A for a dense (k, nm) matrix W; returns (k, flow_dim)."""
        w = np.asarray(w, dtype=np.float64)
        return w[..., self.plus] - w[..., self.minus]

    def dense(self) -> np.ndarray:
        mat = np.zeros((self.shape.pixels, self.shape.flow_dim))
        cols = np.arange(self.shape.flow_dim)
        mat[self.plus, cols] += 1.0
        mat[self.minus, cols] -= 1.0
        return mat


def build_flow_matrix(shape: GridShape) -> FlowMatrix:
    """Construct A column by column from the application-map formula.

    Rightward edge (i, j) drains pixel (i, j) and feeds (i, j+1);
    downward edge (i, j) drains (i, j) and feeds (i+1, j). Column order
    matches the Flow layout.
    """
    n, m = shape.rows, shape.cols
    plus = np.empty(shape.flow_dim, dtype=np.int64)
    minus = np.empty(shape.flow_dim, dtype=np.int64)
    k = 0
    for i in range(n):
        for j in range(m - 1):
            minus[k] = i * m + j
            plus[k] = i * m + j + 1
            k += 1
    for i in range(n - 1):
        for j in range(m):
            minus[k] = i * m + j
            plus[k] = (i + 1) * m + j
            k += 1
    return FlowMatrix(shape, plus, minus)


def apply_flow(base, delta: Flow) -> RawGrid:
    """Apply a flow to an image or raw grid.

    Each pixel keeps its own mass, receives the flow from its left and
    upper edge, and gives away the flow on its right and lower edge.
    Total mass is conserved for every flow.
    """
    if base.shape != delta.shape:
        raise ShapeMismatchError(f"grid {base.shape} does not match flow {delta.shape}")
    values = base.mass if isinstance(base, GridImage) else base.values
    out = values.reshape(base.shape.rows, base.shape.cols).copy()
    right = delta.right
    down = delta.down
    out[:, 1:] += right
    out[:, :-1] -= right
    out[1:, :] += down
    out[:-1, :] -= down
    return RawGrid(base.shape, out.ravel())


def is_feasible(reference: GridImage, delta: Flow, tol: float = FEAS_TOL) -> bool:
    """Whether applying delta to the reference yields a distribution.

    Mass is conserved automatically, so only pixel nonnegativity needs
    checking.
    """
    return apply_flow(reference, delta).min_value() >= -tol


def flow_l1(delta: Flow) -> float:
    """Total absolute edge mass; the quantity that upper-bounds W1."""
    return delta.l1()
