"""Robustness certification in the flow domain.

Certifying a W1 ball around an image reduces to certifying an L1 ball
around one of its flows for the lifted network; intersecting that ball
with the feasible-flow polytope (all pixels stay nonnegative) tightens
the result. Margin lower bounds come from layer-wise linear relaxation
of the ReLUs: each bound is back-substituted to an affine function of
the input flow and minimized over the region, either in closed form via
the dual norm (L1 ball: min = value at center - radius * max |coeff|)
or by an LP when the polytope constraint is on. The certified radius is
found by doubling then bisecting on the sign of the worst margin bound.

For linear classifiers the certification and the minimal adversarial
example are computed exactly: the vanilla radius is the L1 distance to
the nearest decision hyperplane, and the fine-tuned radius solves one
small LP per competitor class over the feasible polytope.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ShapeMismatchError, SolverStallError
from .grid import Flow, FlowMatrix, GridImage, GridShape, build_flow_matrix
from .linprog import LinearProgram, LpStatus, solve_lp
from .network import LiftedNetwork, Network, classify, lift_network
from .transport import CouplingStrategy, delta_inverse


class CertMethod(Enum):
    VANILLA = "Vanilla"
    FINE_TUNED_FEASIBILITY = "FineTunedFeasibility"
    MULTI_REFERENCE = "MultiReference"
    LINEAR_EXACT_VANILLA = "LinearExactVanilla"
    LINEAR_EXACT_FINE_TUNED = "LinearExactFineTuned"


@dataclass(frozen=True)
class Certificate:
    radius: float
    method: CertMethod
    reference_id: str
    flow_strategy: CouplingStrategy
    label: int
    witness: Optional[Flow] = None
    per_reference: Optional[dict] = None

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"certified radius must be nonnegative, got {self.radius}")


@dataclass(frozen=True)
class SearchConfig:
    """Radius search: double an initial bracket, then bisect.

    The cap defaults to the grid's W1 diameter, beyond which every
    distribution is within reach anyway.
    """

    tol: float = 1e-4
    seed_radius: float = 1e-3
    cap: Optional[float] = None

    def cap_for(self, shape: GridShape) -> float:
        return self.cap if self.cap is not None else shape.w1_diameter


@dataclass(frozen=True)
class BoundQuery:
    net: LiftedNetwork
    center: Flow
    radius: float
    label: int
    feasibility: Optional[tuple[FlowMatrix, GridImage]] = None

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"radius must be nonnegative, got {self.radius}")
        if self.center.shape != self.net.shape:
            raise ShapeMismatchError("center flow grid does not match the lifted network")


def _relu_relaxation(lb, ub):
    """Per-neuron slopes for bounding ReLU over [lb, ub].

    Lower: a >= slope_lo * z with slope_lo in {0, 1} (the adaptive
    choice keeps the smaller relaxation area). Upper: a <= slope_up * z
    + icept_up, the chord through (lb, 0) and (ub, ub).
    """
    slope_lo = np.zeros_like(lb)
    slope_up = np.zeros_like(lb)
    icept_up = np.zeros_like(lb)
    active = lb >= 0.0
    slope_lo[active] = 1.0
    slope_up[active] = 1.0
    unstable = (lb < 0.0) & (ub > 0.0)
    if unstable.any():
        l_u, u_u = lb[unstable], ub[unstable]
        s = u_u / (u_u - l_u)
        slope_up[unstable] = s
        icept_up[unstable] = -l_u * s
        slope_lo[unstable] = (u_u >= -l_u).astype(np.float64)
    return slope_lo, slope_up, icept_up


def _backsub(weights, biases, hidden_bounds, C, c0, upto, lower):
    """Affine function of the input that bounds C @ z_upto + c0.

    Walks the layers backwards, replacing each ReLU by its linear
    relaxation (the side depends on the running coefficient signs).
    """
    lam = C
    const = c0
    for i in range(upto, -1, -1):
        const = const + lam @ biases[i]
        lam = lam @ weights[i]
        if i > 0:
            lb, ub = hidden_bounds[i - 1]
            slope_lo, slope_up, icept_up = _relu_relaxation(lb, ub)
            if lower:
                slopes = np.where(lam >= 0.0, slope_lo, slope_up)
                const = const + np.minimum(lam, 0.0) @ icept_up
            else:
                slopes = np.where(lam >= 0.0, slope_up, slope_lo)
                const = const + np.maximum(lam, 0.0) @ icept_up
            lam = lam * slopes
    return lam, const


class _Region:
    """The L1 ball around a center flow, optionally intersected with
    the feasible-flow polytope; evaluates extrema of affine functions."""

    def __init__(self, center: Flow, eps: float, feasibility, lp_tol):
        self.center = center.vec
        self.eps = float(eps)
        self.lp_tol = lp_tol
        self.K = center.shape.flow_dim
        self.G = None
        if feasibility is not None and self.K > 0 and self.eps > 0.0:
            matrix, reference = feasibility
            Ad = matrix.dense()
            self.G = np.vstack(
                [
                    np.hstack([-Ad, Ad]),
                    np.concatenate([np.ones(self.K), np.ones(self.K)])[None, :],
                ]
            )
            self.h = np.concatenate(
                [reference.mass + matrix.matvec(self.center), [self.eps]]
            )
            self.lb = np.zeros(2 * self.K)

    def minima(self, lam, const):
        return self._extrema(lam, const, lower=True)

    def maxima(self, lam, const):
        return self._extrema(lam, const, lower=False)

    def _extrema(self, lam, const, lower):
        dot = lam @ self.center + const
        span = self.eps * np.abs(lam).max(axis=1, initial=0.0)
        vals = dot - span if lower else dot + span
        if self.G is None:
            return vals
        # Polytope refinement: the LP optimum over ball AND polytope can
        # only be tighter than the ball-only value, so keep the better.
        sign = 1.0 if lower else -1.0
        for r in range(lam.shape[0]):
            row = lam[r]
            lp = LinearProgram(
                c=np.concatenate([sign * row, -sign * row]),
                G=self.G,
                h=self.h,
                lb=self.lb,
            )
            sol = solve_lp(lp, tol=self.lp_tol)
            if sol.status != LpStatus.OPTIMAL:
                raise SolverStallError(f"region LP unexpectedly {sol.status.value}")
            val = dot[r] + sign * sol.objective_value
            if lower:
                vals[r] = max(vals[r], val)
            else:
                vals[r] = min(vals[r], val)
        return vals


def margin_lower_bound(q: BoundQuery, lp_tol: Optional[float] = None) -> np.ndarray:
    """Sound lower bounds on logit[label] - logit[t] over the region,
    one entry per competitor t in ascending class order."""
    net = q.net.net
    weights, biases = net.weights, net.biases
    n_layers = len(weights)
    region = _Region(q.center, q.radius, q.feasibility, lp_tol)

    hidden_bounds = []
    for i in range(n_layers - 1):
        width = weights[i].shape[0]
        eye = np.eye(width)
        zero = np.zeros(width)
        lam_lo, c_lo = _backsub(weights, biases, hidden_bounds, eye, zero, i, lower=True)
        lam_hi, c_hi = _backsub(weights, biases, hidden_bounds, eye, zero, i, lower=False)
        hidden_bounds.append((region.minima(lam_lo, c_lo), region.maxima(lam_hi, c_hi)))

    C = q.net.class_count
    if not 0 <= q.label < C:
        raise ValueError(f"label {q.label} out of range for {C} classes")
    spec = -np.eye(C)
    spec[:, q.label] += 1.0
    spec = np.delete(spec, q.label, axis=0)
    lam, const = _backsub(
        weights, biases, hidden_bounds, spec, np.zeros(C - 1), n_layers - 1, lower=True
    )
    return region.minima(lam, const)


def _bisect_radius(pred, search: SearchConfig, cap: float) -> float:
    if cap <= 0:
        return 0.0
    if not pred(0.0):
        return 0.0
    if pred(cap):
        return cap
    lo, hi = 0.0, min(search.seed_radius, cap)
    while hi < cap and pred(hi):
        lo = hi
        hi = min(hi * 2.0, cap)
    while hi - lo > search.tol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _certify_radius(net, reference, mu, strategy, search, with_feasibility, matrix, lp_tol):
    if matrix is None:
        matrix = build_flow_matrix(reference.shape)
    lifted = lift_network(net, reference, matrix)
    delta_mu = delta_inverse(reference, mu, strategy)
    label = classify(net, mu.mass)
    feasibility = (matrix, reference) if with_feasibility else None

    def pred(eps):
        q = BoundQuery(lifted, delta_mu, eps, label, feasibility)
        return float(margin_lower_bound(q, lp_tol=lp_tol).min(initial=np.inf)) > 0.0

    radius = _bisect_radius(pred, search, search.cap_for(reference.shape))
    return radius, label


def certify_vanilla(
    net: Network,
    reference: GridImage,
    mu: GridImage,
    strategy: CouplingStrategy = CouplingStrategy.NORTH_WEST_CORNER,
    search: Optional[SearchConfig] = None,
    matrix: Optional[FlowMatrix] = None,
    reference_id: str = "R0",
    lp_tol: Optional[float] = None,
) -> Certificate:
    """Largest L1-ball radius in flow space with all margin bounds
    positive; sound for the W1 ball around the image."""
    search = search or SearchConfig()
    radius, label = _certify_radius(
        net, reference, mu, strategy, search, False, matrix, lp_tol
    )
    return Certificate(radius, CertMethod.VANILLA, reference_id, strategy, label)


def certify_finetuned(
    net: Network,
    reference: GridImage,
    mu: GridImage,
    strategy: CouplingStrategy = CouplingStrategy.NORTH_WEST_CORNER,
    search: Optional[SearchConfig] = None,
    matrix: Optional[FlowMatrix] = None,
    reference_id: str = "R0",
    lp_tol: Optional[float] = None,
) -> Certificate:
    """As certify_vanilla but restricted to feasible flows, which can
    only enlarge the certified radius."""
    search = search or SearchConfig()
    radius, label = _certify_radius(
        net, reference, mu, strategy, search, True, matrix, lp_tol
    )
    return Certificate(
        radius, CertMethod.FINE_TUNED_FEASIBILITY, reference_id, strategy, label
    )


def certify_multi_reference(
    net: Network,
    mu: GridImage,
    references,
    strategy: CouplingStrategy = CouplingStrategy.NORTH_WEST_CORNER,
    search: Optional[SearchConfig] = None,
    method: CertMethod = CertMethod.VANILLA,
    lp_tol: Optional[float] = None,
) -> Certificate:
    """Best certificate over several references.

    ``references`` is a sequence of (id, GridImage). The per-reference
    certifier is vanilla or fine-tuned per ``method``.
    """
    references = list(references)
    if not references:
        raise ValueError("need at least one reference")
    if method is CertMethod.VANILLA:
        certify_one = certify_vanilla
    elif method is CertMethod.FINE_TUNED_FEASIBILITY:
        certify_one = certify_finetuned
    else:
        raise ValueError(f"per-reference method must be vanilla or fine-tuned, got {method}")
    matrix = build_flow_matrix(mu.shape)
    per_ref = {}
    best = None
    for ref_id, ref in references:
        cert = certify_one(
            net, ref, mu, strategy, search, matrix, reference_id=ref_id, lp_tol=lp_tol
        )
        per_ref[ref_id] = cert.radius
        if best is None or cert.radius > best.radius:
            best = cert
    return Certificate(
        best.radius,
        CertMethod.MULTI_REFERENCE,
        best.reference_id,
        strategy,
        best.label,
        per_reference=per_ref,
    )


def _competitor_planes(W, b, reference, matrix, label):
    """Hyperplanes margin_t(delta) = w_t . delta + d_t for t != label,
    in flow space."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).ravel()
    lifted_w = matrix.premultiply(W)
    lifted_b = W @ reference.mass + b
    rows = []
    for t in range(W.shape[0]):
        if t == label:
            continue
        rows.append((t, lifted_w[label] - lifted_w[t], lifted_b[label] - lifted_b[t]))
    return rows


def linear_vanilla_radius(
    W,
    b,
    reference: GridImage,
    mu: GridImage,
    label: Optional[int] = None,
    strategy: CouplingStrategy = CouplingStrategy.NORTH_WEST_CORNER,
    matrix: Optional[FlowMatrix] = None,
    cap: Optional[float] = None,
) -> Certificate:
    """Exact vanilla radius for a linear classifier.

    The distance from the center flow to each decision hyperplane in L1
    norm is |margin| / max|coefficient|; the witness sits on the nearest
    hyperplane, reached along the single best coordinate.
    """
    if matrix is None:
        matrix = build_flow_matrix(reference.shape)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).ravel()
    if label is None:
        label = int(np.argmax(W @ mu.mass + b))
    delta_mu = delta_inverse(reference, mu, strategy)
    cap = cap if cap is not None else reference.shape.w1_diameter

    best = None  # (radius, signed step, coordinate)
    for _, w, d in _competitor_planes(W, b, reference, matrix, label):
        margin = float(w @ delta_mu.vec + d)
        if margin < 0.0:
            return Certificate(
                0.0,
                CertMethod.LINEAR_EXACT_VANILLA,
                "R0",
                strategy,
                label,
                witness=delta_mu,
            )
        norm = float(np.abs(w).max(initial=0.0))
        if norm == 0.0:
            continue  # no decision boundary against this class in flow space
        j = int(np.argmax(np.abs(w)))
        radius = margin / norm
        if best is None or radius < best[0]:
            best = (radius, -margin / w[j], j)
    if best is None:
        return Certificate(cap, CertMethod.LINEAR_EXACT_VANILLA, "R0", strategy, label)
    radius, step, j = best
    witness_vec = delta_mu.vec.copy()
    witness_vec[j] += step
    return Certificate(
        min(radius, cap),
        CertMethod.LINEAR_EXACT_VANILLA,
        "R0",
        strategy,
        label,
        witness=Flow(reference.shape, witness_vec),
    )


def linear_finetuned_radius(
    W,
    b,
    reference: GridImage,
    mu: GridImage,
    label: Optional[int] = None,
    strategy: CouplingStrategy = CouplingStrategy.NORTH_WEST_CORNER,
    matrix: Optional[FlowMatrix] = None,
    cap: Optional[float] = None,
    boundary_slack: float = 1e-9,
    lp_tol: Optional[float] = None,
) -> Certificate:
    """Exact fine-tuned radius for a linear classifier.

    One LP per competitor: the closest feasible flow on the wrong side
    of that competitor's hyperplane. The witness flow maps to the
    minimal W1 adversarial image. The hyperplane constraint carries a
    tiny slack so the witness is strictly misclassified rather than
    tied on the boundary.
    """
    if matrix is None:
        matrix = build_flow_matrix(reference.shape)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).ravel()
    if label is None:
        label = int(np.argmax(W @ mu.mass + b))
    delta_mu = delta_inverse(reference, mu, strategy)
    cap = cap if cap is not None else reference.shape.w1_diameter
    K = reference.shape.flow_dim

    Ad = matrix.dense()
    feas_rows = np.hstack([-Ad, Ad])
    feas_rhs = reference.mass + matrix.matvec(delta_mu.vec)
    best = None  # (radius, witness flow)
    for _, w, d in _competitor_planes(W, b, reference, matrix, label):
        margin = float(w @ delta_mu.vec + d)
        G = np.vstack([feas_rows, np.concatenate([w, -w])[None, :]])
        h = np.concatenate([feas_rhs, [-boundary_slack - margin]])
        lp = LinearProgram(c=np.ones(2 * K), G=G, h=h, lb=np.zeros(2 * K))
        sol = solve_lp(lp, tol=lp_tol)
        if sol.status == LpStatus.INFEASIBLE:
            continue  # no feasible flow is classified as this competitor
        assert sol.status == LpStatus.OPTIMAL
        radius = float(sol.objective_value)
        if best is None or radius < best[0]:
            witness = Flow(
                reference.shape, delta_mu.vec + sol.x[:K] - sol.x[K:]
            )
            best = (radius, witness)
    if best is None:
        return Certificate(
            cap, CertMethod.LINEAR_EXACT_FINE_TUNED, "R0", strategy, label
        )
    radius, witness = best
    return Certificate(
        min(radius, cap),
        CertMethod.LINEAR_EXACT_FINE_TUNED,
        "R0",
        strategy,
        label,
        witness=witness,
    )


def make_reference(style: str, shape: GridShape, rng, dataset=None) -> GridImage:
    """One reference distribution: 'uniform' (random pixel intensities,
    normalized), 'point' (all mass on a random pixel), or 'data' (an
    image drawn from the dataset)."""
    if style == "uniform":
        return GridImage.from_values(shape, rng.random(shape.pixels) + 1e-12)
    if style == "point":
        idx = int(rng.integers(shape.pixels))
        return GridImage.point_mass(shape, idx // shape.cols, idx % shape.cols)
    if style == "data":
        if dataset is None or not len(dataset.images):
            raise ValueError("'data' references require a dataset")
        img = dataset.images[int(rng.integers(len(dataset.images)))]
        if img.shape != shape:
            raise ShapeMismatchError("dataset images do not match the requested shape")
        return img
    raise ValueError(f"unknown reference style {style!r}")


def sample_references(
    shape: GridShape, k: int, rng, styles=None, dataset=None
) -> list:
    """k (id, image) reference pairs cycling through the styles."""
    if k < 1:
        raise ValueError("need at least one reference")
    if styles is None:
        styles = ["uniform", "point", "data"] if dataset is not None else ["uniform", "point"]
    refs = []
    for i in range(k):
        style = styles[i % len(styles)]
        refs.append((f"{style}:{i}", make_reference(style, shape, rng, dataset)))
    return refs
