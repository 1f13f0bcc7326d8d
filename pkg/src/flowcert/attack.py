"""Projected gradient descent attack under a W1 budget.

The attack walks in flow space: starting from a flow of the input
image, it descends the margin loss of the lifted network and projects
back onto the L1 budget ball intersected with the feasible flows
whenever the iterate leaves that set. A successful iterate maps back to
an adversarial image whose W1 distance from the input is bounded by the
flow-space L1 distance, hence by the budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeMismatchError
from .grid import (
    FEAS_TOL,
    Flow,
    FlowMatrix,
    GridImage,
    apply_flow,
    build_flow_matrix,
    flow_l1,
    is_feasible,
)
from .linprog import project_l1_feasible
from .network import LiftedNetwork, Network, classify, lift_network, margin_loss_and_grad
from .transport import CouplingStrategy, delta_inverse

_BUDGET_SLACK = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    eps: float
    step_size: Optional[float] = None  # defaults to 0.1 * eps / max_iters
    max_iters: int = 30
    strategy: CouplingStrategy = CouplingStrategy.NORTH_WEST_CORNER
    project_every_step: bool = False
    plateau_tol: float = 1e-9
    plateau_window: int = 5
    init_delta: Optional[Flow] = None

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")

    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else 0.1 * self.eps / self.max_iters


@dataclass(frozen=True)
class AttackResult:
    success: bool
    adversarial: Optional[GridImage]
    w1_bound: float
    iterations: int
    loss_trace: tuple
    delta: Flow
    label: int


def wpgd_attack(
    net: Network,
    reference: GridImage,
    mu: GridImage,
    label: int,
    cfg: AttackConfig,
    matrix: Optional[FlowMatrix] = None,
) -> AttackResult:
    """Search for an adversarial image within W1 distance eps of mu.

    Success means the final (projected, feasible) flow classifies
    differently from ``label``; the returned image is its application to
    the reference, and w1_bound = the flow-space L1 distance, an upper
    bound on the true W1 perturbation.
    """
    if reference.shape != mu.shape:
        raise ShapeMismatchError(f"reference {reference.shape} vs image {mu.shape}")
    if matrix is None:
        matrix = build_flow_matrix(reference.shape)
    lifted = lift_network(net, reference, matrix)
    delta_mu = delta_inverse(reference, mu, cfg.strategy)
    alpha = cfg.effective_step()

    def in_budget(d: Flow) -> bool:
        return flow_l1(d - delta_mu) <= cfg.eps + _BUDGET_SLACK * (1.0 + cfg.eps)

    def project(d: Flow) -> Flow:
        return project_l1_feasible(d, delta_mu, cfg.eps, reference, matrix=matrix)

    current = cfg.init_delta if cfg.init_delta is not None else delta_mu
    if not (is_feasible(reference, current, FEAS_TOL) and in_budget(current)):
        current = project(current)

    trace = []
    iterations = 0
    plateau_run = 0
    misclassified = classify(lifted, current.vec) != label
    if not misclassified and alpha > 0.0:
        for step in range(1, cfg.max_iters + 1):
            loss, grad = margin_loss_and_grad(lifted, current, label)
            if trace and abs(loss - trace[-1]) < cfg.plateau_tol:
                plateau_run += 1
            else:
                plateau_run = 0
            trace.append(loss)
            if plateau_run >= cfg.plateau_window:
                break
            current = current - alpha * grad
            if (
                cfg.project_every_step
                or not is_feasible(reference, current, FEAS_TOL)
                or not in_budget(current)
            ):
                current = project(current)
            iterations = step
            if classify(lifted, current.vec) != label:
                misclassified = True
                break

    # The iterate is only declared adversarial once it provably sits in
    # the budget ball and the feasible set.
    if not (is_feasible(reference, current, FEAS_TOL) and in_budget(current)):
        current = project(current)
        misclassified = classify(lifted, current.vec) != label

    adversarial = apply_flow(reference, current).to_image() if misclassified else None
    return AttackResult(
        success=misclassified,
        adversarial=adversarial,
        w1_bound=flow_l1(current - delta_mu),
        iterations=iterations,
        loss_trace=tuple(trace),
        delta=current,
        label=label,
    )
