"""Comparison controllers: penalty-only path integral control and a HOCBF-QP filter."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .cost import GoalCoordCost, SubsystemCost, TerminalCost, running_cost
from .dynamics import AugmentedJointDynamics, BarrierConstraint, assemble_augmented
from .pic import ControlEstimate, SamplerConfig, estimate_control

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class PenaltyCostConfig:
    base: GoalCoordCost
    obstacle_penalty_weight: float = 0.0
    violation_shape: str = "indicator"
    obstacles: tuple = ()

    def __post_init__(self):
        if self.obstacle_penalty_weight < 0:
            raise ValueError("obstacle_penalty_weight must be non-negative")
        if self.violation_shape not in ("indicator", "hinge"):
            raise ValueError("violation_shape must be 'indicator' or 'hinge'")
        object.__setattr__(self, "base", self.base.without_bas_terms())
        object.__setattr__(self, "obstacles", tuple(self.obstacles))


def obstacle_penalty(cfg: PenaltyCostConfig, pos) -> np.ndarray:
    """Non-negative violation penalty summed over obstacles."""
    pos = np.asarray(pos, dtype=float)
    if not cfg.obstacles or cfg.obstacle_penalty_weight == 0:
        return np.zeros(pos.shape[:-1])
    centers = np.array([c.center for c in cfg.obstacles])
    radii = np.array([c.radius for c in cfg.obstacles])
    d = pos[..., None, :] - centers
    h = np.sum(d * d, axis=-1) - radii**2
    if cfg.violation_shape == "indicator":
        viol = (h <= 0).astype(float)
    else:
        viol = np.maximum(-h, 0.0)
    return cfg.obstacle_penalty_weight * np.sum(viol, axis=-1)


class PenaltySubsystemCost(SubsystemCost):
    """Base goal/coordination cost plus an obstacle-violation penalty on the central agent."""

    def __init__(self, cfg: PenaltyCostConfig, aug: AugmentedJointDynamics, terminal: TerminalCost = TerminalCost()):
        super().__init__(cfg.base, aug, terminal)
        self.penalty = cfg

    def running(self, Y, t=0.0):
        q = running_cost(self.cfg, Y, self.aug)
        if self.penalty.obstacle_penalty_weight:
            q = q + obstacle_penalty(self.penalty, np.asarray(Y)[..., self.aug.member_position_indices(0)])
        return q

    def smooth_running(self, Y, t=0.0):
        q = running_cost(self.cfg, Y, self.aug)
        if self.penalty.obstacle_penalty_weight and self.penalty.violation_shape == "hinge":
            q = q + obstacle_penalty(self.penalty, np.asarray(Y)[..., self.aug.member_position_indices(0)])
        return q


def penalty_pic_control(
    sub,
    agents,
    cost: PenaltyCostConfig,
    x0,
    cfg: SamplerConfig,
    lam: float,
    terminal: TerminalCost = TerminalCost(),
    aug: Optional[AugmentedJointDynamics] = None,
    **kwargs,
) -> ControlEstimate:
    """Path-integral control on the unaugmented joint dynamics with a violation penalty."""
    if aug is None:
        aug = assemble_augmented(sub, agents, None)
    return estimate_control(aug, PenaltySubsystemCost(cost, aug, terminal), x0, cfg, lam, **kwargs)


@dataclass(frozen=True)
class CbfFilterConfig:
    k1: float = 1.0
    k2: float = 1.0
    slack_weight: float = 1e4
    u_bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("HOCBF gains must be positive")
        if self.slack_weight < 0:
            raise ValueError("slack_weight must be non-negative")


def hocbf_constraint_row(obstacle: BarrierConstraint, agent_state, k1: float = 1.0, k2: float = 1.0):
    """Second-order CBF condition for a unicycle, as ``row @ (u, w) >= rhs``.

    With ``psi1 = hdot + k1 h`` the condition ``psi1dot + k2 psi1 >= 0``
    expands to ``hddot + (k1 + k2) hdot + k1 k2 h >= 0``.
    """
    x, y, v, phi = np.asarray(agent_state, dtype=float)[:4]
    dx, dy = x - obstacle.center[0], y - obstacle.center[1]
    c, s = np.cos(phi), np.sin(phi)
    h = dx * dx + dy * dy - obstacle.radius**2
    radial = dx * c + dy * s
    hdot = 2.0 * v * radial
    row = np.array([2.0 * radial, 2.0 * v * (-dx * s + dy * c)])
    rhs = -(2.0 * v * v + (k1 + k2) * hdot + k1 * k2 * h)
    return row, float(rhs)


def _box_rows(bounds):
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    rows, rhs = [], []
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1.0
        rows += [e, -e]
        rhs += [lo[i], -hi[i]]
    return rows, rhs


def _project_active(u_base, A, b):
    """Minimize ``|u - u_base|^2`` with the rows of ``A`` held at equality."""
    if A.shape[0] == 0:
        return u_base.copy()
    G = A @ A.T
    if abs(np.linalg.det(G)) < 1e-14:
        return None
    mult = np.linalg.solve(G, b - A @ u_base)
    return u_base + A.T @ mult


def solve_hard_qp(u_base, A, b):
    """Exact active-set enumeration (at most two active rows in 2-D)."""
    best, best_cost = None, np.inf
    m = A.shape[0]
    for size in range(0, min(2, m) + 1):
        for active in combinations(range(m), size):
            u = _project_active(u_base, A[list(active)], b[list(active)])
            if u is None or np.any(A @ u < b - FEAS_TOL):
                continue
            cost = float(np.sum((u - u_base) ** 2))
            if cost < best_cost - 1e-15:
                best, best_cost = u, cost
        if best is not None and size == 0:
            break
    return best


def solve_soft_qp(u_base, A, b, slack_weight):
    """Minimize ``|u-u_b|^2 + rho sum max(0, b - A u)^2`` by enumerating violated sets."""
    m = A.shape[0]
    best, best_cost = u_base.copy(), np.inf
    for mask in range(1 << m):
        S = [j for j in range(m) if mask >> j & 1]
        M = np.eye(2) + slack_weight * A[S].T @ A[S]
        u = np.linalg.solve(M, u_base + slack_weight * A[S].T @ b[S])
        viol = np.maximum(b - A @ u, 0.0)
        cost = float(np.sum((u - u_base) ** 2) + slack_weight * np.sum(viol**2))
        if cost < best_cost:
            best, best_cost = u, cost
    return best


def cbf_filter(u_base, agent_state, obstacles: Sequence[BarrierConstraint], cfg: CbfFilterConfig, return_info=False):
    """Minimally modify ``u_base`` so every HOCBF condition holds.

    Falls back to a slack-penalized problem when the hard constraints are
    jointly infeasible; ``info["infeasible"]`` records that.
    """
    u_base = np.asarray(u_base, dtype=float).reshape(2)
    rows, rhs = [], []
    for obs in obstacles:
        r, c = hocbf_constraint_row(obs, agent_state, cfg.k1, cfg.k2)
        rows.append(r)
        rhs.append(c)
    A = np.array(rows).reshape(-1, 2)
    b = np.array(rhs, dtype=float)
    if cfg.u_bounds is not None:
        br, bb = _box_rows(cfg.u_bounds)
        A_all, b_all = np.vstack([A, br]), np.concatenate([b, bb])
    else:
        A_all, b_all = A, b
    info = {"infeasible": False}
    if A_all.shape[0] == 0 or np.all(A_all @ u_base >= b_all - FEAS_TOL):
        u = u_base.copy()
    else:
        u = solve_hard_qp(u_base, A_all, b_all)
        if u is None:
            info["infeasible"] = True
            u = solve_soft_qp(u_base, A, b, cfg.slack_weight)
            if cfg.u_bounds is not None:
                u = np.clip(u, cfg.u_bounds[0], cfg.u_bounds[1])
    return (u, info) if return_info else u
