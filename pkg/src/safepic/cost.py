"""Running/terminal costs on augmented subsystem states and control weights."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dynamics import AugmentedJointDynamics, BasSpec, DimensionError, barrier_values

GRADIENT_STEP = 1e-6


@dataclass(frozen=True)
class ControlWeights:
    lam: float
    R_blocks: tuple

    @property
    def R(self) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.R_blocks)


def cancellation_weights(sigma_bar, lam: float, block_size: Optional[int] = None) -> ControlWeights:
    """Control weights that satisfy ``sigma sigma^T R = lam I``.

    ``sigma_bar`` is the joint diagonal noise scale (matrix or diagonal vector).
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    sigma_bar = np.asarray(sigma_bar, dtype=float)
    diag = np.diag(sigma_bar) if sigma_bar.ndim == 2 else sigma_bar.reshape(-1)
    if np.any(diag <= 0):
        raise ValueError(
            "every noise channel needs positive variance for the cancellation condition"
        )
    r = lam / diag**2
    size = block_size or len(r)
    blocks = tuple(np.diag(r[k : k + size]) for k in range(0, len(r), size))
    return ControlWeights(lam=float(lam), R_blocks=blocks)


def freeze_episode_constants(starts, goals, pairs=()):
    """Distances at t=0: start-to-goal per agent and start-to-start per pair."""
    starts = np.asarray(starts, dtype=float)[:, :2]
    goals = np.asarray(goals, dtype=float)
    d_max = np.linalg.norm(starts - goals, axis=1)
    d_pair = {(i, j): float(np.linalg.norm(starts[i] - starts[j])) for i, j in pairs}
    return d_max, d_pair


@dataclass(frozen=True)
class GoalCoordCost:
    """Goal-reaching / coordination / barrier-state cost for one subsystem."""

    goal: np.ndarray
    goal_weight: float = 0.0
    d_max: float = 0.0
    coord_weight: float = 0.0
    coord_partner: Optional[int] = None
    d_pair_max: float = 0.0
    bas_weight: float = 0.0
    bas_targets: Optional[np.ndarray] = None
    indicator_weight: float = 0.0
    indicator_threshold: float = 0.01
    indicator_mode: str = "product"

    def __post_init__(self):
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(2))
        if self.bas_targets is not None:
            object.__setattr__(self, "bas_targets", np.asarray(self.bas_targets, dtype=float).reshape(-1))
        if self.indicator_mode not in ("product", "sum"):
            raise ValueError("indicator_mode must be 'product' or 'sum'")
        for name in ("goal_weight", "coord_weight", "bas_weight", "indicator_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def without_bas_terms(self) -> "GoalCoordCost":
        return replace(self, bas_weight=0.0, indicator_weight=0.0, bas_targets=None)


def default_bas_targets(spec: BasSpec, goal) -> np.ndarray:
    """On-manifold BaS values at the goal position."""
    return barrier_values(spec, np.asarray(goal, dtype=float))


def running_cost(cfg: GoalCoordCost, Y, aug: AugmentedJointDynamics, include_indicator: bool = True):
    Y = np.asarray(Y, dtype=float)
    if Y.shape[-1] != aug.total_dim:
        raise DimensionError(f"state length {Y.shape[-1]} does not match subsystem ({aug.total_dim})")
    pos = Y[..., aug.member_position_indices(0)]
    q = np.zeros(Y.shape[:-1])
    if cfg.goal_weight:
        q = q + cfg.goal_weight * (np.linalg.norm(pos - cfg.goal, axis=-1) - cfg.d_max)
    if cfg.coord_weight and cfg.coord_partner is not None:
        members = aug.subsystem.members
        if cfg.coord_partner not in members:
            raise DimensionError(f"coordination partner {cfg.coord_partner} not in subsystem {members}")
        other = Y[..., aug.member_position_indices(members.index(cfg.coord_partner))]
        q = q + cfg.coord_weight * (np.linalg.norm(pos - other, axis=-1) - cfg.d_pair_max)
    if aug.n_bas and (cfg.bas_weight or cfg.indicator_weight):
        z = Y[..., aug.bas_slice]
        if cfg.bas_weight:
            target = np.zeros(aug.n_bas) if cfg.bas_targets is None else cfg.bas_targets
            if target.shape != (aug.n_bas,):
                raise DimensionError("bas_targets length must equal the number of constraints")
            dz = z - target
            q = q + cfg.bas_weight * np.sum(dz * dz, axis=-1)
        if cfg.indicator_weight and include_indicator:
            above = z > cfg.indicator_threshold
            if cfg.indicator_mode == "product":
                q = q + cfg.indicator_weight * np.all(above, axis=-1)
            else:
                q = q + cfg.indicator_weight * np.sum(above, axis=-1)
    return q


@dataclass(frozen=True)
class TerminalCost:
    mode: str = "zero"
    scale: float = 0.0
    goal: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("zero", "goal-distance"):
            raise ValueError("terminal cost mode must be 'zero' or 'goal-distance'")
        if self.scale < 0:
            raise ValueError("terminal cost scale must be non-negative")


def terminal_cost(cfg: TerminalCost, Y, aug: AugmentedJointDynamics):
    Y = np.asarray(Y, dtype=float)
    if cfg.mode == "zero" or cfg.scale == 0:
        return np.zeros(Y.shape[:-1])
    pos = Y[..., aug.member_position_indices(0)]
    return cfg.scale * np.linalg.norm(pos - cfg.goal, axis=-1)


class SubsystemCost:
    """Running and terminal cost of one subsystem, bound to its state layout.

    This is the object the path-integral estimator consumes: anything with
    ``running(Y, t)``, ``terminal(Y)`` and ``smooth_running(Y, t)`` works.
    """

    def __init__(self, cfg: GoalCoordCost, aug: AugmentedJointDynamics, terminal: TerminalCost = TerminalCost()):
        self.cfg = cfg
        self.aug = aug
        self.terminal_cfg = terminal

    def running(self, Y, t=0.0):
        return running_cost(self.cfg, Y, self.aug)

    def smooth_running(self, Y, t=0.0):
        return running_cost(self.cfg, Y, self.aug, include_indicator=False)

    def terminal(self, Y):
        return terminal_cost(self.terminal_cfg, Y, self.aug)


def state_cost_gradient_direct(cost, Y, direct_indices, t=0.0, step: float = GRADIENT_STEP):
    """Central-difference gradient of the running cost over direct coordinates.

    Discontinuous indicator terms are left out (``smooth_running``) when the
    cost object provides it; otherwise ``cost`` may be a plain callable.
    """
    Y = np.asarray(Y, dtype=float)
    direct_indices = np.asarray(direct_indices, dtype=int)
    if hasattr(cost, "smooth_running"):
        fn = lambda s: cost.smooth_running(s, t)  # noqa: E731
    elif hasattr(cost, "running"):
        fn = lambda s: cost.running(s, t)  # noqa: E731
    else:
        fn = cost
    d = direct_indices.size
    if d == 0:
        return np.zeros(0)
    probes = np.repeat(Y[None, :], 2 * d, axis=0)
    rows = np.arange(d)
    probes[rows, direct_indices] += step
    probes[d + rows, direct_indices] -= step
    values = np.asarray(fn(probes), dtype=float)
    return (values[:d] - values[d:]) / (2.0 * step)
