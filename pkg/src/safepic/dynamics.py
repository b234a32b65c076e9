"""Agent SDE models, circular barrier constraints and barrier-state augmentation.

All model callables are batched: a state argument of shape ``(..., M)``
returns arrays with the same leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .topology import SubsystemSpec

# |z + beta0| is clamped here inside the BaS drift so rollouts that cross an
# obstacle boundary stay finite (they get enormous path values instead).
BAS_CLAMP = 1e6
ZERO_ROW_TOL = 1e-12


class SafetyViolation(ValueError):
    """A state lies on or inside an obstacle where the barrier is undefined."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AgentModel:
    """Control-affine Ito model ``dx = g(x,t) dt + B(x) [u dt + sigma dw]``."""

    state_dim: int
    control_dim: int
    drift: Callable[[np.ndarray, float], np.ndarray]
    control_matrix: Callable[[np.ndarray], np.ndarray]
    noise_scale: np.ndarray
    position_index: tuple = (0, 1)
    constant_control: bool = False
    name: str = "agent"

    def __post_init__(self):
        noise = np.atleast_2d(np.asarray(self.noise_scale, dtype=float))
        if noise.shape != (self.control_dim, self.control_dim):
            raise DimensionError(
                f"noise_scale must be {self.control_dim}x{self.control_dim}, got {noise.shape}"
            )
        if np.any(np.diag(noise) < 0) or np.any(noise != np.diag(np.diag(noise))):
            raise ValueError("noise_scale must be diagonal with non-negative entries")
        object.__setattr__(self, "noise_scale", noise)

    def with_noise(self, noise_scale) -> "AgentModel":
        return AgentModel(
            self.state_dim,
            self.control_dim,
            self.drift,
            self.control_matrix,
            np.asarray(noise_scale, dtype=float),
            self.position_index,
            self.constant_control,
            self.name,
        )


@dataclass(frozen=True)
class UnicycleParams:
    sigma: float = 0.1
    nu: float = 0.05

    def __post_init__(self):
        if self.sigma <= 0 or self.nu <= 0:
            raise ValueError("unicycle noise levels must be positive")


def uav_drift(state, t=0.0):
    state = np.asarray(state, dtype=float)
    v = state[..., 2]
    phi = state[..., 3]
    out = np.zeros_like(state)
    out[..., 0] = v * np.cos(phi)
    out[..., 1] = v * np.sin(phi)
    return out


_UAV_B = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def uav_control_matrix(state):
    state = np.asarray(state, dtype=float)
    return np.broadcast_to(_UAV_B, state.shape[:-1] + (4, 2))


def unicycle_model(params: UnicycleParams = UnicycleParams()) -> AgentModel:
    """UAV with state (x, y, v, phi), controls (forward accel, turn rate)."""
    return AgentModel(
        state_dim=4,
        control_dim=2,
        drift=uav_drift,
        control_matrix=uav_control_matrix,
        noise_scale=np.diag([params.sigma, params.nu]),
        position_index=(0, 1),
        constant_control=True,
        name="uav",
    )


def single_integrator_model(dim: int = 2, noise: float = 1.0) -> AgentModel:
    """``dx = u dt + noise dw`` on ``dim`` position coordinates."""
    eye = np.eye(dim)

    def drift(x, t=0.0):
        return np.zeros_like(np.asarray(x, dtype=float))

    def control_matrix(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape[:-1] + (dim, dim))

    return AgentModel(
        state_dim=dim,
        control_dim=dim,
        drift=drift,
        control_matrix=control_matrix,
        noise_scale=noise * np.eye(dim),
        position_index=tuple(range(min(dim, 2))),
        constant_control=True,
        name="single-integrator",
    )


@dataclass(frozen=True, eq=False)
class BarrierConstraint:
    """Circular keep-out region; ``h > 0`` outside the circle."""

    center: np.ndarray
    radius: float
    id: int = 0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(2)
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")
        object.__setattr__(self, "center", center)


def h_value(c: BarrierConstraint, pos):
    d = np.asarray(pos, dtype=float) - c.center
    return np.sum(d * d, axis=-1) - c.radius**2


def h_gradient(c: BarrierConstraint, pos):
    return 2.0 * (np.asarray(pos, dtype=float) - c.center)


@dataclass(frozen=True, eq=False)
class BasSpec:
    """Barrier states for a list of constraints, using the inverse barrier 1/h.

    ``beta0_per_constraint`` defaults to ``1/h_j(origin)``; pass an explicit
    override when an obstacle covers the origin.
    """

    gamma: float
    constraints: tuple = ()
    beta0_override: Optional[Sequence[float]] = None
    beta0_per_constraint: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        constraints = tuple(self.constraints)
        object.__setattr__(self, "constraints", constraints)
        if self.beta0_override is not None:
            beta0 = np.asarray(self.beta0_override, dtype=float).reshape(-1)
            if beta0.shape != (len(constraints),):
                raise DimensionError("beta0 override needs one value per constraint")
        else:
            h0 = np.array([h_value(c, np.zeros(2)) for c in constraints], dtype=float)
            if np.any(h0 <= 0):
                bad = [c.id for c, h in zip(constraints, h0) if h <= 0]
                raise SafetyViolation(
                    f"origin lies on/inside obstacle(s) {bad}; pass an explicit beta0 override"
                )
            beta0 = 1.0 / h0
        object.__setattr__(self, "beta0_per_constraint", beta0)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    @property
    def centers(self) -> np.ndarray:
        return np.array([c.center for c in self.constraints]).reshape(-1, 2)

    @property
    def radii(self) -> np.ndarray:
        return np.array([c.radius for c in self.constraints], dtype=float)


def margins(spec: BasSpec, pos) -> np.ndarray:
    """All ``h_j`` at once: ``(..., 2) -> (..., N_s)``."""
    pos = np.asarray(pos, dtype=float)
    d = pos[..., None, :] - spec.centers
    return np.sum(d * d, axis=-1) - spec.radii**2


def barrier_values(spec: BasSpec, pos) -> np.ndarray:
    """On-manifold BaS values ``1/h_j(pos) - beta0_j``."""
    return 1.0 / margins(spec, pos) - spec.beta0_per_constraint


def bas_init(spec: BasSpec, x0, position_index=(0, 1)) -> np.ndarray:
    pos = np.asarray(x0, dtype=float)[list(position_index)]
    h = margins(spec, pos)
    if np.any(h <= 0):
        bad = [c.id for c, hj in zip(spec.constraints, h) if hj <= 0]
        raise SafetyViolation(f"initial state {pos} is not strictly inside the safe set (obstacles {bad})")
    return 1.0 / h - spec.beta0_per_constraint


def _position_gradient_and_margin(spec: BasSpec, x, agent: AgentModel):
    pos = x[..., list(agent.position_index)]
    diff = pos[..., None, :] - spec.centers  # (..., N_s, 2)
    h = np.sum(diff * diff, axis=-1) - spec.radii**2
    return 2.0 * diff, h


def bas_drift_all(spec: BasSpec, x, z, t, agent: AgentModel) -> np.ndarray:
    """dt-coefficient of every BaS: ``(..., M), (..., N_s) -> (..., N_s)``."""
    x = np.asarray(x, dtype=float)
    return _bas_drift_given(spec, x, np.asarray(z, dtype=float), agent.drift(x, t), agent)


def _bas_drift_given(spec: BasSpec, x, z, physical_drift, agent: AgentModel) -> np.ndarray:
    grad, h = _position_gradient_and_margin(spec, x, agent)
    g = physical_drift[..., list(agent.position_index)]
    lie = np.einsum("...jk,...k->...j", grad, g)
    zeta = np.clip(z + spec.beta0_per_constraint, -BAS_CLAMP, BAS_CLAMP)
    return -zeta * zeta * (lie + spec.gamma * h) + spec.gamma * zeta


def bas_control_rows(spec: BasSpec, x, z, agent: AgentModel) -> np.ndarray:
    """BaS control rows ``-(z+beta0)^2 dh/dx B(x)``: ``-> (..., N_s, P)``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    grad, _ = _position_gradient_and_margin(spec, x, agent)
    b_pos = agent.control_matrix(x)[..., list(agent.position_index), :]  # (..., 2, P)
    zeta = np.clip(z + spec.beta0_per_constraint, -BAS_CLAMP, BAS_CLAMP)
    return -(zeta * zeta)[..., None] * np.einsum("...jk,...kp->...jp", grad, b_pos)


def bas_drift(spec: BasSpec, j: int, x, z_j, t, agent: AgentModel):
    z = np.zeros(np.shape(x)[:-1] + (spec.n_constraints,))
    z[..., j] = z_j
    return bas_drift_all(spec, x, z, t, agent)[..., j]


def bas_control_row(spec: BasSpec, j: int, x, z_j, agent: AgentModel):
    z = np.zeros(np.shape(x)[:-1] + (spec.n_constraints,))
    z[..., j] = z_j
    return bas_control_rows(spec, x, z, agent)[..., j, :]


def _block_diag(blocks) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


class AugmentedJointDynamics:
    """Joint SDE of one subsystem with the central agent's barrier states.

    State layout: ``[x_central, z_central, x_neighbor_1, x_neighbor_2, ...]``.
    Control layout: one block of ``P`` channels per member, central first.
    """

    def __init__(self, subsystem: SubsystemSpec, agents: Sequence[AgentModel], bas: Optional[BasSpec]):
        if len(agents) != len(subsystem.members):
            raise DimensionError("need one agent model per subsystem member")
        dims = {(a.state_dim, a.control_dim) for a in agents}
        if len(dims) != 1:
            raise DimensionError(f"agents must be homogeneous in (M, P); got {sorted(dims)}")
        (self.M, self.P), = dims
        self.subsystem = subsystem
        self.agents = tuple(agents)
        self.bas = bas if bas is not None and bas.n_constraints > 0 else None
        self.n_bas = 0 if self.bas is None else self.bas.n_constraints
        m = len(agents)
        self.total_dim = self.M * m + self.n_bas
        self.control_total = self.P * m

        M, ns = self.M, self.n_bas
        self.agent_slices = [slice(0, M)] + [
            slice(M + ns + k * M, M + ns + (k + 1) * M) for k in range(m - 1)
        ]
        self.bas_slice = slice(M, M + ns)
        self.control_slices = [slice(k * self.P, (k + 1) * self.P) for k in range(m)]
        self.joint_noise = _block_diag([a.noise_scale for a in agents])

        self.direct_indices = np.arange(0)
        self.nondirect_indices = np.arange(self.total_dim)
        self.direct_control_constant = False
        # set when probing shows the BaS control rows vanish identically
        self.bas_rows_vanish = False
        self._physical = np.concatenate([np.arange(sl.start, sl.stop) for sl in self.agent_slices])
        self._shared_drift = all(a.drift is agents[0].drift for a in agents)

    @property
    def central_model(self) -> AgentModel:
        return self.agents[0]

    def member_position_indices(self, k: int) -> np.ndarray:
        """Indices of member ``k``'s planar position within the joint state."""
        start = self.agent_slices[k].start
        return start + np.asarray(self.agents[k].position_index)

    def drift(self, Y, t=0.0) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        if Y.shape[-1] != self.total_dim:
            raise DimensionError(f"expected state of length {self.total_dim}, got {Y.shape[-1]}")
        out = np.empty_like(Y)
        lead = Y.shape[:-1]
        if self._shared_drift:
            # one batched call over all members
            g = self.agents[0].drift(Y[..., self._physical].reshape(lead + (len(self.agents), self.M)), t)
            out[..., self._physical] = g.reshape(lead + (-1,))
            g_central = g[..., 0, :]
        else:
            for sl, agent in zip(self.agent_slices, self.agents):
                out[..., sl] = agent.drift(Y[..., sl], t)
            g_central = out[..., self.agent_slices[0]]
        if self.bas is not None:
            out[..., self.bas_slice] = _bas_drift_given(
                self.bas, Y[..., self.agent_slices[0]], Y[..., self.bas_slice], g_central, self.agents[0]
            )
        return out

    def control_matrix(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        out = np.zeros(Y.shape[:-1] + (self.total_dim, self.control_total))
        for sl, csl, agent in zip(self.agent_slices, self.control_slices, self.agents):
            out[..., sl, csl] = agent.control_matrix(Y[..., sl])
        if self.bas is not None:
            out[..., self.bas_slice, self.control_slices[0]] = bas_control_rows(
                self.bas, Y[..., self.agent_slices[0]], Y[..., self.bas_slice], self.agents[0]
            )
        return out

    def apply_control(self, Y, v) -> np.ndarray:
        """``B(Y) @ v`` without forming the full matrix; ``v`` is ``(..., P*m)``."""
        Y = np.asarray(Y, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.zeros(np.broadcast_shapes(Y.shape[:-1], v.shape[:-1]) + (self.total_dim,))
        for sl, csl, agent in zip(self.agent_slices, self.control_slices, self.agents):
            B = agent.control_matrix(Y[..., sl])
            out[..., sl] = np.einsum("...mp,...p->...m", B, v[..., csl])
        if self.bas is not None and not self.bas_rows_vanish:
            Bb = bas_control_rows(
                self.bas, Y[..., self.agent_slices[0]], Y[..., self.bas_slice], self.agents[0]
            )
            out[..., self.bas_slice] = np.einsum("...jp,...p->...j", Bb, v[..., self.control_slices[0]])
        return out

    def constant_control_matrix(self) -> Optional[np.ndarray]:
        """The full ``B`` when it is state independent, else None."""
        if not all(a.constant_control for a in self.agents):
            return None
        if self.bas is not None and not self.bas_rows_vanish:
            return None
        return self.control_matrix(np.zeros(self.total_dim))

    def direct_control_matrix(self, Y) -> np.ndarray:
        return self.control_matrix(Y)[..., self.direct_indices, :]

    def set_partition(self, direct_indices) -> None:
        direct = np.unique(np.asarray(direct_indices, dtype=int))
        if direct.size and (direct.min() < 0 or direct.max() >= self.total_dim):
            raise DimensionError("direct index out of range")
        self.direct_indices = direct
        self.nondirect_indices = np.setdiff1d(np.arange(self.total_dim), direct)
        bas_rows = np.arange(self.bas_slice.start, self.bas_slice.stop)
        self.direct_control_constant = all(a.constant_control for a in self.agents) and not np.any(
            np.isin(bas_rows, direct)
        )

    def split(self, Y):
        """Return ``(Y_nondirect, Y_direct)``."""
        Y = np.asarray(Y)
        return Y[..., self.nondirect_indices], Y[..., self.direct_indices]


def default_probe_states(aug: AugmentedJointDynamics, n: int = 16, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    probes = rng.normal(scale=10.0, size=(n, aug.total_dim))
    if aug.n_bas:
        probes[:, aug.bas_slice] = rng.uniform(0.01, 1.0, size=(n, aug.n_bas))
    return probes


def partition(aug: AugmentedJointDynamics, probe_states=None):
    """Rows whose control-matrix entries vanish at every probe are non-direct."""
    probes = default_probe_states(aug) if probe_states is None else np.atleast_2d(probe_states)
    if probes.shape[0] == 0:
        raise ValueError("partition needs at least one probe state")
    B = aug.control_matrix(probes)
    nonzero = np.any(np.abs(B) >= ZERO_ROW_TOL, axis=(0, 2))
    direct = np.flatnonzero(nonzero)
    nondirect = np.flatnonzero(~nonzero)
    return direct, nondirect


def assemble_augmented(
    sub: SubsystemSpec,
    agents: Sequence[AgentModel],
    spec: Optional[BasSpec] = None,
    direct_override=None,
    probe_states=None,
) -> AugmentedJointDynamics:
    aug = AugmentedJointDynamics(sub, agents, spec)
    if direct_override is not None:
        aug.set_partition(direct_override)
    else:
        direct, _ = partition(aug, probe_states)
        aug.set_partition(direct)
        bas_rows = np.arange(aug.bas_slice.start, aug.bas_slice.stop)
        aug.bas_rows_vanish = aug.bas is not None and not np.any(np.isin(bas_rows, direct))
    return aug
