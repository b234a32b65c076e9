"""Path-integral control estimate from uncontrolled rollouts of a subsystem.

Rollouts follow the uncontrolled augmented diffusion. Every rollout gets a
generalized path value; the control is the weighted average of the per-path
initial control variables, mapped back through the direct control matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtri

from .cost import cancellation_weights, state_cost_gradient_direct
from .dynamics import AugmentedJointDynamics

log = logging.getLogger(__name__)

PD_TOL = 1e-12
REJECT_WARN_FRACTION = 0.5


class DegenerateDiffusion(ValueError):
    """The directly actuated diffusion matrix is not positive definite."""


class ControllerFailure(RuntimeError):
    """Every rollout was rejected; no control estimate exists."""


@dataclass(frozen=True)
class SamplerConfig:
    """Rollout settings.

    ``weighting`` picks the importance weights: ``"feynman-kac"`` keeps only
    the cost part of the path value (the uncontrolled sampler already
    realizes the Gaussian path density), ``"path-value"`` exponentiates the
    full generalized path value.
    """

    n_samples: int = 2000
    horizon_steps: int = 40
    eps: float = 0.05
    seed: int = 0
    horizon_mode: str = "shrink-to-tf"
    weighting: str = "feynman-kac"
    chunk_size: Optional[int] = None

    def __post_init__(self):
        if self.n_samples < 1 or self.horizon_steps < 1:
            raise ValueError("n_samples and horizon_steps must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.horizon_mode not in ("shrink-to-tf", "fixed"):
            raise ValueError("horizon_mode must be 'shrink-to-tf' or 'fixed'")
        if self.weighting not in ("feynman-kac", "path-value"):
            raise ValueError("weighting must be 'feynman-kac' or 'path-value'")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def steps_at(self, t: float, t_final: Optional[float]) -> int:
        """Horizon length for a query at time ``t``."""
        if self.horizon_mode == "fixed" or t_final is None:
            return self.horizon_steps
        remaining = int(math.floor((t_final - t) / self.eps + 1e-9))
        return max(1, min(self.horizon_steps, remaining))


@dataclass
class PathBatch:
    """Uncontrolled rollouts from one query state.

    ``states`` has shape ``(n, K+1, D)``; ``drifts`` caches the drift at each
    step, shape ``(n, K, D)``.
    """

    states: np.ndarray
    drifts: np.ndarray
    eps: float
    t0: float = 0.0
    rejected: np.ndarray = None
    path_values: Optional[np.ndarray] = None
    initial_controls: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rejected is None:
            self.rejected = ~np.all(np.isfinite(self.states), axis=(1, 2))

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1


@dataclass
class ControlEstimate:
    joint_control: np.ndarray
    local_control: np.ndarray
    effective_samples: float
    diagnostics: dict = field(default_factory=dict)


def noise_key(seed: int, stream=()) -> np.ndarray:
    return np.random.SeedSequence([int(seed), *[int(s) for s in stream]]).generate_state(2, np.uint64)


def standard_normals(key, first_sample: int, n: int, per_sample: int) -> np.ndarray:
    """Standard normals for samples ``first_sample .. first_sample+n-1``.

    Each sample owns a fixed range of Philox counters, so any chunking of
    the sample range reproduces the same numbers.
    """
    blocks = -(-per_sample // 4)
    gen = np.random.Philox(key=key, counter=first_sample * blocks)
    raw = gen.random_raw(n * blocks * 4).reshape(n, blocks * 4)[:, :per_sample]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def rollout_batch(
    aug: AugmentedJointDynamics,
    Y0,
    n: int,
    K: int,
    eps: float,
    key,
    t0: float = 0.0,
    first_sample: int = 0,
) -> PathBatch:
    """Euler-Maruyama rollouts with zero control."""
    Y0 = np.asarray(Y0, dtype=float)
    D, Pm = aug.total_dim, aug.control_total
    xi = standard_normals(key, first_sample, n, K * Pm).reshape(n, K, Pm)
    scale = np.diag(aug.joint_noise) * math.sqrt(eps)
    states = np.empty((n, K + 1, D))
    drifts = np.empty((n, K, D))
    states[:, 0] = Y0
    Y = states[:, 0]
    B = aug.constant_control_matrix()
    if B is not None:
        kicks = (xi * scale) @ B.T
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            g = aug.drift(Y, t0 + k * eps)
            drifts[:, k] = g
            kick = kicks[:, k] if B is not None else aug.apply_control(Y, xi[:, k] * scale)
            Y = Y + g * eps + kick
            states[:, k + 1] = Y
    return PathBatch(states=states, drifts=drifts, eps=eps, t0=t0)


def rollout_uncontrolled(aug, Y0, cfg: SamplerConfig, sample_index: int, stream=(), t0: float = 0.0):
    """A single rollout; identical to row ``sample_index`` of a full batch."""
    batch = rollout_batch(
        aug, Y0, 1, cfg.horizon_steps, cfg.eps, noise_key(cfg.seed, stream), t0, first_sample=sample_index
    )
    return batch


def h_matrix(aug: AugmentedJointDynamics, Y) -> np.ndarray:
    """Directly actuated diffusion ``B_d S S^T B_d^T``; batched over leading axes."""
    Bd = aug.direct_control_matrix(Y)
    sst = aug.joint_noise @ aug.joint_noise.T
    H = Bd @ sst @ np.swapaxes(Bd, -1, -2)
    _check_pd(H)
    return H


def _check_pd(H):
    if H.shape[-1] == 0:
        raise DegenerateDiffusion("no directly actuated coordinates")
    eig = np.linalg.eigvalsh(H)
    if np.any(~np.isfinite(eig)) or np.min(eig) < PD_TOL:
        raise DegenerateDiffusion(f"diffusion matrix not positive definite (min eigenvalue {np.min(eig):.3e})")


class _Diffusion:
    """Factorized H along a batch of paths, shared when H is state independent."""

    def __init__(self, aug: AugmentedJointDynamics, states: np.ndarray):
        if aug.direct_control_constant:
            H = h_matrix(aug, states[0, 0])
            self.L = np.linalg.cholesky(H)
            self.constant = True
        else:
            H = h_matrix(aug, states)
            self.L = np.linalg.cholesky(H)
            self.constant = False
        diag = np.diagonal(self.L, axis1=-2, axis2=-1)
        self.logdet = 2.0 * np.sum(np.log(diag), axis=-1)

    def solve(self, k_slice, rhs):
        """``H^{-1} rhs`` for steps ``k_slice``; rhs shape ``(n, k, d)``."""
        if self.constant:
            flat = rhs.reshape(-1, rhs.shape[-1]).T
            return cho_solve((self.L, True), flat, check_finite=False).T.reshape(rhs.shape)
        L = self.L[:, k_slice]
        y = np.linalg.solve(L, rhs[..., None])
        return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]

    def quadratic_sum(self, rhs):
        """Per-sample ``sum_k rhs_k^T H_k^{-1} rhs_k``."""
        if self.constant:
            w = solve_triangular(self.L, rhs.reshape(-1, rhs.shape[-1]).T, lower=True, check_finite=False)
            return np.sum((w * w).T.reshape(rhs.shape), axis=(1, 2))
        return np.sum(rhs * self.solve(slice(0, rhs.shape[1]), rhs), axis=(1, 2))

    def logdet_sum(self, n, K):
        if self.constant:
            return np.full(n, K * float(self.logdet))
        return np.sum(self.logdet[:, :K], axis=1)


def _innovations(aug, batch: PathBatch) -> np.ndarray:
    d = aug.direct_indices
    Yd = batch.states[..., d]
    return (Yd[:, 1:] - Yd[:, :-1]) / batch.eps - batch.drifts[..., d]


def path_value_terms(aug: AugmentedJointDynamics, cost, batch: PathBatch, lam: float) -> dict:
    """The four contributions to the generalized path value, per sample."""
    n, K, eps = batch.n_samples, batch.horizon, batch.eps
    states = batch.states
    with np.errstate(over="ignore", invalid="ignore"):
        q = np.asarray(cost.running(states[:, :K], batch.t0), dtype=float).reshape(n, K)
        phi = np.asarray(cost.terminal(states[:, K]), dtype=float).reshape(n)
        alpha = _innovations(aug, batch)
        good = ~batch.rejected
        diff = _Diffusion(aug, states[good] if np.any(good) else states)
        quad = np.full(n, np.inf)
        logdet = np.full(n, np.inf)
        if np.any(good):
            a = alpha[good]
            quad[good] = diff.quadratic_sum(a)
            logdet[good] = diff.logdet_sum(a.shape[0], K)
    return {
        "terminal": phi / lam,
        "state": (eps / lam) * np.sum(q, axis=1),
        "logdet": 0.5 * logdet,
        "quadratic": (eps / (2.0 * lam)) * quad,
    }


def path_value(aug, cost, batch: PathBatch, lam: float) -> np.ndarray:
    terms = path_value_terms(aug, cost, batch, lam)
    return terms["terminal"] + terms["state"] + terms["logdet"] + terms["quadratic"]


def initial_control_variable(aug, cost, batch: PathBatch, lam: float) -> np.ndarray:
    """Per-path ``-(eps/lam) grad_d q(Y0) + H0^{-1} alpha0``; shape ``(n, d)``."""
    if batch.horizon < 1:
        raise ValueError("need at least one rollout step")
    Y0 = batch.states[0, 0]
    grad = state_cost_gradient_direct(cost, Y0, aug.direct_indices, batch.t0)
    H0 = h_matrix(aug, Y0)
    L = np.linalg.cholesky(H0)
    alpha0 = _innovations(aug, PathBatch(batch.states[:, :2], batch.drifts[:, :1], batch.eps, batch.t0))[:, 0]
    return -(batch.eps / lam) * grad + cho_solve((L, True), alpha0.T, check_finite=False).T


def softmax_weights(values, mask=None) -> np.ndarray:
    """``exp(-(v - min v))`` normalized over the unmasked entries."""
    values = np.asarray(values, dtype=float)
    ok = np.isfinite(values) if mask is None else (mask & np.isfinite(values))
    w = np.zeros_like(values)
    if not np.any(ok):
        raise ControllerFailure("all rollouts rejected")
    shifted = values[ok] - np.min(values[ok])
    e = np.exp(-shifted)
    w[ok] = e / np.sum(e)
    return w


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def _weight_exponent(terms: dict, weighting: str) -> np.ndarray:
    if weighting == "feynman-kac":
        return terms["terminal"] + terms["state"]
    return terms["terminal"] + terms["state"] + terms["logdet"] + terms["quadratic"]


def sample_paths(aug, Y0, cfg: SamplerConfig, t0=0.0, t_final=None, stream=()) -> PathBatch:
    K = cfg.steps_at(t0, t_final)
    key = noise_key(cfg.seed, stream)
    chunk = cfg.chunk_size or cfg.n_samples
    parts = [
        rollout_batch(aug, Y0, min(chunk, cfg.n_samples - s), K, cfg.eps, key, t0, first_sample=s)
        for s in range(0, cfg.n_samples, chunk)
    ]
    if len(parts) == 1:
        return parts[0]
    return PathBatch(
        states=np.concatenate([p.states for p in parts]),
        drifts=np.concatenate([p.drifts for p in parts]),
        eps=cfg.eps,
        t0=t0,
    )


def combine(aug: AugmentedJointDynamics, Y0, weights, initial_controls) -> np.ndarray:
    """Map the weighted initial control variable back to joint controls."""
    lam_rinv = aug.joint_noise @ aug.joint_noise.T
    Bd0 = aug.direct_control_matrix(np.asarray(Y0, dtype=float))
    u_tilde = weights @ np.where(np.isfinite(initial_controls), initial_controls, 0.0)
    return lam_rinv @ Bd0.T @ u_tilde


def estimate_control(
    aug: AugmentedJointDynamics,
    cost,
    Y0,
    cfg: SamplerConfig,
    lam: float,
    t0: float = 0.0,
    t_final: Optional[float] = None,
    stream=(),
    batch: Optional[PathBatch] = None,
) -> ControlEstimate:
    """Safe joint control of one subsystem at ``Y0``; local control is the central block."""
    Y0 = np.asarray(Y0, dtype=float)
    # the estimator uses lam R^{-1} = sigma sigma^T; this also rejects zero-noise channels
    cancellation_weights(aug.joint_noise, lam)
    if batch is None:
        batch = sample_paths(aug, Y0, cfg, t0, t_final, stream)
    terms = path_value_terms(aug, cost, batch, lam)
    batch.path_values = terms["terminal"] + terms["state"] + terms["logdet"] + terms["quadratic"]
    exponent = _weight_exponent(terms, cfg.weighting)
    batch.weights = softmax_weights(exponent, ~batch.rejected)
    batch.initial_controls = initial_control_variable(aug, cost, batch, lam)
    joint = combine(aug, Y0, batch.weights, batch.initial_controls)

    n_rejected = int(np.sum(batch.rejected))
    finite = batch.path_values[np.isfinite(batch.path_values)]
    diagnostics = {
        "min_path_value": float(np.min(finite)) if finite.size else math.inf,
        "mean_path_value": float(np.mean(finite)) if finite.size else math.inf,
        "rejected": n_rejected,
        "horizon_steps": batch.horizon,
    }
    if n_rejected > REJECT_WARN_FRACTION * batch.n_samples:
        diagnostics["warning"] = f"{n_rejected}/{batch.n_samples} rollouts rejected"
        log.warning(diagnostics["warning"])
    return ControlEstimate(
        joint_control=joint,
        local_control=joint[aug.control_slices[0]].copy(),
        effective_samples=effective_sample_size(batch.weights),
        diagnostics=diagnostics,
    )
