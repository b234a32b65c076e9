"""Closed-loop Euler-Maruyama simulation of the UAV team under any controller."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import CbfFilterConfig, PenaltyCostConfig, PenaltySubsystemCost, cbf_filter
from .cost import SubsystemCost, TerminalCost
from .dynamics import (
    AgentModel,
    BarrierConstraint,
    BasSpec,
    SafetyViolation,
    UnicycleParams,
    assemble_augmented,
    bas_control_rows,
    bas_drift_all,
    bas_init,
    barrier_values,
    margins,
    unicycle_model,
)
from .pic import ControllerFailure, SamplerConfig, estimate_control
from .topology import AgentGraph, factorize

log = logging.getLogger(__name__)

CONTROLLERS = ("bas-pic", "penalty-pic", "cbf-npo", "cbf-po")
CONTROLLER_DOMAIN = 1
ENVIRONMENT_DOMAIN = 2


@dataclass(frozen=True)
class PenaltySettings:
    weight: float = 50.0
    shape: str = "indicator"


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    name: str
    graph: AgentGraph
    starts: np.ndarray
    goals: np.ndarray
    obstacles: tuple
    bas: BasSpec
    costs: tuple
    controller: str = "bas-pic"
    noise: UnicycleParams = UnicycleParams()
    t_final: float = 20.0
    dt: float = 0.05
    lam: float = 0.1
    sampler: SamplerConfig = SamplerConfig()
    terminal: TerminalCost = TerminalCost()
    penalty: PenaltySettings = PenaltySettings()
    cbf: CbfFilterConfig = CbfFilterConfig()
    n_episodes: int = 1
    master_seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        starts = np.asarray(self.starts, dtype=float).reshape(self.graph.n_agents, 4)
        goals = np.asarray(self.goals, dtype=float).reshape(self.graph.n_agents, 2)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "costs", tuple(self.costs))
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if len(self.costs) != self.graph.n_agents:
            raise ValueError("need one subsystem cost per agent")
        if self.dt <= 0 or self.t_final <= 0:
            raise ValueError("dt and t_final must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"dt={self.dt} must divide t_final={self.t_final}")
        for i, x0 in enumerate(starts):
            h = margins(self.bas, x0[:2]) if self.bas.n_constraints else np.array([1.0])
            if np.any(h <= 0):
                raise SafetyViolation(f"start of agent {i} at {x0[:2]} is not strictly inside the safe set")

    @property
    def n_agents(self) -> int:
        return self.graph.n_agents

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def with_controller(self, controller: str) -> "ScenarioConfig":
        return replace(self, controller=controller)

    def agent_model(self) -> AgentModel:
        model = unicycle_model(self.noise)
        if self.deterministic:
            model = model.with_noise(np.zeros((2, 2)))
        return model

    def coordination_pairs(self) -> list:
        pairs = set()
        for i, c in enumerate(self.costs):
            if c.coord_weight and c.coord_partner is not None:
                pairs.add(tuple(sorted((i, c.coord_partner))))
        return sorted(pairs)


@dataclass
class TrajectoryLog:
    t: np.ndarray
    states: np.ndarray  # (T+1, N, 4)
    bas: np.ndarray  # (T+1, N, N_s)
    controls: np.ndarray  # (T+1, N, 2); last row is nan
    margins: np.ndarray  # (T+1, N, N_s)
    diagnostics: list = field(default_factory=list)


@dataclass
class EpisodeMetrics:
    safe: bool
    min_margin: float
    goal_errors: list
    mean_pair_distance: float
    max_abs_bas: float
    cbf_infeasible_steps: int = 0
    controller_failures: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "safe": bool(self.safe),
            "min_margin": float(self.min_margin),
            "goal_errors": [float(e) for e in self.goal_errors],
            "mean_pair_distance": float(self.mean_pair_distance),
            "max_abs_bas": float(self.max_abs_bas),
            "cbf_infeasible_steps": int(self.cbf_infeasible_steps),
            "controller_failures": int(self.controller_failures),
        }


def step(model: AgentModel, bas: BasSpec, X, Z, U, dt, xi):
    """One Euler-Maruyama step for all agents and their barrier states.

    ``xi`` holds standard normals of shape ``(N, P)``; the same increments
    drive the physical state and the BaS.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    dW = math.sqrt(dt) * np.asarray(xi, dtype=float)
    v = np.asarray(U, dtype=float) * dt + dW @ model.noise_scale.T
    B = model.control_matrix(X)
    X_next = X + model.drift(X, 0.0) * dt + np.einsum("nmp,np->nm", B, v)
    if bas.n_constraints:
        gb = bas_drift_all(bas, X, Z, 0.0, model)
        Bb = bas_control_rows(bas, X, Z, model)
        Z_next = Z + gb * dt + np.einsum("njp,np->nj", Bb, v)
    else:
        Z_next = Z
    return X_next, Z_next


class PicTeamController:
    """Per-agent subsystem estimates; agent i applies only its own block."""

    def __init__(self, cfg: ScenarioConfig, augmented: bool, penalty_weight: float):
        self.cfg = cfg
        self.augmented = augmented
        model = cfg.agent_model()
        self.subsystems = factorize(cfg.graph, model.state_dim)
        self.augs, self.costs = [], []
        for sub in self.subsystems:
            agents = [model] * len(sub.members)
            if augmented:
                aug = assemble_augmented(sub, agents, cfg.bas)
                cost = SubsystemCost(cfg.costs[sub.central], aug, _terminal_for(cfg, sub.central))
            else:
                aug = assemble_augmented(sub, agents, None)
                pen = PenaltyCostConfig(
                    cfg.costs[sub.central], penalty_weight, cfg.penalty.shape, cfg.obstacles
                )
                cost = PenaltySubsystemCost(pen, aug, _terminal_for(cfg, sub.central))
            self.augs.append(aug)
            self.costs.append(cost)

    def query_state(self, i: int, X, Z) -> np.ndarray:
        sub = self.subsystems[i]
        parts = [X[i]]
        if self.augmented and self.augs[i].n_bas:
            parts.append(Z[i])
        parts += [X[j] for j in sub.neighbors]
        return np.concatenate(parts)

    def __call__(self, t, k, X, Z, episode_seed):
        U = np.zeros((self.cfg.n_agents, 2))
        diag = {"failures": 0, "ess": []}
        for i in range(self.cfg.n_agents):
            Y0 = self.query_state(i, X, Z)
            try:
                est = estimate_control(
                    self.augs[i],
                    self.costs[i],
                    Y0,
                    self.cfg.sampler,
                    self.cfg.lam,
                    t0=t,
                    t_final=self.cfg.t_final,
                    stream=(CONTROLLER_DOMAIN, episode_seed, k, i),
                )
            except ControllerFailure:
                diag["failures"] += 1
                continue
            U[i] = est.local_control
            diag["ess"].append(est.effective_samples)
        return U, diag


class CbfTeamController:
    """Penalty (or no-penalty) PIC baseline passed through a HOCBF-QP filter."""

    def __init__(self, cfg: ScenarioConfig, penalize: bool):
        self.cfg = cfg
        self.base = PicTeamController(cfg, augmented=False, penalty_weight=cfg.penalty.weight if penalize else 0.0)

    def __call__(self, t, k, X, Z, episode_seed):
        U, diag = self.base(t, k, X, Z, episode_seed)
        diag["infeasible"] = 0
        for i in range(self.cfg.n_agents):
            U[i], info = cbf_filter(U[i], X[i], self.cfg.obstacles, self.cfg.cbf, return_info=True)
            diag["infeasible"] += int(info["infeasible"])
        return U, diag


def _terminal_for(cfg: ScenarioConfig, i: int) -> TerminalCost:
    if cfg.terminal.mode == "zero":
        return cfg.terminal
    return replace(cfg.terminal, goal=cfg.goals[i])


def make_controller(cfg: ScenarioConfig):
    if cfg.controller == "bas-pic":
        return PicTeamController(cfg, augmented=True, penalty_weight=0.0)
    if cfg.controller == "penalty-pic":
        return PicTeamController(cfg, augmented=False, penalty_weight=cfg.penalty.weight)
    if cfg.controller == "cbf-npo":
        return CbfTeamController(cfg, penalize=False)
    return CbfTeamController(cfg, penalize=True)


def episode_seeds(master_seed: int, n: int) -> list:
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(int(master_seed)).spawn(n)]


def simulate(cfg: ScenarioConfig, controller, episode_seed: int = 0) -> TrajectoryLog:
    """Run one episode with ``controller(t, k, X, Z, seed) -> (U, diag)``."""
    model = cfg.agent_model()
    N, T = cfg.n_agents, cfg.n_steps
    ns = cfg.bas.n_constraints
    X = cfg.starts.copy()
    Z = np.array([bas_init(cfg.bas, x) for x in X]).reshape(N, ns)
    env = np.random.default_rng(np.random.SeedSequence([ENVIRONMENT_DOMAIN, int(episode_seed)]))

    log_ = TrajectoryLog(
        t=cfg.dt * np.arange(T + 1),
        states=np.full((T + 1, N, 4), np.nan),
        bas=np.full((T + 1, N, ns), np.nan),
        controls=np.full((T + 1, N, 2), np.nan),
        margins=np.full((T + 1, N, ns), np.nan),
    )
    log_.states[0], log_.bas[0], log_.margins[0] = X, Z, margins(cfg.bas, X[:, :2])
    for k in range(T):
        t = k * cfg.dt
        U, diag = controller(t, k, X, Z, episode_seed)
        xi = env.standard_normal((N, 2))
        X, Z = step(model, cfg.bas, X, Z, U, cfg.dt, xi)
        log_.controls[k] = U
        log_.diagnostics.append(diag)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            log.warning("non-finite state at step %d; episode terminated", k + 1)
            log_.diagnostics[-1]["terminated"] = True
            log_.states[k + 1] = X
            break
        log_.states[k + 1], log_.bas[k + 1] = X, Z
        log_.margins[k + 1] = margins(cfg.bas, X[:, :2])
    return log_


def episode_metrics(cfg: ScenarioConfig, traj: TrajectoryLog, seed: int = 0) -> EpisodeMetrics:
    m = traj.margins
    min_margin = float(np.nanmin(m)) if m.size and np.any(np.isfinite(m)) else math.inf
    if m.size and np.any(np.isnan(m)):
        min_margin = -math.inf  # terminated early: treat as unsafe
    final = traj.states[-1, :, :2]
    goal_errors = np.linalg.norm(final - cfg.goals, axis=1)
    pairs = cfg.coordination_pairs()
    if pairs:
        d = [np.linalg.norm(traj.states[:, i, :2] - traj.states[:, j, :2], axis=-1) for i, j in pairs]
        mean_pair = float(np.nanmean(d))
    else:
        mean_pair = math.nan
    max_bas = float(np.nanmax(np.abs(traj.bas))) if traj.bas.size else 0.0
    return EpisodeMetrics(
        safe=bool(min_margin > 0),
        min_margin=min_margin,
        goal_errors=[float(e) for e in goal_errors],
        mean_pair_distance=mean_pair,
        max_abs_bas=max_bas,
        cbf_infeasible_steps=int(sum(d.get("infeasible", 0) > 0 for d in traj.diagnostics)),
        controller_failures=int(sum(d.get("failures", 0) for d in traj.diagnostics)),
        seed=seed,
    )


def run_episode(cfg: ScenarioConfig, episode_seed: int = 0):
    traj = simulate(cfg, make_controller(cfg), episode_seed)
    return traj, episode_metrics(cfg, traj, episode_seed)


def _run_one(args):
    cfg, seed = args
    return run_episode(cfg, seed)


def aggregate(metrics: list) -> dict:
    n = len(metrics)
    errs = np.array([m.goal_errors for m in metrics], dtype=float)
    pair = np.array([m.mean_pair_distance for m in metrics], dtype=float)
    return {
        "episodes": n,
        "safe_rate": sum(m.safe for m in metrics) / n,
        "n_safe": int(sum(m.safe for m in metrics)),
        "mean_goal_error": float(np.mean(errs)),
        "max_goal_error": float(np.max(errs)),
        "mean_pair_distance": float(np.nanmean(pair)) if np.any(np.isfinite(pair)) else math.nan,
        "min_margin": float(min(m.min_margin for m in metrics)),
    }


@dataclass
class BatchReport:
    scenario: str
    controller: str
    seeds: list
    metrics: list
    trajectories: list

    @property
    def summary(self) -> dict:
        return aggregate(self.metrics)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "controller": self.controller,
            "aggregate": self.summary,
            "episodes": [m.to_dict() for m in self.metrics],
        }


def run_batch(cfg: ScenarioConfig, workers: int = 1, seeds=None) -> BatchReport:
    seeds = list(seeds) if seeds is not None else episode_seeds(cfg.master_seed, cfg.n_episodes)
    jobs = [(cfg, s) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return BatchReport(
        scenario=cfg.name,
        controller=cfg.controller,
        seeds=seeds,
        metrics=[r[1] for r in results],
        trajectories=[r[0] for r in results],
    )


def goal_seeking_controller(
    cfg: ScenarioConfig,
    speed: float = 2.5,
    k_v: float = 1.0,
    k_phi: float = 2.0,
    clearance: float = 2.0,
    influence: float = 4.0,
):
    """Deterministic nominal controller that steers around obstacles.

    The heading reference blends the goal direction with a tangential push
    around obstacles within ``influence`` metres of their inflated edge; a
    HOCBF-QP on obstacles inflated by ``clearance`` backs it up. Used to
    produce clean reference trajectories, not as a competing method.
    """
    inflated = tuple(BarrierConstraint(o.center, o.radius + clearance, o.id) for o in cfg.obstacles)

    def control(t, k, X, Z, seed):
        U = np.zeros((cfg.n_agents, 2))
        for i, x in enumerate(X):
            to_goal = cfg.goals[i] - x[:2]
            dist = np.linalg.norm(to_goal)
            direction = to_goal / max(dist, 1e-9)
            for o in inflated:
                away = x[:2] - o.center
                d = np.linalg.norm(away)
                gap = d - o.radius
                if gap < influence:
                    n = away / d
                    tangent = np.array([-n[1], n[0]])
                    if tangent @ direction < 0:
                        tangent = -tangent
                    w = (1.0 - max(gap, 0.0) / influence) ** 2
                    direction = direction + 2.0 * w * tangent + w * n
            heading = math.atan2(direction[1], direction[0])
            v_ref = min(speed, dist)
            err = math.atan2(math.sin(heading - x[3]), math.cos(heading - x[3]))
            u_nom = np.clip([k_v * (v_ref - x[2]), k_phi * err], -2.0, 2.0)
            U[i] = cbf_filter(u_nom, x, inflated, cfg.cbf)
        return U, {}

    return control


def verify_manifold(cfg: ScenarioConfig, dt: float = 1e-3, margin_floor: float = 1e-3) -> float:
    """Largest ``|z - (1/h - beta0)|`` along a noise-free closed-loop run.

    Only steps where every margin exceeds ``margin_floor`` are scored.
    """
    det = replace(cfg, deterministic=True, dt=dt)
    traj = simulate(det, goal_seeking_controller(det))
    pos = traj.states[..., :2]
    ok = np.all(traj.margins > margin_floor, axis=-1)
    target = barrier_values(det.bas, pos)
    dev = np.abs(traj.bas - target)
    dev = np.where(ok[..., None], dev, 0.0)
    return float(np.nanmax(dev)) if dev.size else 0.0


TRAJECTORY_COLUMNS_DOC = """t, then for each agent i: x_i, y_i, v_i, phi_i; then for each agent i and
obstacle j: h_i_j; then for each agent i and constraint j: z_i_j; then for each
agent i: u_i, w_i (control held over [t, t+dt); blank on the final row)."""


def trajectory_header(cfg: ScenarioConfig) -> list:
    N, ns = cfg.n_agents, cfg.bas.n_constraints
    cols = ["t"]
    cols += [f"{c}_{i}" for i in range(N) for c in ("x", "y", "v", "phi")]
    cols += [f"h_{i}_{j}" for i in range(N) for j in range(ns)]
    cols += [f"z_{i}_{j}" for i in range(N) for j in range(ns)]
    cols += [f"{c}_{i}" for i in range(N) for c in ("u", "w")]
    return cols


def write_trajectory(path, cfg: ScenarioConfig, traj: TrajectoryLog) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trajectory_header(cfg))
        for k, t in enumerate(traj.t):
            row = [t, *traj.states[k].ravel(), *traj.margins[k].ravel(), *traj.bas[k].ravel()]
            row += ["" if np.isnan(u) else u for u in traj.controls[k].ravel()]
            writer.writerow([f"{v:.10g}" if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_trajectory(path) -> dict:
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) if v != "" else math.nan for v in r] for r in reader]
    data = np.array(rows)
    return {name: data[:, k] for k, name in enumerate(header)}


def write_metrics(path, report: BatchReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, allow_nan=True))
    return path
