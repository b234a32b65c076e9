"""YAML scenario files -> validated :class:`ScenarioConfig`."""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

from .baselines import CbfFilterConfig
from .cost import GoalCoordCost, TerminalCost, default_bas_targets, freeze_episode_constants
from .dynamics import BarrierConstraint, BasSpec, SafetyViolation, UnicycleParams
from .pic import SamplerConfig
from .sim import PenaltySettings, ScenarioConfig
from .topology import AgentGraph, TopologyError

COST_KEYS = (
    "goal_weight",
    "coord_weight",
    "coord_partner",
    "bas_weight",
    "indicator_weight",
    "indicator_threshold",
    "indicator_mode",
    "d_max",
    "d_pair_max",
    "bas_targets",
)
# keys accepted even when absent from the file being overridden
OPTIONAL_KEYS = {
    "sampler.eps",
    "sampler.chunk_size",
    "bas.beta0",
    "deterministic",
}


class ConfigError(ValueError):
    """A scenario file is malformed; the message starts with the field path."""


def bundled_scenarios() -> dict:
    root = resources.files("safepic") / "scenarios"
    return {p.name[:-5]: p for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve_path(name_or_path) -> Path:
    scenarios = bundled_scenarios()
    if str(name_or_path) in scenarios:
        return Path(str(scenarios[str(name_or_path)]))
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"config: no such file or bundled scenario {name_or_path!r} (bundled: {sorted(scenarios)})")
    return path


def load_raw(name_or_path) -> dict:
    with resolve_path(name_or_path).open() as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    return raw


def _flatten(d, prefix="") -> set:
    keys = set()
    if isinstance(d, dict):
        for k, v in d.items():
            path = f"{prefix}{k}"
            keys.add(path)
            keys |= _flatten(v, path + ".")
    elif isinstance(d, list):
        for i, v in enumerate(d):
            path = f"{prefix}{i}"
            keys.add(path)
            keys |= _flatten(v, path + ".")
    return keys


def valid_override_keys(raw: dict) -> set:
    keys = _flatten(raw) | OPTIONAL_KEYS
    for i, _ in enumerate(raw.get("costs", [])):
        keys |= {f"costs.{i}.{k}" for k in COST_KEYS}
    keys |= {f"cost_defaults.{k}" for k in COST_KEYS}
    return keys


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML."""
    raw = copy.deepcopy(raw)
    valid = valid_override_keys(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in valid:
            raise ConfigError(f"override {key!r}: unknown key; valid keys: {', '.join(sorted(valid))}")
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node[int(p)] if isinstance(node, list) else node.setdefault(p, {})
        last = parts[-1]
        parsed = yaml.safe_load(value)
        if isinstance(node, list):
            node[int(last)] = parsed
        else:
            node[last] = parsed
    return raw


def _require(d: dict, key: str, path: str):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{path}{key}: missing required field")
    return d[key]


def _vector(value, n, path):
    try:
        arr = np.asarray(value, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a list of numbers") from None
    if arr.shape != (n,):
        raise ConfigError(f"{path}: expected {n} numbers, got {arr.size}")
    return arr


def build_config(raw: dict) -> ScenarioConfig:
    name = raw.get("name", "scenario")
    graph_raw = _require(raw, "graph", "")
    n = int(_require(graph_raw, "n_agents", "graph."))
    try:
        if graph_raw.get("complete"):
            graph = AgentGraph.complete(n)
        else:
            graph = AgentGraph.from_edges(n, graph_raw.get("edges", []))
    except TopologyError as exc:
        raise ConfigError(f"graph: {exc}") from None

    agents = _require(raw, "agents", "")
    if len(agents) != n:
        raise ConfigError(f"agents: expected {n} entries, got {len(agents)}")
    starts, goals = [], []
    for i, a in enumerate(agents):
        goal = _vector(_require(a, "goal", f"agents.{i}."), 2, f"agents.{i}.goal")
        start_raw = np.asarray(_require(a, "start", f"agents.{i}."), dtype=float).reshape(-1)
        if start_raw.size == 2:
            heading = float(np.arctan2(goal[1] - start_raw[1], goal[0] - start_raw[0]))
            start_raw = np.array([*start_raw, 0.0, heading])
        starts.append(_vector(start_raw, 4, f"agents.{i}.start"))
        goals.append(goal)
    starts, goals = np.array(starts), np.array(goals)

    obstacles = []
    for j, o in enumerate(raw.get("obstacles", []) or []):
        center = _vector(_require(o, "center", f"obstacles.{j}."), 2, f"obstacles.{j}.center")
        radius = float(_require(o, "radius", f"obstacles.{j}."))
        if radius <= 0:
            raise ConfigError(f"obstacles.{j}.radius: must be positive")
        obstacles.append(BarrierConstraint(center, radius, id=j))

    bas_raw = raw.get("bas", {}) or {}
    beta0 = bas_raw.get("beta0")
    if beta0 is not None:
        beta0 = _vector(beta0, len(obstacles), "bas.beta0")
    try:
        bas = BasSpec(float(bas_raw.get("gamma", 0.5)), tuple(obstacles), beta0)
    except SafetyViolation as exc:
        raise ConfigError(f"bas.beta0: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"bas: {exc}") from None

    for i, x0 in enumerate(starts):
        for o in obstacles:
            if np.sum((x0[:2] - o.center) ** 2) - o.radius**2 <= 0:
                raise ConfigError(f"agents.{i}.start: inside or on obstacle {o.id}")

    defaults = raw.get("cost_defaults", {}) or {}
    costs_raw = _require(raw, "costs", "")
    if len(costs_raw) != n:
        raise ConfigError(f"costs: expected {n} entries, got {len(costs_raw)}")
    pairs = []
    for i, c in enumerate(costs_raw):
        partner = c.get("coord_partner", defaults.get("coord_partner"))
        if partner is not None:
            if not 0 <= int(partner) < n or int(partner) == i:
                raise ConfigError(f"costs.{i}.coord_partner: invalid agent index {partner}")
            pairs.append((i, int(partner)))
    d_max_auto, d_pair_auto = freeze_episode_constants(starts, goals, pairs)
    costs = []
    for i, c in enumerate(costs_raw):
        unknown = set(c) - set(COST_KEYS)
        if unknown:
            raise ConfigError(f"costs.{i}: unknown field(s) {sorted(unknown)}")
        merged = {**defaults, **c}
        partner = merged.get("coord_partner")
        partner = None if partner is None else int(partner)
        d_max = merged.get("d_max", "auto")
        d_pair = merged.get("d_pair_max", "auto")
        targets = merged.get("bas_targets", "auto")
        if targets == "auto":
            targets = default_bas_targets(bas, goals[i]) if obstacles else None
        elif targets is not None:
            targets = _vector(targets, len(obstacles), f"costs.{i}.bas_targets")
        try:
            costs.append(
                GoalCoordCost(
                    goal=goals[i],
                    goal_weight=float(merged.get("goal_weight", 0.0)),
                    d_max=float(d_max_auto[i]) if d_max == "auto" else float(d_max),
                    coord_weight=float(merged.get("coord_weight", 0.0)),
                    coord_partner=partner,
                    d_pair_max=d_pair_auto.get((i, partner), 0.0) if d_pair == "auto" else float(d_pair),
                    bas_weight=float(merged.get("bas_weight", 0.0)),
                    bas_targets=targets,
                    indicator_weight=float(merged.get("indicator_weight", 0.0)),
                    indicator_threshold=float(merged.get("indicator_threshold", 0.01)),
                    indicator_mode=str(merged.get("indicator_mode", "product")),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"costs.{i}: {exc}") from None

    term_raw = raw.get("terminal", {}) or {}
    noise_raw = raw.get("noise", {}) or {}
    dt = float(_require(raw, "dt", ""))
    s_raw = dict(raw.get("sampler", {}) or {})
    s_raw.setdefault("eps", dt)
    pen_raw = raw.get("penalty", {}) or {}
    cbf_raw = dict(raw.get("cbf", {}) or {})
    if cbf_raw.get("u_bounds") is not None:
        cbf_raw["u_bounds"] = tuple(tuple(map(float, b)) for b in cbf_raw["u_bounds"])
    try:
        return ScenarioConfig(
            name=name,
            graph=graph,
            starts=starts,
            goals=goals,
            obstacles=tuple(obstacles),
            bas=bas,
            costs=tuple(costs),
            controller=str(raw.get("controller", "bas-pic")),
            noise=UnicycleParams(float(noise_raw.get("sigma", 0.1)), float(noise_raw.get("nu", 0.05))),
            t_final=float(_require(raw, "t_final", "")),
            dt=dt,
            lam=float(_require(raw, "lam", "")),
            sampler=SamplerConfig(**s_raw),
            terminal=TerminalCost(str(term_raw.get("mode", "zero")), float(term_raw.get("scale", 0.0))),
            penalty=PenaltySettings(float(pen_raw.get("weight", 0.0)), str(pen_raw.get("shape", "indicator"))),
            cbf=CbfFilterConfig(**cbf_raw),
            n_episodes=int(raw.get("n_episodes", 1)),
            master_seed=int(raw.get("master_seed", 0)),
            deterministic=bool(raw.get("deterministic", False)),
        )
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None


def parse_config(name_or_path, overrides: Optional[Iterable[str]] = None) -> ScenarioConfig:
    raw = load_raw(name_or_path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return build_config(raw)
