"""Communication graphs and their factorization into per-agent subsystems."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class AgentGraph:
    """Undirected, connected communication graph over agents ``0..n_agents-1``."""

    n_agents: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n_agents < 1:
            raise TopologyError("n_agents must be positive")
        normalized = set()
        for edge in self.edges:
            i, j = tuple(edge) if len(edge) == 2 else (None, None)
            if i is None:
                raise TopologyError(f"edge {edge!r} must join two distinct agents")
            i, j = int(i), int(j)
            if i == j:
                raise TopologyError(f"self-loop on agent {i}")
            for k in (i, j):
                if not 0 <= k < self.n_agents:
                    raise TopologyError(f"agent index {k} out of range [0, {self.n_agents})")
            normalized.add(frozenset((i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))
        if not self._connected():
            raise TopologyError("communication graph must be connected")

    @classmethod
    def from_edges(cls, n_agents: int, edges: Iterable) -> "AgentGraph":
        return cls(n_agents, frozenset(frozenset(e) for e in edges))

    @classmethod
    def complete(cls, n_agents: int) -> "AgentGraph":
        return cls.from_edges(
            n_agents, [(i, j) for i in range(n_agents) for j in range(i + 1, n_agents)]
        )

    def _adjacency(self) -> dict[int, set[int]]:
        adj = {i: set() for i in range(self.n_agents)}
        for edge in self.edges:
            i, j = tuple(edge)
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def _connected(self) -> bool:
        adj = self._adjacency()
        seen = {0}
        queue = deque([0])
        while queue:
            for j in adj[queue.popleft()]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.n_agents

    def degree(self, i: int) -> int:
        return len(neighbors(self, i))


@dataclass(frozen=True)
class SubsystemSpec:
    """A central agent together with its neighbors.

    ``members`` lists the central agent first, then neighbors in ascending
    index order. ``joint_index_map`` gives the offset of each member's state
    block in the (unaugmented) joint state.
    """

    central: int
    members: tuple[int, ...]
    joint_index_map: dict

    @property
    def neighbors(self) -> tuple[int, ...]:
        return self.members[1:]

    def __len__(self) -> int:
        return len(self.members)


def neighbors(g: AgentGraph, i: int) -> set[int]:
    if not 0 <= i < g.n_agents:
        raise TopologyError(f"agent index {i} out of range [0, {g.n_agents})")
    out = set()
    for edge in g.edges:
        if i in edge:
            (j,) = edge - {i}
            out.add(j)
    return out


def subsystem(g: AgentGraph, i: int, state_dim: int = 1) -> SubsystemSpec:
    members = (i, *sorted(neighbors(g, i)))
    index_map = {m: k * state_dim for k, m in enumerate(members)}
    return SubsystemSpec(central=i, members=members, joint_index_map=index_map)


def factorize(g: AgentGraph, state_dim: int = 1) -> list[SubsystemSpec]:
    """One subsystem per agent; subsystem ``i`` is centred on agent ``i``."""
    return [subsystem(g, i, state_dim) for i in range(g.n_agents)]
