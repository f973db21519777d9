"""Simulated mesh network: topologies, synchronous exchange, failures.

Agents are identified by 1-based integer ids.  Rounds are synchronous and
links are reliable; a dead agent neither sends nor receives.  The only
failure mode modelled is a permanent kill, which may trigger a handover of
the reference role to the lowest-id surviving agent.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field


class ProtocolError(RuntimeError):
    """A live agent violated the synchronous exchange contract."""


@dataclass
class CommGraph:
    n: int
    edges: set = dc_field(default_factory=set)
    alive: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one agent")
        for (i, j) in self.edges:
            if i == j:
                raise ValueError("self-loops are not allowed")
            if not (1 <= i <= self.n and 1 <= j <= self.n):
                raise ValueError(f"edge ({i},{j}) references unknown agent")
        if not self.alive:
            self.alive = {i: True for i in range(1, self.n + 1)}

    def ids(self):
        return list(range(1, self.n + 1))

    def live_ids(self):
        return [i for i in self.ids() if self.alive[i]]

    def neighbors(self, i: int, live_only: bool = True):
        """Sorted neighbor ids of agent ``i`` (dead agents excluded by default)."""
        out = []
        for (a, b) in self.edges:
            j = b if a == i else (a if b == i else None)
            if j is None:
                continue
            if live_only and not (self.alive[i] and self.alive[j]):
                continue
            out.append(j)
        return sorted(out)

    def live_edges(self):
        return {(a, b) for (a, b) in self.edges if self.alive[a] and self.alive[b]}

    def copy(self) -> "CommGraph":
        return CommGraph(self.n, set(self.edges), dict(self.alive))


def build_topology(kind: str, n: int) -> CommGraph:
    """Construct a standard topology over agents 1..n.

    ``full`` connects every pair, ``ring`` a cycle (n >= 3), ``star`` puts
    agent 1 at the hub, ``line`` chains agents in id order.
    """
    if n < 1:
        raise ValueError("need at least one agent")
    if kind == "full":
        edges = {(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)}
    elif kind == "ring":
        if n < 3:
            raise ValueError("a ring needs at least 3 agents")
        edges = {(i, i + 1) for i in range(1, n)} | {(1, n)}
    elif kind == "star":
        edges = {(1, j) for j in range(2, n + 1)}
    elif kind == "line":
        edges = {(i, i + 1) for i in range(1, n)}
    else:
        raise ValueError(f"unknown topology kind: {kind!r}")
    return CommGraph(n, edges)


@dataclass
class FailureEvent:
    round: int
    agent: int
    action: str = "kill"

    def __post_init__(self):
        if self.action != "kill":
            raise ValueError(f"unsupported failure action: {self.action!r}")


@dataclass
class FailureSchedule:
    events: list = dc_field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs) -> "FailureSchedule":
        return cls([FailureEvent(r, a) for (r, a) in pairs])

    def due(self, round_index: int):
        return [e for e in self.events if e.round == round_index]


def exchange(graph: CommGraph, messages: dict) -> dict:
    """Deliver every live agent's message to its live neighbors.

    Returns ``{agent: {neighbor: message}}`` for live agents only.  Dead
    agents are silent in both directions; a missing message from a live
    agent is a protocol violation.
    """
    live = graph.live_ids()
    for i in live:
        if i not in messages:
            raise ProtocolError(f"live agent {i} supplied no message")
    inboxes = {i: {} for i in live}
    for (a, b) in graph.live_edges():
        inboxes[a][b] = messages[b]
        inboxes[b][a] = messages[a]
    return inboxes


def message_count(graph: CommGraph) -> int:
    """Messages moved by one exchange: one per direction per live edge."""
    return 2 * len(graph.live_edges())


def apply_failures(graph: CommGraph, schedule: FailureSchedule | None,
                   round_index: int, reference_id: int):
    """Kill scheduled agents; report a handover if the reference died.

    Returns ``(graph, new_reference_id or None)``.  The replacement
    reference is the lowest-id surviving agent.  Killing is monotone: an
    agent never comes back.
    """
    graph = graph.copy()
    if schedule is not None:
        for ev in schedule.due(round_index):
            if not (1 <= ev.agent <= graph.n):
                raise ValueError(f"failure event names unknown agent {ev.agent}")
            graph.alive[ev.agent] = False
    live = graph.live_ids()
    if not live:
        return graph, None
    if not graph.alive[reference_id]:
        return graph, min(live)
    return graph, None
