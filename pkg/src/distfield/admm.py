"""Consensus engine: augmented local objectives, closed-form averaging,
dual ascent, and the synchronous round loop.

The engine is generic over the local problem.  Each agent carries a
``problem`` handle exposing:

``sample_batch(cfg, rng)``
    draw whatever the loss needs for one inner step (may be ``None``);
``loss_and_grad(agent, batch, cfg)``
    data-term value and gradient w.r.t. the flat parameter vector;
``update_locals(agent, batch, cfg, rng)``
    one step on the agent's private variables (pose, distortions); only
    called for non-reference agents, optional;
``project(theta)``
    feasibility projection applied after every gradient step, optional;
``rebase(agent, transform)``
    re-express the agent's parameters under a change of global frame
    (reference handover), optional.

Per round, every live agent minimizes

    L_i(Gamma_i) + theta_i^T y_i + (rho/2) * |N_i| * ||theta_i - theta_bar||^2

with a fixed number of plain gradient steps, broadcasts theta_i once, and
ascends its dual with the per-neighbor differences
``y_i += rho * sum_j (theta_i - theta_j)``.  The neighborhood average
``theta_bar`` includes the agent itself and reads the round-start values,
which for rounds after the first are exactly the vectors broadcast at the
end of the previous round.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import netsim
from .metrics import consensus_residual
from .pose import DistortionSet, RelativePose, compose_relative, inverse

# Wire format for one parameter-vector message: 16-byte header
# (magic, version, agent id, round), then a u64 element count, then
# little-endian float64 payload.
MESSAGE_MAGIC = b"PVEC"
MESSAGE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_LENGTH = struct.Struct("<Q")


class DivergenceError(RuntimeError):
    """The primal loss became non-finite; carries the failing location."""

    def __init__(self, agent_id: int, round_index: int, step: int):
        super().__init__(
            f"non-finite loss at agent {agent_id}, round {round_index}, step {step}")
        self.agent_id = agent_id
        self.round_index = round_index
        self.step = step


def encode_message(theta, agent_id: int, round_index: int) -> bytes:
    theta = np.ascontiguousarray(theta, dtype="<f8")
    head = _HEADER.pack(MESSAGE_MAGIC, MESSAGE_VERSION, agent_id, round_index)
    return head + _LENGTH.pack(theta.size) + theta.tobytes()


def decode_message(buf: bytes):
    """Inverse of :func:`encode_message`; returns (theta, agent_id, round)."""
    magic, version, agent_id, round_index = _HEADER.unpack_from(buf, 0)
    if magic != MESSAGE_MAGIC:
        raise ValueError("bad message magic")
    if version != MESSAGE_VERSION:
        raise ValueError(f"unsupported message version {version}")
    (n,) = _LENGTH.unpack_from(buf, _HEADER.size)
    start = _HEADER.size + _LENGTH.size
    theta = np.frombuffer(buf, dtype="<f8", count=n, offset=start).copy()
    if theta.size != n:
        raise ValueError("truncated message payload")
    return theta, agent_id, round_index


def message_nbytes(n_params: int) -> int:
    """Serialized size of one theta message, for bandwidth accounting."""
    return _HEADER.size + _LENGTH.size + 8 * n_params


@dataclass
class ConsensusConfig:
    """Protocol constants: penalty, loss weight, step sizes and budgets.

    ``lr_final`` optionally decays the primal step size linearly across
    rounds (stochastic batches otherwise leave a noise floor in the
    consensus residual); ``rho_final`` ramps the penalty the same way, the
    usual adaptive-penalty move to tighten consensus once the fit has
    settled.  ``None`` keeps either constant.
    """

    rho: float = 0.001
    gamma: float = 0.01
    lr: float = 0.01
    steps_per_round: int = 200
    rounds: int = 5
    seed: int = 0
    batch_size: int = 2048
    lr_final: float | None = None
    rho_final: float | None = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.steps_per_round < 1:
            raise ValueError("steps_per_round must be at least 1")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    def _schedule(self, start, final, round_index):
        if final is None or self.rounds <= 1:
            return start
        frac = min(round_index / (self.rounds - 1), 1.0)
        return start + (final - start) * frac

    def lr_at(self, round_index: int) -> float:
        return self._schedule(self.lr, self.lr_final, round_index)

    def rho_at(self, round_index: int) -> float:
        return self._schedule(self.rho, self.rho_final, round_index)


@dataclass
class AgentState:
    """One robot: its parameter copy, dual, pose, distortions and data."""

    id: int
    theta: np.ndarray
    y: np.ndarray
    pose: RelativePose
    distortion: DistortionSet
    problem: object = None
    is_reference: bool = False

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.y.shape != self.theta.shape:
            raise ValueError("dual vector must match theta's length")


def z_update(neighborhood_thetas) -> np.ndarray:
    """Closed-form auxiliary update: the elementwise arithmetic mean."""
    thetas = list(neighborhood_thetas)
    if not thetas:
        raise ValueError("cannot average an empty neighborhood")
    out = np.zeros_like(np.asarray(thetas[0], dtype=float))
    for t in thetas:
        out += t
    return out / len(thetas)


def _step_rng(cfg: ConsensusConfig, round_index: int):
    # Shared stream across agents: identical agents stay bitwise identical.
    return np.random.default_rng([cfg.seed, round_index])


def primal_step(agent: AgentState, theta_bar, n_neighbors: int,
                cfg: ConsensusConfig, rng=None, round_index: int = 0) -> AgentState:
    """Run ``cfg.steps_per_round`` gradient steps on the augmented objective.

    Non-reference agents additionally step their pose and distortion
    parameters once per inner step; the reference agent only trains theta.
    """
    if rng is None:
        rng = _step_rng(cfg, round_index)
    problem = agent.problem
    theta_bar = np.asarray(theta_bar, dtype=float)
    pull = cfg.rho_at(round_index) * n_neighbors
    lr = cfg.lr_at(round_index)
    for step in range(cfg.steps_per_round):
        batch = problem.sample_batch(cfg, rng)
        loss, grad = problem.loss_and_grad(agent, batch, cfg)
        if not np.isfinite(loss):
            raise DivergenceError(agent.id, round_index, step)
        grad = grad + agent.y + pull * (agent.theta - theta_bar)
        agent.theta = agent.theta - lr * grad
        project = getattr(problem, "project", None)
        if project is not None:
            agent.theta = project(agent.theta)
        if not agent.is_reference:
            update_locals = getattr(problem, "update_locals", None)
            if update_locals is not None:
                update_locals(agent, batch, cfg, rng)
    return agent


def dual_update(agent: AgentState, neighbor_thetas: dict, rho: float) -> AgentState:
    """Dual ascent with per-neighbor differences of this round's thetas."""
    for theta_j in neighbor_thetas.values():
        agent.y = agent.y + rho * (agent.theta - theta_j)
    return agent


def run_round(agents, graph: netsim.CommGraph, cfg: ConsensusConfig,
              round_index: int = 0):
    """One synchronous iteration over all live agents.

    Averaging snapshots round-start thetas, primal steps are independent,
    then a single exchange feeds the dual updates.  Deterministic under
    ``cfg.seed``, whatever the agent iteration order.
    """
    live = [a for a in agents if graph.alive.get(a.id, False)]

    snapshot = {a.id: a.theta.copy() for a in live}
    theta_bars = {}
    degrees = {}
    for a in live:
        nbrs = graph.neighbors(a.id)
        theta_bars[a.id] = z_update([snapshot[j] for j in nbrs] + [snapshot[a.id]])
        degrees[a.id] = len(nbrs)

    for a in live:
        primal_step(a, theta_bars[a.id], degrees[a.id], cfg,
                    rng=_step_rng(cfg, round_index), round_index=round_index)

    inboxes = netsim.exchange(graph, {a.id: a.theta for a in live})
    rho = cfg.rho_at(round_index)
    for a in live:
        dual_update(a, inboxes[a.id], rho)
    return agents


@dataclass
class RunLog:
    """Outcome of :func:`run_protocol`: per-round records plus status."""

    status: str = "ok"
    rounds_completed: int = 0
    failed_round: int | None = None
    reference_ids: list = dc_field(default_factory=list)
    records: list = dc_field(default_factory=list)
    eval_rows: list = dc_field(default_factory=list)
    bytes_total: int = 0


def _handover(agents, graph, new_reference: int, reset_duals: bool):
    """Re-express the run in the new reference agent's frame.

    The gauge transform is the new reference's current pose estimate: every
    live agent's pose becomes ``inv(G) o T`` (the new reference lands exactly
    on the identity) and parameter grids are resampled accordingly, so data
    and model stay registered.
    """
    by_id = {a.id: a for a in agents}
    gauge = by_id[new_reference].pose.copy()
    gauge_inv = inverse(gauge)
    for a in agents:
        a.is_reference = (a.id == new_reference)
        if not graph.alive.get(a.id, False):
            continue
        a.pose = compose_relative(gauge_inv, a.pose)
        rebase = getattr(a.problem, "rebase", None)
        if rebase is not None and not gauge.is_identity():
            rebase(a, gauge)
        if reset_duals:
            a.y = np.zeros_like(a.y)
    by_id[new_reference].pose = RelativePose.identity()
    return gauge


def run_protocol(agents, graph: netsim.CommGraph, cfg: ConsensusConfig,
                 schedule: netsim.FailureSchedule | None = None,
                 evaluate=None, on_handover=None,
                 handover_reset_duals: bool = False) -> RunLog:
    """Execute the full round loop with failures and reference handover.

    ``evaluate(agents, graph, reference_id, rounds_done)`` is called once on
    the initial models and once after every round; its rows are appended to
    the log.  ``on_handover(old_ref, new_ref, gauge)`` lets the caller
    re-express ground-truth bookkeeping.  Returns a RunLog whose status is
    ``ok``, ``diverged`` or ``all-agents-failed``.
    """
    agents = list(agents)
    graph = graph.copy()
    log = RunLog()
    refs = [a.id for a in agents if a.is_reference]
    if len(refs) != 1:
        raise ValueError("exactly one agent must start as the reference")
    reference_id = refs[0]

    def snapshot_metrics(rounds_done):
        live = [a for a in agents if graph.alive[a.id]]
        thetas = [a.theta for a in live]
        log.records.append({
            "round": rounds_done,
            "reference_id": reference_id,
            "live_ids": [a.id for a in live],
            "consensus_residual": consensus_residual(thetas) if thetas else 0.0,
            "dual_sum_inf": float(np.max(np.abs(sum(a.y for a in agents))))
            if agents else 0.0,
            "bytes_cumulative": log.bytes_total,
        })
        if evaluate is not None:
            log.eval_rows.extend(evaluate(agents, graph, reference_id, rounds_done))

    snapshot_metrics(0)
    log.reference_ids.append(reference_id)

    for r in range(cfg.rounds):
        graph, new_ref = netsim.apply_failures(graph, schedule, r, reference_id)
        if not graph.live_ids():
            log.status = "all-agents-failed"
            log.failed_round = r
            return log
        if new_ref is not None:
            old = reference_id
            gauge = _handover(agents, graph, new_ref, handover_reset_duals)
            reference_id = new_ref
            if on_handover is not None:
                on_handover(old, new_ref, gauge)

        try:
            run_round([a for a in agents if graph.alive[a.id]], graph, cfg,
                      round_index=r)
        except DivergenceError as err:
            log.status = "diverged"
            log.failed_round = err.round_index
            return log

        n_params = agents[0].theta.size
        log.bytes_total += netsim.message_count(graph) * message_nbytes(n_params)
        log.rounds_completed = r + 1
        log.reference_ids.append(reference_id)
        snapshot_metrics(r + 1)

    return log
