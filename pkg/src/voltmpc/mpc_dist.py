"""Distributed solution of the control QP by consensus ADMM.

Each non-slack bus hosts an agent holding a replica vector x_i (its own and
its neighbors' voltage/angle increments), a private compensation u_i, the
consensus variable z_i for its own increments, and a multiplier lambda_i.
Rounds are synchronous: every agent minimizes its augmented local objective,
exchanges replicas with graph neighbors, averages into z, exchanges z,
updates multipliers, and exchanges those. Messages travel only along
network edges; the engine records every send for locality audits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AdmmNotConvergedError,
    MissingReplicaError,
    MpcSolveError,
    SlackBusError,
)
from .mpc_central import MpcInput, MpcSolution
from .netmodel import NetworkModel
from .qpsolve import QpProblem, QpSolver


@dataclass(frozen=True)
class SelectorMatrix:
    """Replica-to-consensus selector for one bus.

    Rows are 2x2 blocks ordered (self, then neighbors ascending); columns
    are 2x2 blocks over the non-slack buses 1..N.
    """

    bus: int
    members: tuple[int, ...]
    n_nonslack: int

    def slot(self, k: int) -> int:
        return self.members.index(k)

    @property
    def matrix(self) -> np.ndarray:
        e = np.zeros((2 * len(self.members), 2 * self.n_nonslack))
        for row, k in enumerate(self.members):
            col = 2 * (k - 1)
            e[2 * row : 2 * row + 2, col : col + 2] = np.eye(2)
        return e

    def column_block(self, k: int) -> np.ndarray:
        """E_i(k): the two columns selecting bus k's consensus variables."""
        return self.matrix[:, 2 * (k - 1) : 2 * (k - 1) + 2]


def build_selector(bus: int, neighbor_ids, n_bus: int) -> SelectorMatrix:
    """Selector for a non-slack bus; slack neighbors are excluded (their
    increments are constants, not consensus variables)."""
    if bus == 0:
        raise SlackBusError("the slack bus hosts no agent")
    members = (bus,) + tuple(sorted(k for k in neighbor_ids if k != 0))
    return SelectorMatrix(bus=bus, members=members, n_nonslack=n_bus - 1)


@dataclass(eq=False)
class AdmmConfig:
    rho: float = 100.0
    tol_inf: float = 3.5e-5
    max_iter: int = 5000
    log_messages: bool = False
    local_tol: float = 1e-9
    local_max_iter: int = 20000

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("penalty rho must be positive")
        if self.tol_inf <= 0:
            raise ValueError("stopping tolerance must be positive")


@dataclass(eq=False)
class AdmmReport:
    iterations: int
    residual_history: np.ndarray
    message_counts: dict[int, int]
    converged: bool
    message_log: list[tuple[int, str, int, int]] | None = None  # (round, kind, src, dst)


class BusAgent:
    """State and local optimization of one non-slack bus."""

    def __init__(self, inp: MpcInput, bus: int, rho: float):
        blk = inp.partials[bus]
        self.bus = bus
        self.selector = build_selector(bus, blk.neighbors.keys(), inp.n_bus)
        self.members = self.selector.members
        m = len(self.members)
        self.dim_x = 2 * m
        self.rho = rho
        self.v_now = float(inp.v_now[bus])
        self.v_ref = float(inp.v_ref)
        self.weight = float(inp.weight(bus))

        # replica x (2m), private u appended last in the local QP
        n_var = self.dim_x + 1
        h = np.zeros((n_var, n_var))
        h[: self.dim_x, : self.dim_x] = rho * np.eye(self.dim_x)
        h[0, 0] += 2.0  # own dV tracking term
        h[-1, -1] = 2.0 * self.weight**2
        self._base_f = np.zeros(n_var)
        self._base_f[0] = 2.0 * (self.v_now - self.v_ref)

        p_row = np.zeros(n_var)
        q_row = np.zeros(n_var)
        for slot, k in enumerate(self.members):
            vec = blk.own if k == bus else blk.neighbors[k]
            p_row[2 * slot] = vec[0]
            p_row[2 * slot + 1] = vec[1]
            q_row[2 * slot] = vec[2]
            q_row[2 * slot + 1] = vec[3]
        q_row[-1] = -1.0

        bd = inp.bounds
        lo = np.empty(n_var)
        hi = np.empty(n_var)
        for slot, k in enumerate(self.members):
            lo[2 * slot] = bd.v_min - float(inp.v_now[k])
            hi[2 * slot] = bd.v_max - float(inp.v_now[k])
            lo[2 * slot + 1] = bd.dtheta_min
            hi[2 * slot + 1] = bd.dtheta_max
        lo[-1] = bd.u_min
        hi[-1] = bd.u_max

        problem = QpProblem(
            h=h,
            f=self._base_f.copy(),
            a_eq=np.vstack([p_row, q_row]),
            b_eq=np.array([float(inp.dp[bus]), float(inp.dq[bus])]),
            lo=lo,
            hi=hi,
        )
        self.solver = QpSolver(problem)

        self.x = np.zeros(self.dim_x)
        self.u = 0.0
        self.z_own = np.zeros(2)
        self.lam = np.zeros(self.dim_x)
        # neighbor views, refreshed by the exchange phases each round
        self.z_views: dict[int, np.ndarray] = {k: np.zeros(2) for k in self.members}
        self.peer_x: dict[int, np.ndarray] = {}  # neighbor's replica of me
        self.peer_lam: dict[int, np.ndarray] = {
            k: np.zeros(2) for k in self.members if k != bus
        }

    def consensus_point(self) -> np.ndarray:
        return np.concatenate([self.z_views[k] for k in self.members])

    def slot_of(self, k: int) -> slice:
        s = self.selector.slot(k)
        return slice(2 * s, 2 * s + 2)

    def local_residual(self) -> float:
        return float(np.abs(self.x - self.consensus_point()).max(initial=0.0))


def local_update(
    agent: BusAgent,
    z_views: dict[int, np.ndarray],
    rho: float,
    *,
    tol: float = 1e-9,
    max_iter: int = 20000,
) -> tuple[np.ndarray, float]:
    """Minimize the agent's augmented objective at the current consensus
    view; returns (x_plus, u_plus) and stores them on the agent."""
    agent.z_views.update(z_views)
    c = agent.consensus_point()
    f = agent._base_f.copy()
    f[: agent.dim_x] += agent.lam - rho * c
    agent.solver.update_linear(f=f)
    qp = agent.solver.solve(tol=tol, max_iter=max_iter)
    if qp.status != "optimal":
        raise MpcSolveError(
            f"agent {agent.bus} local step ended with status {qp.status}"
        )
    agent.x = qp.y[: agent.dim_x].copy()
    agent.u = float(qp.y[-1])
    return agent.x, agent.u


def z_update(contributions: list[tuple[np.ndarray, np.ndarray]], rho: float) -> np.ndarray:
    """Average of replica + multiplier/rho over every holder of a variable."""
    if not contributions:
        raise MissingReplicaError("no replicas supplied for consensus average")
    total = np.zeros(2)
    for x_slot, lam_slot in contributions:
        total += x_slot + lam_slot / rho
    return total / len(contributions)


def dual_update(agent: BusAgent, z_views: dict[int, np.ndarray], rho: float) -> np.ndarray:
    """Multiplier step on the consensus gap; stores and returns the new value."""
    agent.z_views.update(z_views)
    agent.lam = agent.lam + rho * (agent.x - agent.consensus_point())
    return agent.lam


def build_agents(inp: MpcInput, cfg: AdmmConfig) -> list[BusAgent]:
    return [BusAgent(inp, bus, cfg.rho) for bus in range(1, inp.n_bus)]


def run_admm(
    agents: list[BusAgent],
    net: NetworkModel,
    cfg: AdmmConfig,
) -> tuple[MpcSolution, AdmmReport]:
    """Synchronous consensus rounds until ||x - Ez||_inf meets the tolerance.

    Raises:
        AdmmNotConvergedError: round limit hit; the exception carries the
            last iterate's solution and the report.
    """
    agents = sorted(agents, key=lambda a: a.bus)
    by_bus = {a.bus: a for a in agents}
    for a in agents:
        for k in a.members[1:]:
            if k not in by_bus:
                raise MissingReplicaError(f"agent {a.bus} expects a peer at bus {k}")

    counts = {a.bus: 0 for a in agents}
    log: list[tuple[int, str, int, int]] | None = [] if cfg.log_messages else None
    edge_ok = {
        (i, k)
        for i in range(net.n_bus)
        for k in net.adjacency[i]
    }

    def send(rnd: int, kind: str, src: int, dst: int, payload: np.ndarray, store, key):
        if (src, dst) not in edge_ok:
            raise MissingReplicaError(
                f"attempted message between non-adjacent buses {src} and {dst}"
            )
        counts[src] += 1
        if log is not None:
            log.append((rnd, kind, src, dst))
        store[key] = payload

    history: list[float] = []
    residual = float("inf")
    rounds_used = 0
    for rnd in range(cfg.max_iter):
        rounds_used = rnd + 1
        # step 1: local minimizations; a stalled local solver aborts the run
        # rather than letting a stale iterate contaminate the consensus
        try:
            for a in agents:
                local_update(
                    a, a.z_views, cfg.rho, tol=cfg.local_tol, max_iter=cfg.local_max_iter
                )
        except MpcSolveError as exc:
            report = AdmmReport(
                iterations=rounds_used,
                residual_history=np.array(history),
                message_counts=counts,
                converged=False,
                message_log=log,
            )
            raise AdmmNotConvergedError(
                rounds_used, residual, solution=None, report=report
            ) from exc
        # step 2: replicas travel to the buses they copy
        for a in agents:
            for k in a.members[1:]:
                send(rnd, "x", a.bus, k, a.x[a.slot_of(k)].copy(), by_bus[k].peer_x, a.bus)
        # step 3: consensus averages
        for a in agents:
            contribs = [(a.x[a.slot_of(a.bus)], a.lam[a.slot_of(a.bus)])]
            for k in a.members[1:]:
                if k not in a.peer_x:
                    raise MissingReplicaError(
                        f"agent {a.bus} missing replica from bus {k}"
                    )
                contribs.append((a.peer_x[k], a.peer_lam[k]))
            a.z_own = z_update(contribs, cfg.rho)
        # step 4: consensus values travel back
        for a in agents:
            a.z_views[a.bus] = a.z_own
            for k in a.members[1:]:
                send(rnd, "z", a.bus, k, a.z_own.copy(), by_bus[k].z_views, a.bus)
        # step 5: multiplier updates, plus the stopping residual
        residual = 0.0
        for a in agents:
            dual_update(a, a.z_views, cfg.rho)
            residual = max(residual, a.local_residual())
        history.append(residual)
        # step 6: multiplier components travel to the owners they refer to
        for a in agents:
            for k in a.members[1:]:
                send(
                    rnd, "lambda", a.bus, k, a.lam[a.slot_of(k)].copy(),
                    by_bus[k].peer_lam, a.bus,
                )
        if residual <= cfg.tol_inf:
            break

    converged = residual <= cfg.tol_inf
    report = AdmmReport(
        iterations=rounds_used,
        residual_history=np.array(history),
        message_counts=counts,
        converged=converged,
        message_log=log,
    )

    n_bus = net.n_bus
    dv = np.zeros(n_bus)
    dtheta = np.zeros(n_bus)
    u = np.zeros(n_bus)
    for a in agents:
        dv[a.bus] = a.z_own[0]
        dtheta[a.bus] = a.z_own[1]
        u[a.bus] = a.u
    objective = float(
        sum(
            (a.v_now + dv[a.bus] - a.v_ref) ** 2 + (a.weight * u[a.bus]) ** 2
            for a in agents
        )
    )
    solution = MpcSolution(
        dv=dv,
        dtheta=dtheta,
        u=u,
        objective=objective,
        status="optimal" if converged else "max_iter",
    )
    if not converged:
        raise AdmmNotConvergedError(rounds_used, residual, solution, report)
    return solution, report
