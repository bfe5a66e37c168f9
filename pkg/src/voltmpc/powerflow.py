"""The physical plant: AC power flow, injections, line flows, measurements.

All quantities are per-unit. The slack bus (index 0) is pinned at V = 1,
angle = 0; every other bus is treated as a PQ bus because the controllers
inject reactive power everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    DimensionMismatchError,
    PowerFlowNonConvergence,
    SingularJacobianError,
)
from .netmodel import AdmittanceMatrix, NetworkModel, build_admittance


@dataclass(eq=False)
class OperatingState:
    """Bus voltage magnitudes (p.u.) and angles (rad) at one instant."""

    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.v.shape != self.theta.shape:
            raise DimensionMismatchError("v and theta must have equal length")

    @property
    def n_bus(self) -> int:
        return self.v.shape[0]

    def complex_voltage(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)


def flat_state(n_bus: int) -> OperatingState:
    return OperatingState(v=np.ones(n_bus), theta=np.zeros(n_bus))


@dataclass(eq=False)
class InjectionVector:
    """Net active/reactive injections per bus (generation minus demand)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.p.shape != self.q.shape:
            raise DimensionMismatchError("p and q must have equal length")


def compute_injections(state: OperatingState, ybus: AdmittanceMatrix) -> InjectionVector:
    """Nodal injections implied by a state: S_i = V_i * conj(sum_k Y_ik V_k).

    Componentwise this is the usual pair
        P_i = sum_k V_i V_k [G_ik cos(th_i - th_k) + B_ik sin(th_i - th_k)]
        Q_i = sum_k V_i V_k [G_ik sin(th_i - th_k) - B_ik cos(th_i - th_k)].
    """
    if ybus.n_bus != state.n_bus:
        raise DimensionMismatchError(
            f"state has {state.n_bus} buses, Y has {ybus.n_bus}"
        )
    vc = state.complex_voltage()
    s = vc * np.conj(ybus.matrix @ vc)
    return InjectionVector(p=s.real, q=s.imag)


def solve_power_flow(
    net: NetworkModel,
    injections: InjectionVector,
    warm_start: OperatingState | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 30,
    ybus: AdmittanceMatrix | None = None,
) -> OperatingState:
    """Newton-Raphson solution of the power-flow equations in polar form.

    ``injections`` prescribes P and Q at every non-slack bus (slack entries
    are ignored). Returns a state whose per-bus mismatch is below ``tol``.

    Raises:
        PowerFlowNonConvergence: iteration limit hit or iterates went
            non-physical; signals an infeasible or over-stressed point.
        SingularJacobianError: Newton system could not be solved.
    """
    if ybus is None:
        ybus = build_admittance(net)
    n = net.n_bus
    if injections.p.shape[0] != n:
        raise DimensionMismatchError(
            f"injection vector has {injections.p.shape[0]} buses, network has {n}"
        )
    y = ybus.matrix
    ns = slice(1, n)  # non-slack indices

    if warm_start is not None:
        v = warm_start.v.copy()
        theta = warm_start.theta.copy()
        v[0], theta[0] = 1.0, 0.0
    else:
        v = np.ones(n)
        theta = np.zeros(n)

    p_spec = injections.p
    q_spec = injections.q

    def mismatch(v, theta):
        vc = v * np.exp(1j * theta)
        s = vc * np.conj(y @ vc)
        return s.real[ns] - p_spec[ns], s.imag[ns] - q_spec[ns], vc

    dp, dq, vc = mismatch(v, theta)
    for iteration in range(max_iter + 1):
        worst = max(np.max(np.abs(dp)), np.max(np.abs(dq)))
        if not np.isfinite(worst):
            raise PowerFlowNonConvergence(iteration, float("inf"))
        if worst <= tol:
            return OperatingState(v=v, theta=theta)
        if iteration == max_iter:
            break

        # complex-form Jacobian blocks dS/d(angle), dS/d(magnitude)
        ibus = y @ vc
        diag_v = np.diag(vc)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(vc / v)
        ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
        ds_dvm = diag_v @ np.conj(y @ diag_vn) + np.conj(diag_i) @ diag_vn

        jac = np.block(
            [
                [ds_dva.real[ns, ns], ds_dvm.real[ns, ns]],
                [ds_dva.imag[ns, ns], ds_dvm.imag[ns, ns]],
            ]
        )
        rhs = -np.concatenate([dp, dq])
        try:
            step = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(str(exc)) from exc

        m = n - 1
        theta[ns] += step[:m]
        v[ns] += step[m:]
        if np.any(v <= 0):
            raise PowerFlowNonConvergence(iteration + 1, float(worst))
        dp, dq, vc = mismatch(v, theta)

    worst = max(np.max(np.abs(dp)), np.max(np.abs(dq)))
    raise PowerFlowNonConvergence(max_iter, float(worst))


# ---------------------------------------------------------------------------
# Line flows and measurements
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LineFlowSet:
    """Sending-end flows for both orientations of every line."""

    flows: dict[tuple[int, int], tuple[float, float]]  # (i, k) -> (P_ik, Q_ik)

    def p(self, i: int, k: int) -> float:
        return self.flows[(i, k)][0]

    def q(self, i: int, k: int) -> float:
        return self.flows[(i, k)][1]


def directed_flow(
    v_i: float, v_k: float, theta_i: float, theta_k: float, g_mut: float, b_mut: float
) -> tuple[float, float]:
    """Sending-end (P_ik, Q_ik) from mutual-admittance entries (G_ik, B_ik)."""
    delta = theta_i - theta_k
    cross = v_i * v_k
    p = (cross * np.cos(delta) - v_i * v_i) * g_mut + cross * np.sin(delta) * b_mut
    q = cross * np.sin(delta) * g_mut + (v_i * v_i - cross * np.cos(delta)) * b_mut
    return p, q


def compute_line_flows(state: OperatingState, net: NetworkModel) -> LineFlowSet:
    """Per-line sending-end flows in both directions (series element only)."""
    flows: dict[tuple[int, int], tuple[float, float]] = {}
    for ln in net.lines:
        g_mut, b_mut = -ln.g, -ln.b
        i, k = ln.from_bus, ln.to_bus
        flows[(i, k)] = directed_flow(
            state.v[i], state.v[k], state.theta[i], state.theta[k], g_mut, b_mut
        )
        flows[(k, i)] = directed_flow(
            state.v[k], state.v[i], state.theta[k], state.theta[i], g_mut, b_mut
        )
    return LineFlowSet(flows=flows)


@dataclass(frozen=True)
class NoiseSpec:
    """Standard deviations of additive Gaussian measurement noise."""

    sigma_v: float = 0.0
    sigma_theta: float = 0.0
    sigma_pq: float = 0.0

    def __post_init__(self):
        if min(self.sigma_v, self.sigma_theta, self.sigma_pq) < 0:
            raise ValueError("noise standard deviations must be nonnegative")

    @property
    def silent(self) -> bool:
        return self.sigma_v == self.sigma_theta == self.sigma_pq == 0.0


class MeasurementRow(NamedTuple):
    """Everything one line's endpoints observe about that line."""

    v_i: float
    v_k: float
    theta_i: float
    theta_k: float
    p_ik: float
    q_ik: float
    p_ki: float
    q_ki: float


@dataclass(eq=False)
class MeasurementSnapshot:
    """Noisy (or exact) view of one operating instant.

    Voltage phasors are measured once per bus; each directed line flow is
    measured once, so both endpoints of a line see identical numbers.
    """

    t: int
    v: np.ndarray
    theta: np.ndarray
    flows: dict[tuple[int, int], tuple[float, float]]
    noise: NoiseSpec

    def row(self, i: int, k: int) -> MeasurementRow:
        p_ik, q_ik = self.flows[(i, k)]
        p_ki, q_ki = self.flows[(k, i)]
        return MeasurementRow(
            v_i=self.v[i],
            v_k=self.v[k],
            theta_i=self.theta[i],
            theta_k=self.theta[k],
            p_ik=p_ik,
            q_ik=q_ik,
            p_ki=p_ki,
            q_ki=q_ki,
        )


def measure(
    state: OperatingState,
    net: NetworkModel,
    noise: NoiseSpec = NoiseSpec(),
    seed: int | None = None,
    t: int = 0,
) -> MeasurementSnapshot:
    """Snapshot the plant. Deterministic for a fixed seed.

    Draw order is fixed (bus voltages, bus angles, then flows over directed
    line pairs in sorted order), so identical seeds give identical snapshots.
    """
    exact = compute_line_flows(state, net)
    pairs = sorted(exact.flows)
    if noise.silent:
        return MeasurementSnapshot(
            t=t,
            v=state.v.copy(),
            theta=state.theta.copy(),
            flows=dict(exact.flows),
            noise=noise,
        )
    rng = np.random.default_rng(seed)
    v = state.v + noise.sigma_v * rng.standard_normal(net.n_bus)
    theta = state.theta + noise.sigma_theta * rng.standard_normal(net.n_bus)
    flow_noise = noise.sigma_pq * rng.standard_normal((len(pairs), 2))
    flows = {
        pair: (exact.flows[pair][0] + dn[0], exact.flows[pair][1] + dn[1])
        for pair, dn in zip(pairs, flow_noise)
    }
    return MeasurementSnapshot(t=t, v=v, theta=theta, flows=flows, noise=noise)
