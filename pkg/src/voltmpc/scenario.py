"""Closed-loop driver: profiles in, plant stepping, controller in the loop.

Per control instant the driver (1) solves the plant power flow for the
actual injections plus the currently applied compensation, (2) takes a
measurement snapshot, (3) re-estimates line parameters when running
data-driven, (4) forms predicted injection changes for the next instant,
(5) invokes the selected controller, and (6) applies the resulting
compensation to the next instant's reactive injections.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AdmmNotConvergedError,
    ConfigError,
    MalformedCurveError,
    MpcSolveError,
    PlantDivergedError,
    PowerFlowNonConvergence,
    RaggedSeriesError,
    SchemaError,
    SingularInformationError,
    SingularJacobianError,
)
from .estimation import (
    AdmittanceEstimate,
    estimate_all_lines,
    estimates_as_params,
    partials_for_network,
)
from .mpc_central import MpcBounds, MpcInput, solve_cmpc
from .mpc_dist import AdmmConfig, build_agents, run_admm
from .netmodel import NetworkModel, build_admittance, mutual_params
from .powerflow import (
    InjectionVector,
    MeasurementSnapshot,
    NoiseSpec,
    solve_power_flow,
    measure,
)

logger = logging.getLogger(__name__)

MODES = ("none", "cmpc", "d3mpc", "vvc")

PROFILE_COLUMNS = ("t", "bus", "Pg", "Qg", "Pd", "Qd")


@dataclass(eq=False)
class ProfileSeries:
    """Per-bus generation/demand trajectories (p.u.), original bus ids."""

    bus_ids: tuple[int, ...]
    pg: np.ndarray  # (T, n_bus)
    qg: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    spacing_minutes: float = 15.0

    @property
    def n_instants(self) -> int:
        return self.pg.shape[0]


def load_profiles(text: str) -> ProfileSeries:
    """Parse the profile CSV (header t,bus,Pg,Qg,Pd,Qd; values p.u.).

    Raises:
        SchemaError: missing column, non-numeric value, or negative demand.
        RaggedSeriesError: the (t, bus) grid is incomplete or non-contiguous.
    """
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in PROFILE_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"profile CSV missing column(s): {', '.join(missing)}")
    cells: dict[tuple[int, int], tuple[float, float, float, float]] = {}
    for line_no, row in enumerate(reader, start=2):
        try:
            t = int(row["t"])
            bus = int(row["bus"])
            vals = tuple(float(row[c]) for c in ("Pg", "Qg", "Pd", "Qd"))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"line {line_no}: {exc}") from None
        if vals[2] < 0 or vals[3] < 0:
            raise SchemaError(f"line {line_no}: demands must be nonnegative")
        if (t, bus) in cells:
            raise SchemaError(f"line {line_no}: duplicate entry for t={t}, bus={bus}")
        cells[(t, bus)] = vals
    if not cells:
        raise SchemaError("profile CSV has no data rows")
    bus_ids = tuple(sorted({bus for _, bus in cells}))
    instants = sorted({t for t, _ in cells})
    if instants != list(range(len(instants))):
        raise RaggedSeriesError("instants must be contiguous starting at 0")
    n_t, n_b = len(instants), len(bus_ids)
    arrays = [np.zeros((n_t, n_b)) for _ in range(4)]
    col = {bus: j for j, bus in enumerate(bus_ids)}
    for t in range(n_t):
        for bus in bus_ids:
            if (t, bus) not in cells:
                raise RaggedSeriesError(f"missing row for t={t}, bus={bus}")
            for arr, val in zip(arrays, cells[(t, bus)]):
                arr[t, col[bus]] = val
    return ProfileSeries(
        bus_ids=bus_ids, pg=arrays[0], qg=arrays[1], pd=arrays[2], qd=arrays[3]
    )


def profiles_to_csv(series: ProfileSeries) -> str:
    out = ["t,bus,Pg,Qg,Pd,Qd"]
    for t in range(series.n_instants):
        for j, bus in enumerate(series.bus_ids):
            out.append(
                f"{t},{bus},{series.pg[t, j]:.12g},{series.qg[t, j]:.12g},"
                f"{series.pd[t, j]:.12g},{series.qd[t, j]:.12g}"
            )
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Forecast emulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionModel:
    """Bounded multiplicative forecast error: each component scaled by
    (1 + delta), delta ~ U(-epsilon, epsilon) i.i.d., seed-deterministic."""

    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("prediction error bound must be nonnegative")


def predict(
    pg: np.ndarray,
    qg: np.ndarray,
    pd: np.ndarray,
    qd: np.ndarray,
    model: PredictionModel,
    instant: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Perturb one instant's actual profile rows into their forecast."""
    rng = np.random.default_rng([model.seed, instant])
    out = []
    for arr in (pg, qg, pd, qd):
        delta = rng.uniform(-model.epsilon, model.epsilon, size=arr.shape)
        out.append(arr * (1.0 + delta))
    return tuple(out)


# ---------------------------------------------------------------------------
# Droop volt-var baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VvcCurve:
    """Piecewise-linear droop: full boost below v1, deadband [v2, v3],
    full absorption above v4."""

    v1: float = 0.95
    v2: float = 0.98
    v3: float = 1.02
    v4: float = 1.05
    u_max: float = 0.05
    u_min: float = -0.05

    def __post_init__(self):
        if not (self.v1 < self.v2 <= self.v3 < self.v4):
            raise MalformedCurveError(
                f"breakpoints must increase: {self.v1}, {self.v2}, {self.v3}, {self.v4}"
            )
        if self.u_min > 0 or self.u_max < 0:
            raise MalformedCurveError("droop range must bracket zero")


def vvc_control(v: float, curve: VvcCurve = VvcCurve()) -> float:
    if v <= 0:
        raise ValueError("voltage magnitude must be positive")
    if v <= curve.v1:
        u = curve.u_max
    elif v < curve.v2:
        u = curve.u_max * (curve.v2 - v) / (curve.v2 - curve.v1)
    elif v <= curve.v3:
        u = 0.0
    elif v < curve.v4:
        u = -curve.u_max * (v - curve.v3) / (curve.v4 - curve.v3)
    else:
        u = -curve.u_max
    return float(min(max(u, curve.u_min), curve.u_max))


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SimulationConfig:
    mode: str
    net: NetworkModel
    profiles: ProfileSeries
    prediction: PredictionModel = PredictionModel()
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    bounds: MpcBounds = field(default_factory=MpcBounds)
    noise: NoiseSpec = NoiseSpec()
    vvc_curve: VvcCurve = VvcCurve()
    window: int = 1
    v_ref: float = 1.0
    weights: float = 1.0
    keep_shunts: bool = False
    norm_mode: str = "squared"
    seed: int = 0
    estimate_lines: bool | None = None  # default: only in d3mpc mode
    pf_tol: float = 1e-8
    pf_max_iter: int = 30

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.bounds.v_min <= self.v_ref <= self.bounds.v_max:
            raise ConfigError("v_ref must lie inside the voltage band")
        if self.window < 1:
            raise ConfigError("estimation window must be >= 1")
        if set(self.profiles.bus_ids) != set(self.net.original_ids):
            raise ConfigError("profile bus ids do not match the network's")

    @property
    def estimating(self) -> bool:
        if self.estimate_lines is None:
            return self.mode == "d3mpc"
        return self.estimate_lines


@dataclass(eq=False)
class SimulationLog:
    mode: str
    v: np.ndarray  # (T, n_bus)
    theta: np.ndarray
    u_applied: np.ndarray  # compensation in effect at each instant
    controller_status: list[str]
    objectives: list[float]
    admm_iterations: list[int]
    admm_final_residuals: list[float]
    estimates: list[dict[tuple[int, int], AdmittanceEstimate] | None]
    bounds_violated: np.ndarray  # (T,) bool against the configured band
    message_total: int
    controller_failures: int

    @property
    def n_instants(self) -> int:
        return self.v.shape[0]

    def min_voltage(self) -> float:
        return float(self.v.min())

    def max_voltage(self) -> float:
        return float(self.v.max())


def injections_from_snapshot(
    snap: MeasurementSnapshot, net: NetworkModel
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus injections reconstructed from measured line flows (the
    zero-shunt identity: injection equals the sum of outgoing flows)."""
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    for (i, _k), (p_ik, q_ik) in snap.flows.items():
        p[i] += p_ik
        q[i] += q_ik
    return p, q


def _profiles_internal(cfg: SimulationConfig) -> tuple[np.ndarray, ...]:
    """Profile arrays re-ordered to internal bus indexing."""
    order = [cfg.profiles.bus_ids.index(oid) for oid in cfg.net.original_ids]
    return (
        cfg.profiles.pg[:, order],
        cfg.profiles.qg[:, order],
        cfg.profiles.pd[:, order],
        cfg.profiles.qd[:, order],
    )


def run_closed_loop(cfg: SimulationConfig) -> SimulationLog:
    """Run the scenario end to end; deterministic for a fixed config.

    Raises:
        PlantDivergedError: the power flow failed at some instant.
    """
    net = cfg.net
    n = net.n_bus
    ybus = build_admittance(net, with_shunts=cfg.keep_shunts)
    params_true = mutual_params(net)
    pg, qg, pd, qd = _profiles_internal(cfg)
    t_count = cfg.profiles.n_instants

    v_log = np.zeros((t_count, n))
    th_log = np.zeros((t_count, n))
    u_log = np.zeros((t_count, n))
    statuses: list[str] = []
    objectives: list[float] = []
    admm_iters: list[int] = []
    admm_resid: list[float] = []
    est_log: list[dict[tuple[int, int], AdmittanceEstimate] | None] = []
    violated = np.zeros(t_count, dtype=bool)
    message_total = 0
    failures = 0

    windows: dict[tuple[int, int], deque] = {
        (ln.from_bus, ln.to_bus): deque(maxlen=cfg.window) for ln in net.lines
    }
    prev_estimates: dict[tuple[int, int], AdmittanceEstimate] | None = None
    u_applied = np.zeros(n)
    state = None

    for t in range(t_count):
        inj = InjectionVector(
            p=pg[t] - pd[t],
            q=qg[t] - qd[t] + u_applied,
        )
        try:
            state = solve_power_flow(
                net, inj, warm_start=state, tol=cfg.pf_tol,
                max_iter=cfg.pf_max_iter, ybus=ybus,
            )
        except (PowerFlowNonConvergence, SingularJacobianError) as exc:
            raise PlantDivergedError(t, exc) from exc

        v_log[t] = state.v
        th_log[t] = state.theta
        u_log[t] = u_applied
        violated[t] = bool(
            (state.v[1:] < cfg.bounds.v_min - 1e-12).any()
            or (state.v[1:] > cfg.bounds.v_max + 1e-12).any()
        )

        snap = measure(state, net, cfg.noise, seed=[cfg.seed, 7919, t], t=t)

        est_set = None
        est_failed = False
        if cfg.estimating:
            for pair, window in windows.items():
                window.append(snap.row(*pair))
            try:
                est_set = estimate_all_lines(windows, prev_estimates)
                prev_estimates = est_set
            except SingularInformationError as exc:
                logger.warning("instant %d: estimation failed (%s)", t, exc)
                est_failed = True
                est_set = prev_estimates
        est_log.append(est_set)

        if t == t_count - 1:
            statuses.append("end")
            objectives.append(float("nan"))
            admm_iters.append(0)
            admm_resid.append(float("nan"))
            break

        status = "none"
        objective = float("nan")
        rounds = 0
        final_resid = float("nan")
        u_next = u_applied if cfg.mode != "none" else np.zeros(n)

        if cfg.mode == "none":
            u_next = np.zeros(n)
        elif cfg.mode == "vvc":
            u_next = np.zeros(n)
            for i in range(1, n):
                u_next[i] = vvc_control(float(snap.v[i]), cfg.vvc_curve)
            status = "ok"
        elif est_failed and cfg.mode == "d3mpc":
            status = "failed:estimation"
            failures += 1
        else:
            p_now, q_now = injections_from_snapshot(snap, net)
            pg_hat, qg_hat, pd_hat, qd_hat = predict(
                pg[t + 1], qg[t + 1], pd[t + 1], qd[t + 1],
                cfg.prediction, t + 1,
            )
            dp = (pg_hat - pd_hat) - p_now
            dq = (qg_hat - qd_hat) - q_now
            params = (
                params_true
                if cfg.mode == "cmpc"
                else estimates_as_params(est_set)
            )
            partials = partials_for_network(snap, net, params)
            inp = MpcInput(
                v_now=snap.v,
                theta_now=snap.theta,
                dp=dp,
                dq=dq,
                partials=partials,
                v_ref=cfg.v_ref,
                weights=cfg.weights,
                bounds=cfg.bounds,
            )
            try:
                if cfg.mode == "cmpc":
                    sol = solve_cmpc(inp, norm_mode=cfg.norm_mode)
                else:
                    sol, report = run_admm(build_agents(inp, cfg.admm), net, cfg.admm)
                    rounds = report.iterations
                    final_resid = float(report.residual_history[-1])
                    message_total += sum(report.message_counts.values())
                u_next = sol.u
                objective = sol.objective
                status = "ok"
            except (MpcSolveError, AdmmNotConvergedError) as exc:
                logger.warning("instant %d: controller failed (%s)", t, exc)
                status = f"failed:{type(exc).__name__}"
                failures += 1
                u_next = u_applied  # hold the previous compensation

        statuses.append(status)
        objectives.append(objective)
        admm_iters.append(rounds)
        admm_resid.append(final_resid)
        u_applied = np.asarray(u_next, dtype=float)

    return SimulationLog(
        mode=cfg.mode,
        v=v_log,
        theta=th_log,
        u_applied=u_log,
        controller_status=statuses,
        objectives=objectives,
        admm_iterations=admm_iters,
        admm_final_residuals=admm_resid,
        estimates=est_log,
        bounds_violated=violated,
        message_total=message_total,
        controller_failures=failures,
    )
