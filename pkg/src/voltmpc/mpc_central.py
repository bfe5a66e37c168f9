"""Centralized one-step-ahead MPC over voltage/angle increments and
reactive compensation.

Decision vector y = [dV_1..N, dth_1..N, u_1..N] for the N non-slack buses.
The linearized nodal balance supplies two equality rows per bus; voltage,
angle-increment, and compensation limits become box bounds. The slack bus
contributes no decision variables (its increments are zero) but its current
voltage enters the sensitivity blocks as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingPartialsError, MpcInfeasibleError, MpcSolveError
from .estimation import PartialBlock
from .qpsolve import QpProblem, QpSolution, solve_qp

U_LIMIT_DEFAULT = 0.05
V_MIN_DEFAULT = 0.95
V_MAX_DEFAULT = 1.05
DTHETA_LIMIT_DEFAULT = 0.1


@dataclass(frozen=True)
class MpcBounds:
    """Box limits shared by both controller variants (p.u. / rad)."""

    u_min: float = -U_LIMIT_DEFAULT
    u_max: float = U_LIMIT_DEFAULT
    v_min: float = V_MIN_DEFAULT
    v_max: float = V_MAX_DEFAULT
    dtheta_min: float = -DTHETA_LIMIT_DEFAULT
    dtheta_max: float = DTHETA_LIMIT_DEFAULT

    def __post_init__(self):
        if not (
            self.u_min <= self.u_max
            and self.v_min <= self.v_max
            and self.dtheta_min <= self.dtheta_max
        ):
            raise ValueError("bounds must be ordered min <= max")


@dataclass(eq=False)
class MpcInput:
    """Everything one control instant needs.

    Arrays are indexed by bus 0..N (slack included); slack entries of the
    delta vectors are ignored. ``partials`` maps each non-slack bus to its
    sensitivity block, whose neighbor keys define the coupling pattern.
    """

    v_now: np.ndarray
    theta_now: np.ndarray
    dp: np.ndarray  # predicted change of active injection, t -> t+1
    dq: np.ndarray  # predicted change of reactive injection (before control)
    partials: dict[int, PartialBlock]
    v_ref: float = 1.0
    weights: np.ndarray | float = 1.0
    bounds: MpcBounds = field(default_factory=MpcBounds)

    @property
    def n_bus(self) -> int:
        return self.v_now.shape[0]

    def weight(self, i: int) -> float:
        if np.isscalar(self.weights):
            return float(self.weights)
        return float(self.weights[i])


@dataclass(eq=False)
class MpcSolution:
    """Per non-slack-bus increments and compensations (index 0 unused)."""

    dv: np.ndarray
    dtheta: np.ndarray
    u: np.ndarray
    objective: float
    status: str
    qp: QpSolution | None = None


def tracking_objective(inp: MpcInput, dv: np.ndarray, u: np.ndarray) -> float:
    """Sum over buses of (V + dV - Vref)^2 + (w u)^2."""
    total = 0.0
    for i in range(1, inp.n_bus):
        total += (inp.v_now[i] + dv[i] - inp.v_ref) ** 2
        total += (inp.weight(i) * u[i]) ** 2
    return float(total)


def build_cmpc(inp: MpcInput, norm_mode: str = "squared") -> QpProblem:
    """Assemble the control QP for one instant.

    ``norm_mode='squared'`` uses the smooth quadratic tracking cost;
    ``'exact'`` minimizes the sum of absolute deviations instead, via an
    e+ - e- split of each cost term (still a QP with H = 0 on the extras).

    Raises:
        MissingPartialsError: a non-slack bus has no sensitivity block.
    """
    n = inp.n_bus
    ns = n - 1  # non-slack count
    for i in range(1, n):
        if i not in inp.partials:
            raise MissingPartialsError(f"no partial block for bus {i}")
    if norm_mode not in ("squared", "exact"):
        raise ValueError(f"unknown norm mode {norm_mode!r}")

    def col_dv(i):  # bus i in 1..N
        return i - 1

    def col_dth(i):
        return ns + i - 1

    def col_u(i):
        return 2 * ns + i - 1

    n_var = 3 * ns
    extra = 4 * ns if norm_mode == "exact" else 0
    h = np.zeros((n_var + extra, n_var + extra))
    f = np.zeros(n_var + extra)
    a_rows: list[np.ndarray] = []
    b_rows: list[float] = []
    lo = np.full(n_var + extra, -np.inf)
    hi = np.full(n_var + extra, np.inf)
    names = []

    bd = inp.bounds
    for i in range(1, n):
        blk = inp.partials[i]
        p_row = np.zeros(n_var + extra)
        q_row = np.zeros(n_var + extra)
        p_row[col_dv(i)] = blk.own[0]
        p_row[col_dth(i)] = blk.own[1]
        q_row[col_dv(i)] = blk.own[2]
        q_row[col_dth(i)] = blk.own[3]
        for k, vec in blk.neighbors.items():
            if k == 0:
                continue  # slack increments are zero
            p_row[col_dv(k)] = vec[0]
            p_row[col_dth(k)] = vec[1]
            q_row[col_dv(k)] = vec[2]
            q_row[col_dth(k)] = vec[3]
        q_row[col_u(i)] = -1.0
        a_rows.append(p_row)
        b_rows.append(float(inp.dp[i]))
        a_rows.append(q_row)
        b_rows.append(float(inp.dq[i]))

        lo[col_dv(i)] = bd.v_min - inp.v_now[i]
        hi[col_dv(i)] = bd.v_max - inp.v_now[i]
        lo[col_dth(i)] = bd.dtheta_min
        hi[col_dth(i)] = bd.dtheta_max
        lo[col_u(i)] = bd.u_min
        hi[col_u(i)] = bd.u_max

        w = inp.weight(i)
        if norm_mode == "squared":
            h[col_dv(i), col_dv(i)] = 2.0
            f[col_dv(i)] = 2.0 * (inp.v_now[i] - inp.v_ref)
            h[col_u(i), col_u(i)] = 2.0 * w * w
        else:
            # e+ - e- = V + dV - Vref and p+ - p- = w u, cost = sum of all four
            base = n_var + 4 * (i - 1)
            ev_p, ev_m, eu_p, eu_m = base, base + 1, base + 2, base + 3
            lo[ev_p] = lo[ev_m] = lo[eu_p] = lo[eu_m] = 0.0
            f[ev_p] = f[ev_m] = f[eu_p] = f[eu_m] = 1.0
            row = np.zeros(n_var + extra)
            row[col_dv(i)] = 1.0
            row[ev_p] = -1.0
            row[ev_m] = 1.0
            a_rows.append(row)
            b_rows.append(float(inp.v_ref - inp.v_now[i]))
            row = np.zeros(n_var + extra)
            row[col_u(i)] = w
            row[eu_p] = -1.0
            row[eu_m] = 1.0
            a_rows.append(row)
            b_rows.append(0.0)

    for i in range(1, n):
        names.append(f"dV[{i}]")
    for i in range(1, n):
        names.append(f"dth[{i}]")
    for i in range(1, n):
        names.append(f"u[{i}]")
    for _ in range(extra):
        names.append("abs-split")

    return QpProblem(
        h=h,
        f=f,
        a_eq=np.vstack(a_rows),
        b_eq=np.array(b_rows),
        lo=lo,
        hi=hi,
        names=tuple(names),
    )


def split_solution(inp: MpcInput, qp: QpSolution, norm_mode: str = "squared") -> MpcSolution:
    n = inp.n_bus
    ns = n - 1
    dv = np.zeros(n)
    dtheta = np.zeros(n)
    u = np.zeros(n)
    dv[1:] = qp.y[:ns]
    dtheta[1:] = qp.y[ns : 2 * ns]
    u[1:] = qp.y[2 * ns : 3 * ns]
    if norm_mode == "squared":
        objective = tracking_objective(inp, dv, u)
    else:
        objective = float(
            sum(
                abs(inp.v_now[i] + dv[i] - inp.v_ref) + abs(inp.weight(i) * u[i])
                for i in range(1, n)
            )
        )
    return MpcSolution(
        dv=dv, dtheta=dtheta, u=u, objective=objective, status=qp.status, qp=qp
    )


def solve_cmpc(
    inp: MpcInput,
    *,
    norm_mode: str = "squared",
    tol: float = 1e-9,
    max_iter: int = 20000,
) -> MpcSolution:
    """Build and solve the centralized control QP.

    Raises:
        MpcInfeasibleError: limits cannot absorb the predicted disturbance
            (the partial solution rides on the exception).
        MpcSolveError: solver hit its iteration cap.
    """
    problem = build_cmpc(inp, norm_mode=norm_mode)
    qp = solve_qp(problem, tol=tol, max_iter=max_iter)
    sol = split_solution(inp, qp, norm_mode=norm_mode)
    if qp.status == "infeasible":
        raise MpcInfeasibleError("control QP infeasible", solution=sol)
    if qp.status != "optimal":
        raise MpcSolveError(f"control QP ended with status {qp.status}", solution=sol)
    return sol
