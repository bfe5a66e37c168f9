"""Data-driven line-parameter estimation and linearization sensitivities.

Each line's mutual admittance entries (G_ik, B_ik) are recovered from the
endpoint measurements {V_i, V_k, th_i, th_k, P_ik, Q_ik, P_ki, Q_ki} by
least squares on the four sending-end flow expressions. The same (G, B)
values feed the partial-derivative blocks used to linearize the nodal
balance around the current instant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MissingEstimateError, SingularInformationError
from .powerflow import MeasurementRow, MeasurementSnapshot
from .netmodel import NetworkModel

COND_LIMIT_DEFAULT = 1e12


@dataclass(frozen=True)
class AdmittanceEstimate:
    """Mutual admittance entries of one undirected line, with diagnostics."""

    from_bus: int
    to_bus: int
    G: float
    B: float
    cond: float  # condition number of the normal matrix A'A
    window: int  # number of stacked snapshots


def regression_rows(row: MeasurementRow) -> tuple[np.ndarray, np.ndarray]:
    """One snapshot's 4x2 coefficient block and 4-vector of measured flows."""
    v_i, v_k = row.v_i, row.v_k
    d_ik = row.theta_i - row.theta_k
    cross_cos = v_i * v_k * np.cos(d_ik)
    cross_sin = v_i * v_k * np.sin(d_ik)
    # reverse direction: angles swap sign, magnitudes swap roles
    cross_sin_rev = -cross_sin
    a = np.array(
        [
            [cross_cos - v_i * v_i, cross_sin],
            [cross_sin, v_i * v_i - cross_cos],
            [cross_cos - v_k * v_k, cross_sin_rev],
            [cross_sin_rev, v_k * v_k - cross_cos],
        ]
    )
    b = np.array([row.p_ik, row.q_ik, row.p_ki, row.q_ki])
    return a, b


def estimate_line(
    rows: Sequence[MeasurementRow],
    *,
    from_bus: int = -1,
    to_bus: int = -1,
    cond_limit: float = COND_LIMIT_DEFAULT,
) -> AdmittanceEstimate:
    """Least-squares (G, B) for one line from stacked measurement rows.

    Solves min ||A theta - b|| over theta = (G, B) via an orthogonal
    decomposition of A, which reproduces the normal-equation solution
    (A'A)^-1 A'b whenever A has full column rank.

    Raises:
        SingularInformationError: cond(A'A) exceeds ``cond_limit`` (e.g.,
            a quiescent line where every regressor entry vanishes).
    """
    if not rows:
        raise ValueError("estimate_line needs at least one measurement row")
    blocks = [regression_rows(r) for r in rows]
    a = np.vstack([blk[0] for blk in blocks])
    b = np.concatenate([blk[1] for blk in blocks])

    # SVD gives the LS solution and cond(A'A) = (smax/smin)^2 in one pass
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[0] == 0.0:
        raise SingularInformationError(float("inf"), (from_bus, to_bus))
    cond = float("inf") if s[-1] == 0.0 else float((s[0] / s[-1]) ** 2)
    if cond > cond_limit:
        raise SingularInformationError(cond, (from_bus, to_bus))
    theta = vt.T @ ((u.T @ b) / s)
    return AdmittanceEstimate(
        from_bus=from_bus,
        to_bus=to_bus,
        G=float(theta[0]),
        B=float(theta[1]),
        cond=cond,
        window=len(rows),
    )


def estimate_all_lines(
    windows: Mapping[tuple[int, int], Sequence[MeasurementRow]],
    previous: Mapping[tuple[int, int], AdmittanceEstimate] | None = None,
    *,
    cond_limit: float = COND_LIMIT_DEFAULT,
) -> dict[tuple[int, int], AdmittanceEstimate]:
    """Estimate every line; fall back to the previous instant's estimate
    when a line's operating point is momentarily uninformative."""
    out: dict[tuple[int, int], AdmittanceEstimate] = {}
    for (i, k), rows in windows.items():
        try:
            out[(i, k)] = estimate_line(
                rows, from_bus=i, to_bus=k, cond_limit=cond_limit
            )
        except SingularInformationError:
            if previous is not None and (i, k) in previous:
                out[(i, k)] = previous[(i, k)]
            else:
                raise
    return out


def estimates_as_params(
    estimates: Mapping[tuple[int, int], AdmittanceEstimate],
) -> dict[tuple[int, int], tuple[float, float]]:
    """(G, B) lookup keyed by both orientations of each line."""
    params: dict[tuple[int, int], tuple[float, float]] = {}
    for (i, k), est in estimates.items():
        params[(i, k)] = (est.G, est.B)
        params[(k, i)] = (est.G, est.B)
    return params


# ---------------------------------------------------------------------------
# Partial-derivative blocks of the nodal balance functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartialBlock:
    """Sensitivities of bus i's P/Q balance to its own and neighbor variables.

    Vectors are ordered (dP/dV, dP/dtheta, dQ/dV, dQ/dtheta); ``own``
    differentiates with respect to bus i's (V_i, th_i), ``neighbors[k]``
    with respect to (V_k, th_k).
    """

    bus: int
    own: np.ndarray
    neighbors: dict[int, np.ndarray]


def assemble_partials(
    i: int,
    v: Mapping[int, float] | np.ndarray,
    theta: Mapping[int, float] | np.ndarray,
    neighbor_ids: Iterable[int],
    params: Mapping[tuple[int, int], tuple[float, float]],
) -> PartialBlock:
    """Evaluate the per-bus sensitivity blocks at the measured state.

    ``params`` supplies each incident line's mutual entries (G_ik, B_ik);
    pass estimates or plant truth interchangeably.

    Raises:
        MissingEstimateError: a line incident to bus i has no parameters.
    """
    own = np.zeros(4)
    blocks: dict[int, np.ndarray] = {}
    v_i, th_i = v[i], theta[i]
    for k in sorted(neighbor_ids):
        if (i, k) not in params:
            raise MissingEstimateError(f"no admittance parameters for line ({i}, {k})")
        g, b = params[(i, k)]
        v_k, th_k = v[k], theta[k]
        delta = th_i - th_k
        cos_d, sin_d = np.cos(delta), np.sin(delta)
        cross = v_i * v_k
        own += np.array(
            [
                (v_k * cos_d - 2.0 * v_i) * g + v_k * sin_d * b,
                -cross * sin_d * g + cross * cos_d * b,
                v_k * sin_d * g + (2.0 * v_i - v_k * cos_d) * b,
                cross * cos_d * g + cross * sin_d * b,
            ]
        )
        blocks[k] = np.array(
            [
                v_i * cos_d * g + v_i * sin_d * b,
                cross * sin_d * g - cross * cos_d * b,
                v_i * sin_d * g - v_i * cos_d * b,
                -cross * cos_d * g - cross * sin_d * b,
            ]
        )
    return PartialBlock(bus=i, own=own, neighbors=blocks)


def partials_for_network(
    snapshot: MeasurementSnapshot,
    net: NetworkModel,
    params: Mapping[tuple[int, int], tuple[float, float]],
) -> dict[int, PartialBlock]:
    """Partial blocks for every non-slack bus, evaluated at a snapshot."""
    return {
        i: assemble_partials(i, snapshot.v, snapshot.theta, net.adjacency[i], params)
        for i in net.non_slack()
    }
