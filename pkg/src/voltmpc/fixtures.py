"""Synthesized 24-hour scenario profiles for the bundled test networks.

The shapes follow a familiar daily pattern: a midday solar bell for the
renewable share and a double-humped demand curve peaking in the evening.
Renewables are sized to supply half of the generation at their peak, and
the demand stress is chosen so that the uncontrolled plant dips below
0.95 p.u. in the evening while staying solvable. Regenerate the committed
CSVs with ``python -m voltmpc.fixtures``.
"""

from __future__ import annotations

import numpy as np

from .netmodel import CaseData, load_case
from .scenario import ProfileSeries, profiles_to_csv


def solar_shape(hours: np.ndarray) -> np.ndarray:
    return np.exp(-(((hours - 12.5) / 3.0) ** 2))


def demand_shape(hours: np.ndarray) -> np.ndarray:
    return (
        0.70
        + 0.17 * np.exp(-(((hours - 9.0) / 2.6) ** 2))
        + 0.42 * np.exp(-(((hours - 19.5) / 2.3) ** 2))
    )


def stressed_profiles(
    case: CaseData,
    instants: int = 96,
    *,
    stress: float,
    q_support: float,
    gen_overrides: dict[int, float] | None = None,
    wiggle: float = 0.02,
    load_floor_mw: float = 1.5,
    seed: int = 11,
) -> ProfileSeries:
    """Build a day of per-bus profiles from a case's nominal loads.

    ``stress`` scales demand; ``q_support`` sets generator reactive output
    as a fraction of each unit's Qmax, following the demand shape;
    ``gen_overrides`` replaces the case's active dispatch (p.u. values,
    keyed by original bus id), which also selects which buses generate.
    ``load_floor_mw`` puts a small demand on otherwise unloaded non-slack
    buses so every line carries flow (keeps all lines observable).
    """
    base = case.base_mva
    hours = np.arange(instants) * 24.0 / instants
    solar = solar_shape(hours)
    demand = demand_shape(hours) * stress

    bus_ids = tuple(sorted(b.bus_id for b in case.buses))
    col = {bus: j for j, bus in enumerate(bus_ids)}
    n = len(bus_ids)

    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    per_bus = 1.0 + wiggle * np.sin(
        2.0 * np.pi * np.arange(instants)[:, None] / instants + phases[None, :]
    )

    slack_ids = {b.bus_id for b in case.buses if b.bus_type == 3}
    pd = np.zeros((instants, n))
    qd = np.zeros((instants, n))
    for b in case.buses:
        j = col[b.bus_id]
        pd_mw = b.pd
        qd_mw = b.qd
        if b.bus_id not in slack_ids and pd_mw < load_floor_mw:
            pd_mw = load_floor_mw
            qd_mw = max(qd_mw, load_floor_mw / 3.0)
        pd[:, j] = pd_mw / base * demand * per_bus[:, j]
        qd[:, j] = qd_mw / base * demand * per_bus[:, j]

    # conventional block is flat; the renewable block rides the solar bell
    # and matches the conventional total at its peak (a 50/50 split there)
    dispatch: dict[int, float] = {}
    qmax: dict[int, float] = {}
    for g in case.gens:
        if g.status:
            dispatch[g.bus] = dispatch.get(g.bus, 0.0) + g.pg / base
            qmax[g.bus] = qmax.get(g.bus, 0.0) + g.qmax / base
    if gen_overrides is not None:
        dispatch = dict(gen_overrides)

    pg = np.zeros((instants, n))
    qg = np.zeros((instants, n))
    for bus, level in dispatch.items():
        j = col[bus]
        conv = 0.5 * level
        pg[:, j] = conv + conv * solar
        # units without a case Qmax get a 40%-of-dispatch reactive capability
        qg[:, j] = q_support * qmax.get(bus, 0.4 * level) * demand_shape(hours)

    return ProfileSeries(bus_ids=bus_ids, pg=pg, qg=qg, pd=pd, qd=qd)


# frozen tuning for the committed fixtures
PROFILE30 = dict(stress=0.88, q_support=0.40)
PROFILE57 = dict(
    stress=0.60,
    q_support=0.45,
    gen_overrides=None,  # filled in below
)


def profile57_overrides(case: CaseData) -> dict[int, float]:
    """The 57-bus fixture spreads generation over buses 3, 8, 12 and 13-57."""
    base = case.base_mva
    total_load = sum(b.pd for b in case.buses) / base
    big = {3: 0.18 * total_load, 8: 0.22 * total_load, 12: 0.20 * total_load}
    small_buses = [b for b in range(13, 58)]
    small_each = 0.40 * total_load / len(small_buses)
    out = dict(big)
    for b in small_buses:
        out[b] = small_each
    return out


def build_profile30(case: CaseData, instants: int = 96) -> ProfileSeries:
    return stressed_profiles(case, instants, **PROFILE30)


def build_profile57(case: CaseData, instants: int = 96) -> ProfileSeries:
    params = dict(PROFILE57)
    params["gen_overrides"] = profile57_overrides(case)
    return stressed_profiles(case, instants, **params)


def main() -> None:
    import os

    from .cases import case_path

    here = os.path.dirname(case_path("case30.m"))
    for name, builder in (("case30.m", build_profile30), ("case57.m", build_profile57)):
        case = load_case(case_path(name))
        series = builder(case)
        out = os.path.join(here, f"profiles{name[4:6]}.csv")
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(profiles_to_csv(series))
        print(f"wrote {out}")


if __name__ == "__main__":
    main()
