import numpy as np
import pytest

from voltmpc import netmodel as nm
from voltmpc.cases import case_path

# 4-bus chain 0-1-2-3 after re-indexing (case ids 1-2-3-4)
CHAIN4_TEXT = """
function mpc = chain4
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1 0 135 1 1.05 0.95;
2 1 10 4 0 0 1 1 0 135 1 1.05 0.95;
3 1 15 6 0 0 1 1 0 135 1 1.05 0.95;
4 1 8 3 0 0 1 1 0 135 1 1.05 0.95;
];
mpc.gen = [
1 0 0 0 0 1 100 1 0 0;
];
mpc.branch = [
1 2 0.02 0.08 0 0 0 0 0 0 1 -360 360;
2 3 0.03 0.1 0 0 0 0 0 0 1 -360 360;
3 4 0.04 0.12 0 0 0 0 0 0 1 -360 360;
];
"""

TWO_BUS_TEXT = """
function mpc = pair
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1.00 0 110 1 1.05 0.95;
2 1 10 5 0 0 1 1.00 0 110 1 1.05 0.95;
];
mpc.gen = [
1 0 0 10 -10 1.00 100 1 50 0;
];
mpc.branch = [
1 2 0.0 0.1 0 100 100 100 0 0 1 -360 360;
];
"""


@pytest.fixture(scope="session")
def case30():
    return nm.load_case(case_path("case30.m"))


@pytest.fixture(scope="session")
def net30(case30):
    return nm.build_network(case30)


@pytest.fixture(scope="session")
def chain4_case():
    return nm.parse_matpower_case(CHAIN4_TEXT)


@pytest.fixture(scope="session")
def chain4_net(chain4_case):
    return nm.build_network(chain4_case)


@pytest.fixture(scope="session")
def two_bus_net():
    return nm.build_network(nm.parse_matpower_case(TWO_BUS_TEXT))


def nominal_injections(case, net, q_support=0.35):
    """Case-table loads plus a reactive-supported dispatch, in p.u."""
    base = case.base_mva
    to_int = {oid: i for i, oid in enumerate(net.original_ids)}
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    for b in case.buses:
        p[to_int[b.bus_id]] -= b.pd / base
        q[to_int[b.bus_id]] -= b.qd / base
    for g in case.gens:
        if g.status:
            p[to_int[g.bus]] += g.pg / base
            q[to_int[g.bus]] += q_support * g.qmax / base
    return p, q


def random_small_instance(rng, n_bus=None):
    """Random 2-4 bus control instant: a chain with random mutual line
    parameters, a near-nominal state, and small predicted changes."""
    from voltmpc.estimation import assemble_partials
    from voltmpc.mpc_central import MpcInput

    if n_bus is None:
        n_bus = int(rng.integers(2, 5))
    params = {}
    for i in range(n_bus - 1):
        g = rng.uniform(-2.0, 2.0)
        b = rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 12.0)
        params[(i, i + 1)] = (g, b)
        params[(i + 1, i)] = (g, b)
    v = rng.uniform(0.97, 1.03, n_bus)
    v[0] = 1.0
    th = rng.uniform(-0.1, 0.1, n_bus)
    th[0] = 0.0
    partials = {}
    for i in range(1, n_bus):
        nbrs = [k for k in (i - 1, i + 1) if 0 <= k < n_bus]
        partials[i] = assemble_partials(
            i, dict(enumerate(v)), dict(enumerate(th)), nbrs, params
        )
    dp = np.concatenate([[0.0], rng.uniform(-0.02, 0.02, n_bus - 1)])
    dq = np.concatenate([[0.0], rng.uniform(-0.02, 0.02, n_bus - 1)])
    return MpcInput(v_now=v, theta_now=th, dp=dp, dq=dq, partials=partials)


def reduced_equality_solve(inp, u):
    """Solve the two balance rows per bus for (dV, dth) given u; None when
    the reduced system is singular."""
    n = inp.n_bus
    ns = n - 1
    a = np.zeros((2 * ns, 2 * ns))
    rhs = np.zeros(2 * ns)
    for i in range(1, n):
        blk = inp.partials[i]
        r_p, r_q = 2 * (i - 1), 2 * (i - 1) + 1
        a[r_p, i - 1] = blk.own[0]
        a[r_p, ns + i - 1] = blk.own[1]
        a[r_q, i - 1] = blk.own[2]
        a[r_q, ns + i - 1] = blk.own[3]
        for k, vec in blk.neighbors.items():
            if k == 0:
                continue
            a[r_p, k - 1] = vec[0]
            a[r_p, ns + k - 1] = vec[1]
            a[r_q, k - 1] = vec[2]
            a[r_q, ns + k - 1] = vec[3]
        rhs[r_p] = inp.dp[i]
        rhs[r_q] = inp.dq[i] + u[i - 1]
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        return None
    return sol[:ns], sol[ns:]


def grid_search_oracle(inp, resolution=1e-4):
    """Brute-force reference optimum: enumerate the compensation vector on a
    refining grid, solving the balance rows exactly for the state increments
    and discarding box-violating candidates. Returns (best objective, u)."""
    from voltmpc.mpc_central import tracking_objective

    n = inp.n_bus
    ns = n - 1
    bd = inp.bounds
    lo = np.full(ns, bd.u_min)
    hi = np.full(ns, bd.u_max)

    def evaluate(u):
        red = reduced_equality_solve(inp, u)
        if red is None:
            return None
        dv, dth = red
        v_next = inp.v_now[1:] + dv
        if (v_next < bd.v_min - 1e-12).any() or (v_next > bd.v_max + 1e-12).any():
            return None
        if (dth < bd.dtheta_min - 1e-12).any() or (dth > bd.dtheta_max + 1e-12).any():
            return None
        dv_full = np.concatenate([[0.0], dv])
        u_full = np.concatenate([[0.0], u])
        return tracking_objective(inp, dv_full, u_full)

    points = 11 if ns >= 3 else (21 if ns == 2 else 1001)
    best_u, best_obj = None, np.inf
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    while True:
        axes = [np.linspace(c - h, c + h, points) for c, h in zip(center, half)]
        mesh = np.meshgrid(*axes, indexing="ij") if ns > 1 else [axes[0]]
        candidates = np.stack([m.ravel() for m in mesh], axis=1)
        for u in candidates:
            u_clipped = np.clip(u, bd.u_min, bd.u_max)
            obj = evaluate(u_clipped)
            if obj is not None and obj < best_obj:
                best_obj, best_u = obj, u_clipped.copy()
        spacing = 2 * half.max() / (points - 1)
        if spacing <= resolution:
            break
        if best_u is None:
            return np.inf, None
        center = best_u
        half = np.full(ns, 2.5 * spacing)
    return best_obj, best_u
