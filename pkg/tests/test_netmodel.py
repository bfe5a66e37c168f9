import math
import re

import numpy as np
import pytest

from voltmpc import netmodel as nm
from voltmpc.cases import case_path
from voltmpc.errors import (
    CaseSyntaxError,
    DanglingReferenceError,
    DisconnectedGraphError,
    MissingTableError,
    UnknownBusError,
    ZeroImpedanceError,
)

from conftest import CHAIN4_TEXT, TWO_BUS_TEXT


def test_parse_two_bus_case():
    case = nm.parse_matpower_case(TWO_BUS_TEXT)
    assert case.base_mva == 100.0
    assert len(case.buses) == 2
    assert len(case.branches) == 1
    br = case.branches[0]
    assert (br.from_bus, br.to_bus) == (1, 2)
    assert br.r == 0.0
    assert br.x == 0.1
    assert case.buses[1].pd == 10.0
    assert case.buses[1].qd == 5.0


def count_matrix_rows(text: str, table: str) -> int:
    """Independent row counter: semicolon-terminated numeric rows between
    '<table> = [' and the closing bracket."""
    block = re.search(rf"\.{table}\s*=\s*\[(.*?)\]", text, re.S).group(1)
    return sum(
        1
        for chunk in block.split(";")
        if chunk.strip() and not chunk.strip().startswith("%")
    )


def test_parse_case30_counts(case30):
    with open(case_path("case30.m"), encoding="utf-8") as fh:
        raw = fh.read()
    assert len(case30.buses) == count_matrix_rows(raw, "bus") == 30
    assert len(case30.branches) == count_matrix_rows(raw, "branch") == 41
    assert len(case30.gens) == count_matrix_rows(raw, "gen") == 6


def test_parse_case57_counts():
    case = nm.load_case(case_path("case57.m"))
    assert len(case.buses) == 57
    assert len(case.branches) == 80


def test_dangling_branch_reference():
    bad = TWO_BUS_TEXT.replace("1 2 0.0 0.1", "1 99 0.0 0.1")
    with pytest.raises(DanglingReferenceError):
        nm.parse_matpower_case(bad)


def test_dangling_gen_reference():
    bad = TWO_BUS_TEXT.replace("1 0 0 10 -10", "77 0 0 10 -10")
    with pytest.raises(DanglingReferenceError):
        nm.parse_matpower_case(bad)


def test_missing_table():
    no_gen = re.sub(r"mpc\.gen = \[.*?\];", "", TWO_BUS_TEXT, flags=re.S)
    with pytest.raises(MissingTableError):
        nm.parse_matpower_case(no_gen)


def test_non_numeric_field_reports_line():
    bad = TWO_BUS_TEXT.replace("1 2 0.0 0.1", "1 2 oops 0.1")
    with pytest.raises(CaseSyntaxError) as err:
        nm.parse_matpower_case(bad)
    assert "oops" in str(err.value)
    assert err.value.line is not None


def test_unbalanced_bracket():
    bad = TWO_BUS_TEXT.replace("1 2 0.0 0.1 0 100 100 100 0 0 1 -360 360;\n];", "1 2 0.0 0.1;")
    with pytest.raises(CaseSyntaxError):
        nm.parse_matpower_case(bad)


def test_comments_and_scientific_notation():
    text = TWO_BUS_TEXT.replace("0.0 0.1", "0.0 1e-1  % inline comment")
    case = nm.parse_matpower_case(text)
    assert case.branches[0].x == pytest.approx(0.1)


# --- build_network ---------------------------------------------------------

def make_case(branch_rows, n_bus=2):
    buses = "\n".join(
        f"{i+1} {3 if i == 0 else 1} 0 0 0 0 1 1 0 135 1 1.05 0.95;"
        for i in range(n_bus)
    )
    branches = "\n".join(branch_rows)
    return nm.parse_matpower_case(
        f"mpc.baseMVA = 100;\nmpc.bus = [\n{buses}\n];\n"
        f"mpc.gen = [1 0 0 0 0 1 100 1 0 0;];\nmpc.branch = [\n{branches}\n];"
    )


def test_series_admittance_pure_reactance():
    net = nm.build_network(make_case(["1 2 0 0.1 0 0 0 0 0 0 1;"]))
    ln = net.lines[0]
    assert ln.g == pytest.approx(0.0)
    assert ln.b == pytest.approx(-10.0)


def test_series_admittance_complex():
    net = nm.build_network(make_case(["1 2 0.02 0.06 0 0 0 0 0 0 1;"]))
    ln = net.lines[0]
    assert ln.g == pytest.approx(5.0)
    assert ln.b == pytest.approx(-15.0)


def test_parallel_branches_merged():
    net = nm.build_network(
        make_case(["1 2 0 0.1 0 0 0 0 0 0 1;", "1 2 0 0.1 0 0 0 0 0 0 1;"])
    )
    assert len(net.lines) == 1
    assert net.lines[0].b == pytest.approx(-20.0)


def test_out_of_service_branch_skipped():
    with pytest.raises(DisconnectedGraphError):
        nm.build_network(make_case(["1 2 0 0.1 0 0 0 0 0 0 0;"]))


def test_zero_impedance_branch():
    with pytest.raises(ZeroImpedanceError):
        nm.build_network(make_case(["1 2 0 0 0 0 0 0 0 0 1;"]))


def test_disconnected_graph():
    with pytest.raises(DisconnectedGraphError):
        nm.build_network(make_case(["1 2 0 0.1 0 0 0 0 0 0 1;"], n_bus=3))


def test_slack_reindexed_to_zero():
    text = TWO_BUS_TEXT.replace("1 3 0 0", "1 1 0 0").replace(
        "2 1 10 5", "2 3 10 5"
    )
    net = nm.build_network(nm.parse_matpower_case(text))
    assert net.original_ids[0] == 2


# --- admittance matrix ------------------------------------------------------

def test_admittance_two_bus():
    net = nm.build_network(make_case(["1 2 0.2 0.4 0 0 0 0 0 0 1;"]))
    # series y = 1/(0.2+0.4j) = 1 - 2j
    y = nm.build_admittance(net).matrix
    expected = np.array([[1 - 2j, -1 + 2j], [-1 + 2j, 1 - 2j]])
    assert np.allclose(y, expected, atol=1e-14)


def test_admittance_nonadjacent_zero(chain4_net):
    y = nm.build_admittance(chain4_net).matrix
    assert y[0, 2] == 0 and y[0, 3] == 0 and y[1, 3] == 0


def test_admittance_case30_row_sums(net30, case30):
    """Row sums vanish under the zero-shunt convention; diagonal equals an
    independently accumulated sum of incident branch admittances."""
    y = nm.build_admittance(net30).matrix
    assert np.abs(y.sum(axis=1)).max() < 1e-12

    to_int = {oid: i for i, oid in enumerate(net30.original_ids)}
    accum = np.zeros(net30.n_bus, dtype=complex)
    for br in case30.branches:
        if br.status:
            y_line = 1.0 / complex(br.r, br.x)
            accum[to_int[br.from_bus]] += y_line
            accum[to_int[br.to_bus]] += y_line
    assert np.abs(np.diag(y) - accum).max() < 1e-12


def test_admittance_symmetry_and_sparsity_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(3, 12))
        rows = [
            f"{i} {i+1} {rng.uniform(0.0, 0.1):.6f} {rng.uniform(0.02, 0.3):.6f} 0 0 0 0 0 0 1;"
            for i in range(1, n)
        ]
        for _ in range(int(rng.integers(0, n))):
            a, b = rng.choice(np.arange(1, n + 1), size=2, replace=False)
            rows.append(f"{a} {b} 0.01 {rng.uniform(0.05, 0.4):.6f} 0 0 0 0 0 0 1;")
        net = nm.build_network(make_case(rows, n_bus=n))
        y = nm.build_admittance(net).matrix
        assert np.array_equal(y, y.T)
        pattern = {(ln.from_bus, ln.to_bus) for ln in net.lines}
        for i in range(n):
            for k in range(i + 1, n):
                if (i, k) in pattern:
                    assert y[i, k] != 0
                else:
                    assert y[i, k] == 0


def test_shunts_stored_but_excluded_by_default(case30, net30):
    # bus 5 carries Bs = 0.19 MVAr in the case table
    idx = net30.original_ids.index(5)
    assert net30.shunt_b[idx] == pytest.approx(0.0019)
    y0 = nm.build_admittance(net30).matrix
    y1 = nm.build_admittance(net30, with_shunts=True).matrix
    row_sums = y1.sum(axis=1)
    assert row_sums[idx] == pytest.approx(1j * 0.0019, abs=1e-12)
    assert np.abs(y0.sum(axis=1)).max() < 1e-12


# --- neighbors --------------------------------------------------------------

def test_neighbors_chain(chain4_net):
    assert nm.neighbors(chain4_net, 2) == {1, 3}
    assert nm.neighbors(chain4_net, 3) == {2}
    assert nm.neighbors(chain4_net, 0) == {1}


def test_neighbors_unknown_bus(chain4_net):
    with pytest.raises(UnknownBusError):
        nm.neighbors(chain4_net, 99)


def test_neighbors_never_contains_self(net30):
    for i in range(net30.n_bus):
        assert i not in nm.neighbors(net30, i)


# --- serialization -----------------------------------------------------------

def test_case_json_roundtrip(case30):
    text = nm.case_to_json(case30)
    again = nm.case_from_json(text)
    assert again == case30


def test_load_case_json(tmp_path, case30):
    path = tmp_path / "case30.json"
    path.write_text(nm.case_to_json(case30), encoding="utf-8")
    assert nm.load_case(str(path)) == case30


def test_mutual_params_sign(two_bus_net):
    # series y = -10j -> mutual entries (0, +10), both orientations
    params = nm.mutual_params(two_bus_net)
    assert params[(0, 1)] == pytest.approx((0.0, 10.0))
    assert params[(1, 0)] == pytest.approx((0.0, 10.0))
