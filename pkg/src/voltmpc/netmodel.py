"""Grid topology: MATPOWER-style case parsing, network graph, bus admittance matrix.

Bus 0 is always the slack/reference bus (V = 1 p.u., angle = 0 rad). Case files
keep their original bus numbering; `build_network` re-indexes buses to a
contiguous 0..N range with the slack mapped to 0 and records the mapping.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CaseSyntaxError,
    DanglingReferenceError,
    DisconnectedGraphError,
    MissingTableError,
    UnknownBusError,
    ZeroImpedanceError,
)

# MATPOWER bus types
PQ, PV, SLACK = 1, 2, 3


@dataclass(frozen=True)
class BusRecord:
    """One row of the case bus table (raw case units: MW / MVAr / kV)."""

    bus_id: int
    bus_type: int
    pd: float
    qd: float
    gs: float
    bs: float
    base_kv: float


@dataclass(frozen=True)
class BranchRecord:
    """One row of the case branch table (impedances in p.u. on system base)."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap: float
    status: int


@dataclass(frozen=True)
class GenRecord:
    """One row of the case generator table (raw case units: MW / MVAr)."""

    bus: int
    pg: float
    qg: float
    qmax: float
    qmin: float
    status: int


@dataclass(frozen=True)
class CaseData:
    name: str
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...]

    def bus_ids(self) -> set[int]:
        return {b.bus_id for b in self.buses}


# ---------------------------------------------------------------------------
# MATPOWER-syntax parsing
# ---------------------------------------------------------------------------

_ASSIGN_RE = re.compile(r"^\s*(?:\w+\.)?(\w+)\s*=\s*(.*)$")
_FUNCTION_RE = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")


def _strip_comment(line: str) -> str:
    # '%' starts a comment unless inside a quoted string (only version uses quotes)
    out = []
    in_quote = False
    for ch in line:
        if ch == "'":
            in_quote = not in_quote
        if ch == "%" and not in_quote:
            break
        out.append(ch)
    return "".join(out)


def _parse_number(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise CaseSyntaxError(f"non-numeric field {token!r}", line_no) from None


def _parse_matrix(lines: list[str], start: int, first_body: str) -> tuple[list[list[float]], list[int], int]:
    """Collect bracketed matrix rows starting at lines[start].

    Rows are terminated by ';' or by a newline. Returns (rows, per-row line
    numbers, index of the line after the closing bracket).
    """
    rows: list[list[float]] = []
    row_lines: list[int] = []
    pending: list[float] = []
    pending_line = start + 1
    idx = start
    body = first_body
    while True:
        closed = "]" in body
        if closed:
            body = body.partition("]")[0]
        pos = 0
        while True:
            semi = body.find(";", pos)
            chunk = body[pos:semi] if semi >= 0 else body[pos:]
            tokens = chunk.replace(",", " ").split()
            if tokens and not pending:
                pending_line = idx + 1
            for tok in tokens:
                pending.append(_parse_number(tok, idx + 1))
            if semi < 0:
                break
            if pending:
                rows.append(pending)
                row_lines.append(pending_line)
                pending = []
            pos = semi + 1
        if closed:
            break
        if pending:  # newline ends the row
            rows.append(pending)
            row_lines.append(pending_line)
            pending = []
        idx += 1
        if idx >= len(lines):
            raise CaseSyntaxError("unbalanced '[' in matrix assignment", start + 1)
        body = _strip_comment(lines[idx])
    if pending:
        rows.append(pending)
        row_lines.append(pending_line)
    return rows, row_lines, idx + 1


def _row_get(row: list[float], i: int, default: float) -> float:
    return row[i] if i < len(row) else default


def parse_matpower_case(text: str) -> CaseData:
    """Parse MATPOWER-syntax case text into raw tables.

    Accepts assignments of ``baseMVA`` and of ``bus``/``branch``/``gen``
    matrices (bracketed rows of numbers, ';' or newline separated), with
    '%' comments and blank lines tolerated. Any other assignments are
    ignored.

    Raises:
        CaseSyntaxError: unbalanced brackets or a non-numeric field
            (message carries the offending line number).
        MissingTableError: bus, branch, or gen table absent.
        DanglingReferenceError: a branch or generator names an unknown bus.
    """
    lines = text.splitlines()
    name = "case"
    base_mva = 100.0
    tables: dict[str, tuple[list[list[float]], list[int]]] = {}

    idx = 0
    while idx < len(lines):
        stripped = _strip_comment(lines[idx])
        if not stripped.strip():
            idx += 1
            continue
        m = _FUNCTION_RE.match(stripped)
        if m:
            name = m.group(1)
            idx += 1
            continue
        m = _ASSIGN_RE.match(stripped)
        if not m:
            idx += 1
            continue
        key, rhs = m.group(1), m.group(2)
        rhs = rhs.strip()
        if rhs.startswith("["):
            rows, row_lines, idx = _parse_matrix(lines, idx, rhs[1:])
            tables[key] = (rows, row_lines)
        else:
            if key == "baseMVA":
                base_mva = _parse_number(rhs.rstrip(";").strip(), idx + 1)
            idx += 1

    for required in ("bus", "branch", "gen"):
        if required not in tables:
            raise MissingTableError(f"case has no '{required}' table")

    bus_rows, bus_lines = tables["bus"]
    buses = []
    for row, ln in zip(bus_rows, bus_lines):
        if len(row) < 4:
            raise CaseSyntaxError("bus row needs at least id, type, Pd, Qd", ln)
        buses.append(
            BusRecord(
                bus_id=int(row[0]),
                bus_type=int(row[1]),
                pd=row[2],
                qd=row[3],
                gs=_row_get(row, 4, 0.0),
                bs=_row_get(row, 5, 0.0),
                base_kv=_row_get(row, 9, 0.0),
            )
        )
    ids = [b.bus_id for b in buses]
    if len(set(ids)) != len(ids):
        raise CaseSyntaxError("duplicate bus id in bus table")
    id_set = set(ids)

    branch_rows, branch_lines = tables["branch"]
    branches = []
    for row, ln in zip(branch_rows, branch_lines):
        if len(row) < 4:
            raise CaseSyntaxError("branch row needs at least from, to, r, x", ln)
        rec = BranchRecord(
            from_bus=int(row[0]),
            to_bus=int(row[1]),
            r=row[2],
            x=row[3],
            b_charging=_row_get(row, 4, 0.0),
            tap=_row_get(row, 8, 0.0),
            status=int(_row_get(row, 10, 1.0)),
        )
        for end in (rec.from_bus, rec.to_bus):
            if end not in id_set:
                raise DanglingReferenceError(
                    f"branch {rec.from_bus}-{rec.to_bus} references unknown bus {end}"
                )
        branches.append(rec)

    gen_rows, gen_lines = tables["gen"]
    gens = []
    for row, ln in zip(gen_rows, gen_lines):
        if len(row) < 3:
            raise CaseSyntaxError("gen row needs at least bus, Pg, Qg", ln)
        rec = GenRecord(
            bus=int(row[0]),
            pg=row[1],
            qg=row[2],
            qmax=_row_get(row, 3, 0.0),
            qmin=_row_get(row, 4, 0.0),
            status=int(_row_get(row, 7, 1.0)),
        )
        if rec.bus not in id_set:
            raise DanglingReferenceError(f"generator references unknown bus {rec.bus}")
        gens.append(rec)

    return CaseData(
        name=name,
        base_mva=base_mva,
        buses=tuple(buses),
        branches=tuple(branches),
        gens=tuple(gens),
    )


# ---------------------------------------------------------------------------
# Canonical JSON serialization (round-trips exactly)
# ---------------------------------------------------------------------------

def case_to_json(case: CaseData) -> str:
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [
            [b.bus_id, b.bus_type, b.pd, b.qd, b.gs, b.bs, b.base_kv]
            for b in case.buses
        ],
        "branches": [
            [br.from_bus, br.to_bus, br.r, br.x, br.b_charging, br.tap, br.status]
            for br in case.branches
        ],
        "gens": [
            [g.bus, g.pg, g.qg, g.qmax, g.qmin, g.status] for g in case.gens
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def case_from_json(text: str) -> CaseData:
    doc = json.loads(text)
    return CaseData(
        name=doc["name"],
        base_mva=doc["base_mva"],
        buses=tuple(
            BusRecord(int(r[0]), int(r[1]), r[2], r[3], r[4], r[5], r[6])
            for r in doc["buses"]
        ),
        branches=tuple(
            BranchRecord(int(r[0]), int(r[1]), r[2], r[3], r[4], r[5], int(r[6]))
            for r in doc["branches"]
        ),
        gens=tuple(
            GenRecord(int(r[0]), r[1], r[2], r[3], r[4], int(r[5]))
            for r in doc["gens"]
        ),
    )


def load_case(path: str) -> CaseData:
    """Load a case from a .m (MATPOWER syntax) or .json (canonical) file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        return case_from_json(text)
    return parse_matpower_case(text)


# ---------------------------------------------------------------------------
# Network model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Line:
    """Undirected line with series admittance y = g + jb (p.u.); from < to."""

    from_bus: int
    to_bus: int
    g: float
    b: float


@dataclass(eq=False)
class NetworkModel:
    """Immutable bus/line graph over re-indexed buses 0..n_bus-1 (0 = slack)."""

    n_bus: int
    lines: tuple[Line, ...]
    adjacency: tuple[frozenset[int], ...]
    original_ids: tuple[int, ...]
    shunt_g: np.ndarray  # parsed shunts in p.u.; zeroed in Y unless requested
    shunt_b: np.ndarray
    _line_index: dict[tuple[int, int], Line] = field(init=False, repr=False)

    def __post_init__(self):
        index = {}
        for ln in self.lines:
            index[(ln.from_bus, ln.to_bus)] = ln
            index[(ln.to_bus, ln.from_bus)] = ln
        object.__setattr__(self, "_line_index", index)
        self.shunt_g.flags.writeable = False
        self.shunt_b.flags.writeable = False

    def line_between(self, i: int, k: int) -> Line:
        try:
            return self._line_index[(i, k)]
        except KeyError:
            raise UnknownBusError(f"no line between buses {i} and {k}") from None

    def non_slack(self) -> range:
        return range(1, self.n_bus)


def neighbors(net: NetworkModel, i: int) -> frozenset[int]:
    """Bus indices adjacent to bus i; never contains i itself."""
    if not 0 <= i < net.n_bus:
        raise UnknownBusError(f"bus {i} not in network of {net.n_bus} buses")
    return net.adjacency[i]


def build_network(case: CaseData) -> NetworkModel:
    """Convert parsed case tables into the re-indexed network graph.

    Every in-service branch becomes one Line with series admittance
    1/(r + jx); parallel branches between the same pair are merged by
    admittance addition. Charging susceptance and off-nominal taps are
    dropped. Shunts are converted to p.u. and stored; they participate in
    the admittance matrix only when explicitly requested (plant-side use).
    """
    slack_ids = [b.bus_id for b in case.buses if b.bus_type == SLACK]
    if not slack_ids:
        raise CaseSyntaxError("case has no slack (type 3) bus")
    slack = slack_ids[0]
    order = [slack] + [b.bus_id for b in case.buses if b.bus_id != slack]
    to_internal = {bus_id: i for i, bus_id in enumerate(order)}
    n = len(order)

    merged: dict[tuple[int, int], complex] = {}
    for br in case.branches:
        if br.status == 0:
            continue
        z = complex(br.r, br.x)
        if z == 0:
            raise ZeroImpedanceError(
                f"branch {br.from_bus}-{br.to_bus} has r + jx = 0"
            )
        i, k = to_internal[br.from_bus], to_internal[br.to_bus]
        if i == k:
            raise CaseSyntaxError(f"branch connects bus {br.from_bus} to itself")
        key = (min(i, k), max(i, k))
        merged[key] = merged.get(key, 0j) + 1.0 / z

    lines = tuple(
        Line(from_bus=i, to_bus=k, g=y.real, b=y.imag)
        for (i, k), y in sorted(merged.items())
    )

    adj: list[set[int]] = [set() for _ in range(n)]
    for ln in lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)

    # connectivity: slack must reach every bus
    seen = {0}
    stack = [0]
    while stack:
        cur = stack.pop()
        for nb in adj[cur]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != n:
        missing = sorted(set(range(n)) - seen)
        raise DisconnectedGraphError(
            f"{len(missing)} bus(es) unreachable from the slack: internal {missing}"
        )

    shunt_g = np.zeros(n)
    shunt_b = np.zeros(n)
    for b in case.buses:
        i = to_internal[b.bus_id]
        shunt_g[i] = b.gs / case.base_mva
        shunt_b[i] = b.bs / case.base_mva

    return NetworkModel(
        n_bus=n,
        lines=lines,
        adjacency=tuple(frozenset(s) for s in adj),
        original_ids=tuple(order),
        shunt_g=shunt_g,
        shunt_b=shunt_b,
    )


@dataclass(eq=False)
class AdmittanceMatrix:
    """Dense symmetric complex bus admittance matrix Y = G + jB."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix.flags.writeable = False

    @property
    def G(self) -> np.ndarray:
        return self.matrix.real

    @property
    def B(self) -> np.ndarray:
        return self.matrix.imag

    @property
    def n_bus(self) -> int:
        return self.matrix.shape[0]


def build_admittance(net: NetworkModel, with_shunts: bool = False) -> AdmittanceMatrix:
    """Assemble Y: off-diagonal -y_ik for each line, diagonal y_i + sum of
    incident line admittances. Shunts y_i enter only if ``with_shunts``."""
    n = net.n_bus
    y = np.zeros((n, n), dtype=complex)
    for ln in net.lines:
        y_line = complex(ln.g, ln.b)
        i, k = ln.from_bus, ln.to_bus
        y[i, k] -= y_line
        y[k, i] -= y_line
        y[i, i] += y_line
        y[k, k] += y_line
    if with_shunts:
        y[np.diag_indices(n)] += net.shunt_g + 1j * net.shunt_b
    return AdmittanceMatrix(matrix=y)


def mutual_params(net: NetworkModel) -> dict[tuple[int, int], tuple[float, float]]:
    """Per-line mutual (off-diagonal) admittance entries (G_ik, B_ik).

    These are the coefficients appearing in the flow and sensitivity
    expressions: for a series admittance g + jb they equal (-g, -b).
    Keys hold both orientations of each line.
    """
    out: dict[tuple[int, int], tuple[float, float]] = {}
    for ln in net.lines:
        entry = (-ln.g, -ln.b)
        out[(ln.from_bus, ln.to_bus)] = entry
        out[(ln.to_bus, ln.from_bus)] = entry
    return out
