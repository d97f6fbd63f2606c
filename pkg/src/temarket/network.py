"""Radial distribution network model.

Buses, branches, the case-file reader/writer and the nodal admittance
quantities shared by all power-flow code. Branch impedances are stored in
per-unit; loads stay in kW / kvar.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class CaseError(ValueError):
    """Base class for case-file and topology errors."""


class MalformedCase(CaseError):
    pass


class NotRadial(CaseError):
    pass


class DuplicateBusId(CaseError):
    pass


class ZeroImpedanceBranch(CaseError):
    pass


class BusKind(str, Enum):
    SLACK = "slack"
    CONSUMER = "consumer"
    PRODUCER = "producer"
    PROSUMER = "prosumer"


@dataclass(frozen=True)
class Bus:
    """A network node; bus 1 is the utility connection (slack).

    Attributes:
        id: 1-based bus number.
        kind: role of the agent sitting at the bus.
        base_load_P: real demand [kW].
        base_load_Q: reactive demand [kvar].
        device_refs: names of attached DER specs.
        is_microgrid: membership flag; carried for reporting only.
    """

    id: int
    kind: BusKind
    base_load_P: float = 0.0
    base_load_Q: float = 0.0
    device_refs: tuple[str, ...] = ()
    is_microgrid: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BusKind(self.kind))
        object.__setattr__(self, "device_refs", tuple(self.device_refs))
        if self.id < 1:
            raise MalformedCase(f"bus id must be >= 1, got {self.id}")
        if self.base_load_P < 0:
            raise MalformedCase(f"bus {self.id}: negative real load {self.base_load_P}")
        if self.kind is BusKind.SLACK and self.id != 1:
            raise MalformedCase(f"slack must be bus 1, got bus {self.id}")
        if self.kind is BusKind.CONSUMER and self.device_refs:
            raise MalformedCase(f"consumer bus {self.id} cannot own devices")


@dataclass(frozen=True)
class Branch:
    """Series line between two buses, impedance in pu."""

    from_bus: int
    to_bus: int
    r: float
    x: float

    def __post_init__(self) -> None:
        if self.from_bus == self.to_bus:
            raise MalformedCase(f"branch {self.from_bus}-{self.to_bus} is a self-loop")
        if self.r < 0 or self.x < 0:
            raise MalformedCase(f"branch {self.from_bus}-{self.to_bus}: negative impedance")
        if self.r == 0 and self.x == 0:
            raise ZeroImpedanceBranch(f"branch {self.from_bus}-{self.to_bus} has zero impedance")

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_MVA: float = 10.0
    base_kV: float = 12.66

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def z_base(self) -> float:
        """Base impedance [ohm]."""
        return self.base_kV**2 / self.base_MVA

    @property
    def kw_per_pu(self) -> float:
        return self.base_MVA * 1000.0

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def index_of(self, bus_id: int) -> int:
        for k, b in enumerate(self.buses):
            if b.id == bus_id:
                return k
        raise KeyError(bus_id)

    @property
    def slack_index(self) -> int:
        return self.index_of(1)

    def load_kw(self) -> np.ndarray:
        return np.array([b.base_load_P for b in self.buses])

    def load_kvar(self) -> np.ndarray:
        return np.array([b.base_load_Q for b in self.buses])

    def incidence(self) -> sp.csr_matrix:
        """Branch-bus incidence, +1 at the from end and -1 at the to end."""
        nl, nb = len(self.branches), self.n_bus
        pos = {b.id: k for k, b in enumerate(self.buses)}
        rows = np.repeat(np.arange(nl), 2)
        cols = np.array([[pos[br.from_bus], pos[br.to_bus]] for br in self.branches]).ravel()
        vals = np.tile([1.0, -1.0], nl)
        return sp.csr_matrix((vals, (rows, cols)), shape=(nl, nb))


@dataclass(frozen=True)
class AdmittanceTable:
    """Branch admittances plus the assembled bus admittance matrix.

    ``g``/``b`` hold the series admittance y = 1/z of each branch, so the
    ordered pairs (i, j) and (j, i) share one entry. ``G``/``B`` are the
    real and imaginary parts of Ybus: off-diagonal -y_ij, diagonal the
    negative sum of the row's off-diagonals (no shunts in this model).
    """

    g: np.ndarray
    b: np.ndarray
    G: sp.csr_matrix
    B: sp.csr_matrix
    from_idx: np.ndarray
    to_idx: np.ndarray
    pairs: dict[tuple[int, int], tuple[float, float]] = field(repr=False)

    def pair(self, i: int, j: int) -> tuple[float, float]:
        """(g_ij, b_ij) for bus ids i, j joined by a branch."""
        return self.pairs[(i, j)]


def build_admittance(net: Network) -> AdmittanceTable:
    nb = net.n_bus
    pos = {b.id: k for k, b in enumerate(net.buses)}
    g = np.empty(len(net.branches))
    b = np.empty(len(net.branches))
    fi = np.empty(len(net.branches), dtype=int)
    ti = np.empty(len(net.branches), dtype=int)
    pairs: dict[tuple[int, int], tuple[float, float]] = {}
    for k, br in enumerate(net.branches):
        den = br.r**2 + br.x**2
        if den == 0.0:
            raise ZeroImpedanceBranch(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        g[k] = br.r / den
        b[k] = -br.x / den
        fi[k], ti[k] = pos[br.from_bus], pos[br.to_bus]
        pairs[(br.from_bus, br.to_bus)] = (g[k], b[k])
        pairs[(br.to_bus, br.from_bus)] = (g[k], b[k])

    rows = np.concatenate([fi, ti, fi, ti])
    cols = np.concatenate([ti, fi, fi, ti])

    def assemble(y: np.ndarray) -> sp.csr_matrix:
        vals = np.concatenate([-y, -y, y, y])
        return sp.csr_matrix((vals, (rows, cols)), shape=(nb, nb))

    return AdmittanceTable(g=g, b=b, G=assemble(g), B=assemble(b), from_idx=fi, to_idx=ti, pairs=pairs)


def validate_radial(net: Network) -> list[str]:
    """Topology findings; an empty list means a tree that contains the slack."""
    findings: list[str] = []
    ids = [b.id for b in net.buses]
    known = set(ids)
    if len(known) != len(ids):
        findings.append("duplicate bus ids")
    if 1 not in known:
        findings.append("slack bus 1 missing")

    adj: dict[int, list[int]] = {i: [] for i in known}
    for br in net.branches:
        missing = [e for e in (br.from_bus, br.to_bus) if e not in known]
        if missing:
            findings.append(f"branch {br.from_bus}-{br.to_bus} references unknown bus {missing[0]}")
            continue
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)

    for i in sorted(known):
        if not adj[i] and len(known) > 1:
            findings.append(f"bus {i} orphan (no branches)")

    if len(net.branches) >= len(known) and len(known) > 0:
        findings.append("cycle")
    else:
        # a cycle can hide behind a disconnected component even with |E| < |N|
        seen: set[int] = set()
        for root in sorted(known):
            if root in seen:
                continue
            seen.add(root)
            stack = [(root, 0)]
            parent_edges = 0
            comp_nodes = 0
            while stack:
                node, _ = stack.pop()
                comp_nodes += 1
                for nxt in adj[node]:
                    parent_edges += 1
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append((nxt, node))
            if parent_edges // 2 >= comp_nodes:
                findings.append("cycle")
                break

    if 1 in known:
        reach = {1}
        queue = deque([1])
        while queue:
            node = queue.popleft()
            for nxt in adj[node]:
                if nxt not in reach:
                    reach.add(nxt)
                    queue.append(nxt)
        for i in sorted(known - reach):
            findings.append(f"bus {i} unreachable")
    return findings


_BUS_COLUMNS = ["id", "kind", "Pd_kW", "Qd_kvar", "microgrid"]
_BRANCH_COLUMNS = ["from", "to", "r_ohm", "x_ohm"]


def parse_case(text: str) -> Network:
    """Read the columnar case format (``BASE``/``BUS``/``BRANCH`` rows)."""
    base: tuple[float, float] | None = None
    bus_rows: list[tuple[int, list[str]]] = []
    branch_rows: list[tuple[int, list[str]]] = []
    seen_bus_header = seen_branch_header = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key, rest = tok[0].upper(), tok[1:]
        if key == "BASE":
            if len(rest) != 2:
                raise MalformedCase(f"line {lineno}: BASE needs 'mva kv'")
            base = (_num(rest[0], lineno), _num(rest[1], lineno))
        elif key == "BUS":
            if rest == _BUS_COLUMNS:
                seen_bus_header = True
            elif len(rest) != len(_BUS_COLUMNS):
                raise MalformedCase(f"line {lineno}: BUS row needs {len(_BUS_COLUMNS)} columns, got {len(rest)}")
            else:
                bus_rows.append((lineno, rest))
        elif key == "BRANCH":
            if rest == _BRANCH_COLUMNS:
                seen_branch_header = True
            elif len(rest) != len(_BRANCH_COLUMNS):
                raise MalformedCase(f"line {lineno}: BRANCH row needs {len(_BRANCH_COLUMNS)} columns, got {len(rest)}")
            else:
                branch_rows.append((lineno, rest))
        else:
            raise MalformedCase(f"line {lineno}: unknown record {tok[0]!r}")

    if base is None:
        raise MalformedCase("missing BASE row")
    if not seen_bus_header or not seen_branch_header:
        raise MalformedCase("missing BUS or BRANCH header row")
    if not bus_rows:
        raise MalformedCase("no BUS rows")
    mva, kv = base
    if mva <= 0 or kv <= 0:
        raise MalformedCase("base quantities must be positive")
    z_base = kv**2 / mva

    buses: list[Bus] = []
    ids: set[int] = set()
    for lineno, row in bus_rows:
        bid = _int(row[0], lineno)
        if bid in ids:
            raise DuplicateBusId(f"line {lineno}: bus {bid} defined twice")
        ids.add(bid)
        try:
            kind = BusKind(row[1].lower())
        except ValueError:
            raise MalformedCase(f"line {lineno}: unknown bus kind {row[1]!r}") from None
        buses.append(Bus(id=bid, kind=kind, base_load_P=_num(row[2], lineno),
                         base_load_Q=_num(row[3], lineno), is_microgrid=bool(_int(row[4], lineno))))

    slack = [b for b in buses if b.kind is BusKind.SLACK]
    if len(slack) != 1:
        raise MalformedCase(f"expected exactly one slack bus, found {len(slack)}")

    branches = [
        Branch(_int(r[0], n), _int(r[1], n), _num(r[2], n) / z_base, _num(r[3], n) / z_base)
        for n, r in branch_rows
    ]
    net = Network(tuple(sorted(buses, key=lambda b: b.id)), tuple(branches), mva, kv)
    findings = validate_radial(net)
    if findings:
        raise NotRadial("; ".join(findings))
    return net


def read_case(path: str | Path) -> Network:
    return parse_case(Path(path).read_text())


def emit_case(net: Network) -> str:
    """Write ``net`` in the case format; ``parse_case`` restores it exactly."""
    zb = net.z_base
    lines = [f"BASE {net.base_MVA!r} {net.base_kV!r}", "", "BUS " + " ".join(_BUS_COLUMNS)]
    for b in net.buses:
        lines.append(f"BUS {b.id} {b.kind.value} {b.base_load_P!r} {b.base_load_Q!r} {int(b.is_microgrid)}")
    lines += ["", "BRANCH " + " ".join(_BRANCH_COLUMNS)]
    for br in net.branches:
        lines.append(f"BRANCH {br.from_bus} {br.to_bus} {_ohms(br.r, zb)!r} {_ohms(br.x, zb)!r}")
    return "\n".join(lines) + "\n"


def _ohms(pu: float, z_base: float) -> float:
    # pick an ohm value that divides back to the exact stored pu float
    val = pu * z_base
    for _ in range(8):
        back = val / z_base
        if back == pu:
            return val
        val = math.nextafter(val, math.inf if back < pu else -math.inf)
    return pu * z_base


def _num(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise MalformedCase(f"line {lineno}: expected a number, got {tok!r}") from None


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise MalformedCase(f"line {lineno}: expected an integer, got {tok!r}") from None
