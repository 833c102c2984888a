"""Crossbar topologies and their nodal analysis.

Two topologies share the same read crossbar (row rails driving, column
rails sensing):

* ``CONVENTIONAL`` two-terminal cells. The read path is also the
  programming path, so any voltage across a cell moves its charge.
* ``PROPOSED`` four-terminal cells. Each cell additionally owns a control
  loop ``CL+``/``CL-`` that crosses only its own electrolyte. The loop is
  the only programming path and it touches no other cell.

A bias assigns voltages to lines; unassigned lines float. Floating nodes
are kept as unknowns (no pseudo-ground). A sub-circuit in which no line is
driven carries no current and is left out of the linear system entirely;
a control loop with both terminals floating is therefore absent, like an
open switch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple

import numpy as np
import scipy.io
import scipy.sparse as sps
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .device import DeviceParams, DeviceState, conductance_of_charge

RESIDUAL_TOL = 1e-9
KCL_TOL = 1e-9


class TopologyKind(str, enum.Enum):
    CONVENTIONAL = "conventional-shared-rail"
    PROPOSED = "proposed-isolated-loop"


class ReadMode(str, enum.Enum):
    IDEAL = "ideal"
    FULL_NODAL = "full-nodal"


class NetworkError(Exception):
    code = "NETWORK_ERROR"


class NoReferenceError(NetworkError):
    code = "NO_REFERENCE"


class UnknownLineError(NetworkError):
    code = "UNKNOWN_LINE"


class SingularComponentError(NetworkError):
    """A driven sub-circuit contains nodes with no conducting path to a source."""

    code = "SINGULAR_COMPONENT"

    def __init__(self, nodes):
        self.nodes = list(nodes)
        names = ", ".join(node_name(n) for n in self.nodes[:8])
        more = "" if len(self.nodes) <= 8 else f" (+{len(self.nodes) - 8} more)"
        super().__init__(f"floating island with no path to a driven line: {names}{more}")


@dataclass(frozen=True)
class Topology:
    kind: TopologyKind
    rows: int
    cols: int

    def __post_init__(self):
        object.__setattr__(self, "kind", TopologyKind(self.kind))
        if self.rows < 1 or self.cols < 1:
            raise ValueError("topology needs at least one row and one column")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


class Line(NamedTuple):
    """A physical line: ``row``/``col`` rail, or ``cl+``/``cl-`` of cell (i, j)."""

    kind: str
    i: int
    j: int = -1


def row_line(i: int) -> Line:
    return Line("row", i)


def col_line(j: int) -> Line:
    return Line("col", j, -1)


def clp(i: int, j: int) -> Line:
    return Line("cl+", i, j)


def clm(i: int, j: int) -> Line:
    return Line("cl-", i, j)


def node_name(node) -> str:
    kind, i, j = node
    if kind == "row":
        return f"row[{i}]"
    if kind == "col":
        return f"col[{i}]"
    return f"{kind}[{i},{j}]"


def _line_exists(line: Line, topology: Topology) -> bool:
    if line.kind == "row":
        return 0 <= line.i < topology.rows and line.j == -1
    if line.kind == "col":
        return 0 <= line.i < topology.cols and line.j == -1
    if line.kind in ("cl+", "cl-"):
        return (
            topology.kind is TopologyKind.PROPOSED
            and 0 <= line.i < topology.rows
            and 0 <= line.j < topology.cols
        )
    return False


@dataclass(frozen=True)
class BiasConfig:
    """Driven line voltages; every line not listed in ``driven`` floats."""

    driven: Mapping[Line, float] = field(default_factory=dict)
    floating: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "driven", {Line(*k): float(v) for k, v in self.driven.items()})
        object.__setattr__(self, "floating", frozenset(Line(*k) for k in self.floating))
        both = set(self.driven) & self.floating
        if both:
            raise ValueError(f"lines listed as both driven and floating: {sorted(both)}")

    def lines(self):
        return set(self.driven) | set(self.floating)


@dataclass(frozen=True, eq=False)
class CrossbarArray:
    """M x N cells sharing one parameter set. Value type: never mutated."""

    topology: Topology
    params: DeviceParams
    q: np.ndarray
    t: float = 0.0
    # per-segment wire resistance of row and column rails
    wire_resistance: float = 0.0

    def __post_init__(self):
        q = np.array(self.q, dtype=float, copy=True)
        if q.shape != self.topology.shape:
            raise ValueError(f"charge grid {q.shape} does not match topology {self.topology.shape}")
        if np.any(q < 0) or np.any(q > self.params.q_max):
            raise ValueError("cell charge outside [0, q_max]")
        if self.wire_resistance < 0:
            raise ValueError("wire_resistance must be >= 0")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def fresh(cls, kind, rows: int, cols: int, params: DeviceParams, q: float = 0.0, wire_resistance: float = 0.0):
        return cls(Topology(kind, rows, cols), params, np.full((rows, cols), q), wire_resistance=wire_resistance)

    @property
    def shape(self) -> tuple[int, int]:
        return self.topology.shape

    def conductances(self) -> np.ndarray:
        return conductance_of_charge(self.q, self.params)

    def cell(self, i: int, j: int) -> DeviceState:
        return DeviceState(q=float(self.q[i, j]), t=self.t)

    def with_charges(self, q, t: float | None = None) -> "CrossbarArray":
        return replace(self, q=q, t=self.t if t is None else t)

    def to_dict(self) -> dict:
        return {
            "topology": {
                "kind": self.topology.kind.value,
                "rows": self.topology.rows,
                "cols": self.topology.cols,
            },
            "wire_resistance": self.wire_resistance,
            "params": self.params.to_dict(),
            "t_s": self.t,
            "q_C": self.q.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CrossbarArray":
        top = data["topology"]
        return cls(
            Topology(top["kind"], top["rows"], top["cols"]),
            DeviceParams.from_dict(data["params"]),
            np.array(data["q_C"], dtype=float),
            t=data.get("t_s", 0.0),
            wire_resistance=data.get("wire_resistance", 0.0),
        )


class Branch(NamedTuple):
    a: int
    b: int
    g: float
    # ("read" | "write", i, j) for cells, ("wire", ...) for rail segments
    tag: tuple


@dataclass(frozen=True, eq=False)
class NodalSystem:
    """Stamped network for one bias configuration.

    ``laplacian`` is the full conductance matrix over every retained node,
    before the driven nodes are eliminated. ``conductance_matrix`` and
    ``rhs`` are the reduced system over the free nodes.
    """

    shape: tuple[int, int]
    kind: TopologyKind
    nodes: list
    node_index: dict
    branches: list
    laplacian: sps.csr_matrix
    free: np.ndarray
    driven: np.ndarray
    driven_values: np.ndarray
    conductance_matrix: sps.csc_matrix
    rhs: np.ndarray
    idle_nodes: list

    @property
    def free_count(self) -> int:
        return int(self.free.size)

    def cell_of_node(self, node) -> tuple[int, int] | None:
        kind, i, j = node
        if kind in ("cl+", "cl-"):
            return (i, j)
        return None

    def is_block_diagonal_by_cell(self) -> bool:
        """True if no stamped coupling links a loop node to anything outside its cell.

        Structural check on the sparsity pattern of ``laplacian``: the matrix
        then splits into one block per cell loop plus one block for the rails.
        Shared-rail arrays program through the rails, so they pass only as 1x1.
        """
        if self.kind is TopologyKind.CONVENTIONAL:
            return self.shape == (1, 1)
        coo = self.laplacian.tocoo()
        for a, b in zip(coo.row, coo.col):
            owner_a = self.cell_of_node(self.nodes[a])
            owner_b = self.cell_of_node(self.nodes[b])
            if owner_a != owner_b:
                return False
        return True


@dataclass(frozen=True, eq=False)
class SolveResult:
    node_voltages: dict
    voltages: np.ndarray
    branch_currents: np.ndarray
    # programming-path voltage / current per cell (read path for conventional
    # cells, control loop for proposed cells; 0 where the loop is absent)
    cell_voltages: np.ndarray
    cell_currents: np.ndarray
    read_currents: np.ndarray
    terminal_currents: dict
    residual: float
    kcl_error: float

    def column_currents(self, cols: int) -> np.ndarray:
        """Current delivered by the network into each column terminal."""
        return np.array([-self.terminal_currents.get(col_line(j), 0.0) for j in range(cols)])


def _stamp_read_network(array: CrossbarArray, branches: list):
    rows, cols = array.shape
    g = array.conductances()
    r = array.wire_resistance
    if r == 0:
        for i in range(rows):
            for j in range(cols):
                branches.append((row_line(i), col_line(j), float(g[i, j]), ("read", i, j)))
        return
    gw = 1.0 / r
    for i in range(rows):
        branches.append((row_line(i), ("rseg", i, 0), gw, ("wire", "row", i, 0)))
        for j in range(cols - 1):
            branches.append((("rseg", i, j), ("rseg", i, j + 1), gw, ("wire", "row", i, j + 1)))
    for j in range(cols):
        for i in range(rows - 1):
            branches.append((("cseg", i, j), ("cseg", i + 1, j), gw, ("wire", "col", i, j)))
        branches.append((("cseg", rows - 1, j), col_line(j), gw, ("wire", "col", rows - 1, j)))
    for i in range(rows):
        for j in range(cols):
            branches.append((("rseg", i, j), ("cseg", i, j), float(g[i, j]), ("read", i, j)))


def build_nodal_system(array: CrossbarArray, bias: BiasConfig) -> NodalSystem:
    topology = array.topology
    for line in bias.lines():
        if not _line_exists(line, topology):
            raise UnknownLineError(f"line {node_name(line)} does not exist in {topology.kind.value} {topology.shape}")
    if not bias.driven:
        raise NoReferenceError("no reference potential: every line is floating")

    raw: list = []
    _stamp_read_network(array, raw)
    if topology.kind is TopologyKind.PROPOSED:
        g_loop = array.params.ion_conductance
        loops = {(ln.i, ln.j) for ln in bias.driven if ln.kind in ("cl+", "cl-")}
        for i, j in sorted(loops):
            raw.append((clp(i, j), clm(i, j), g_loop, ("write", i, j)))

    all_nodes = sorted({n for a, b, _, _ in raw for n in (a, b)} | set(bias.driven), key=_node_sort_key)
    index = {n: k for k, n in enumerate(all_nodes)}
    n_all = len(all_nodes)
    ia = np.array([index[a] for a, _, _, _ in raw], dtype=np.int64)
    ib = np.array([index[b] for _, b, _, _ in raw], dtype=np.int64)
    structure = sps.coo_matrix((np.ones(len(raw)), (ia, ib)), shape=(n_all, n_all))
    n_comp, labels = csgraph.connected_components(structure, directed=False)
    driven_comp = np.zeros(n_comp, dtype=bool)
    for line in bias.driven:
        driven_comp[labels[index[line]]] = True

    keep = driven_comp[labels]
    nodes = [n for n, k in zip(all_nodes, keep) if k]
    idle = [n for n, k in zip(all_nodes, keep) if not k]
    node_index = {n: k for k, n in enumerate(nodes)}
    branches = [
        Branch(node_index[a], node_index[b], g, tag) for a, b, g, tag in raw if a in node_index
    ]

    n = len(nodes)
    if branches:
        a = np.array([br.a for br in branches])
        b = np.array([br.b for br in branches])
        g = np.array([br.g for br in branches])
        data = np.concatenate([g, g, -g, -g])
        r = np.concatenate([a, b, a, b])
        c = np.concatenate([a, b, b, a])
        lap = sps.coo_matrix((data, (r, c)), shape=(n, n)).tocsr()
    else:
        lap = sps.csr_matrix((n, n))
    lap.sum_duplicates()

    is_driven = np.zeros(n, dtype=bool)
    values = np.zeros(n)
    for line, v in bias.driven.items():
        is_driven[node_index[line]] = True
        values[node_index[line]] = v
    free = np.flatnonzero(~is_driven)
    driven = np.flatnonzero(is_driven)
    matrix = lap[free][:, free].tocsc()
    rhs = -(lap[free][:, driven] @ values[driven])
    return NodalSystem(
        shape=topology.shape,
        kind=topology.kind,
        nodes=nodes,
        node_index=node_index,
        branches=branches,
        laplacian=lap,
        free=free,
        driven=driven,
        driven_values=values[driven],
        conductance_matrix=matrix,
        rhs=np.asarray(rhs, dtype=float),
        idle_nodes=idle,
    )


_KIND_ORDER = {"row": 0, "col": 1, "rseg": 2, "cseg": 3, "cl+": 4, "cl-": 5}


def _node_sort_key(node):
    kind, i, j = node
    # control loops sort by cell so each cell's two loop nodes are adjacent
    if kind in ("cl+", "cl-"):
        return (4, i, j, _KIND_ORDER[kind])
    return (_KIND_ORDER[kind], i, j, 0)


def _check_islands(system: NodalSystem):
    n = len(system.nodes)
    conducting = [br for br in system.branches if br.g > 0]
    a = np.array([br.a for br in conducting], dtype=np.int64)
    b = np.array([br.b for br in conducting], dtype=np.int64)
    graph = sps.coo_matrix((np.ones(a.size), (a, b)), shape=(n, n))
    n_comp, labels = csgraph.connected_components(graph, directed=False)
    anchored = np.zeros(n_comp, dtype=bool)
    anchored[labels[system.driven]] = True
    stranded = np.flatnonzero(~anchored[labels])
    if stranded.size:
        raise SingularComponentError(system.nodes[k] for k in stranded)


def solve(system: NodalSystem) -> SolveResult:
    _check_islands(system)
    n = len(system.nodes)
    v = np.zeros(n)
    v[system.driven] = system.driven_values
    residual = 0.0
    if system.free_count:
        A = system.conductance_matrix
        b = system.rhs
        x = splu(A).solve(b)
        r = A @ x - b
        scale = max(np.linalg.norm(b), np.linalg.norm(A @ x), np.finfo(float).tiny)
        residual = float(np.linalg.norm(r) / scale) if np.any(r) else 0.0
        if not np.all(np.isfinite(x)) or residual > RESIDUAL_TOL:
            raise NetworkError(f"linear solve failed: relative residual {residual:.3e}")
        v[system.free] = x

    rows, cols = system.shape
    currents = np.empty(len(system.branches))
    cell_v = np.zeros((rows, cols))
    cell_i = np.zeros((rows, cols))
    read_i = np.zeros((rows, cols))
    read_v = np.zeros((rows, cols))
    injected = np.zeros(n)
    for k, br in enumerate(system.branches):
        dv = v[br.a] - v[br.b]
        cur = br.g * dv
        currents[k] = cur
        injected[br.a] += cur
        injected[br.b] -= cur
        kind = br.tag[0]
        if kind == "read":
            _, i, j = br.tag
            read_i[i, j] = cur
            read_v[i, j] = dv
        elif kind == "write":
            _, i, j = br.tag
            cell_v[i, j] = dv
            cell_i[i, j] = cur
    if system.kind is TopologyKind.CONVENTIONAL:
        cell_v, cell_i = read_v, read_i

    scale = float(np.max(np.abs(currents), initial=0.0))
    kcl = float(np.max(np.abs(injected[system.free]), initial=0.0))
    kcl_error = kcl / scale if scale > 0 else kcl
    if kcl_error > KCL_TOL:
        raise NetworkError(f"Kirchhoff current law violated: {kcl_error:.3e}")

    node_voltages = {node: float(v[k]) for k, node in enumerate(system.nodes)}
    node_voltages.update({node: math.nan for node in system.idle_nodes})
    terminals = {system.nodes[k]: float(injected[k]) for k in system.driven}
    return SolveResult(
        node_voltages=node_voltages,
        voltages=v,
        branch_currents=currents,
        cell_voltages=cell_v,
        cell_currents=cell_i,
        read_currents=read_i,
        terminal_currents=terminals,
        residual=residual,
        kcl_error=kcl_error,
    )


def read_bias(input_voltages, cols: int) -> BiasConfig:
    """Rows driven by the inputs, columns held at virtual ground, loops floating."""
    driven = {row_line(i): float(v) for i, v in enumerate(input_voltages)}
    driven.update({col_line(j): 0.0 for j in range(cols)})
    return BiasConfig(driven)


def read_mac(array: CrossbarArray, input_voltages, mode: ReadMode | str = ReadMode.IDEAL) -> np.ndarray:
    """Column currents for row input voltages.

    Reads are evaluated as instantaneous: they never change any cell charge,
    in either topology.
    """
    v = np.asarray(input_voltages, dtype=float)
    rows, cols = array.shape
    if v.shape != (rows,):
        raise ValueError(f"expected {rows} input voltages, got shape {v.shape}")
    mode = ReadMode(mode)
    if mode is ReadMode.IDEAL:
        return array.conductances().T @ v
    result = solve(build_nodal_system(array, read_bias(v, cols)))
    return result.column_currents(cols)


@dataclass(frozen=True)
class Disturbance:
    """Charge change of the cells that were not being programmed."""

    dq: np.ndarray
    mask: np.ndarray  # True for non-target cells

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.dq[self.mask]), initial=0.0))

    @property
    def l1(self) -> float:
        return float(np.sum(np.abs(self.dq[self.mask])))

    def as_dict(self) -> dict:
        return {(int(i), int(j)): float(self.dq[i, j]) for i, j in zip(*np.nonzero(self.mask))}


def write_disturbance(before: CrossbarArray, after: CrossbarArray, targets) -> Disturbance:
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {before.shape} vs {after.shape}")
    if before.params != after.params:
        raise ValueError("arrays use different device parameters")
    mask = np.ones(before.shape, dtype=bool)
    for i, j in targets:
        mask[i, j] = False
    dq = np.where(mask, after.q - before.q, 0.0)
    return Disturbance(dq=dq, mask=mask)


def export_matrix_market(system: NodalSystem, path, reduced: bool = True):
    """Write the (reduced or full) conductance matrix as Matrix Market text."""
    matrix = system.conductance_matrix if reduced else system.laplacian
    scipy.io.mmwrite(str(path), sps.coo_matrix(matrix), comment="conductance matrix, siemens")
