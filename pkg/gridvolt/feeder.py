'''
Radial feeder models, the reduced Bbus matrix and Kron reduction.

Bus 0 is always the substation. Everything downstream is indexed by position
in ``FeederModel.bus_ids`` (bus ids 1..N in order), so row ``j - 1`` of B
belongs to bus ``j`` until a Kron reduction removes rows.
'''

import dataclasses
import functools
import json
import math
import typing

import networkx as nx
import numpy as np
import scipy.linalg

from . import util
from .util import InputError, NumericalError


DEFAULT_S_BASE_VA = 1e6
DEFAULT_V_BASE_V = 4160.0


@dataclasses.dataclass(frozen=True)
class Bases:
    s_base_va: float = DEFAULT_S_BASE_VA
    v_base_v: float = DEFAULT_V_BASE_V

    @property
    def z_base_ohm(self) -> float:
        return self.v_base_v ** 2 / self.s_base_va

    def kw_to_pu(self, kw):
        return np.asarray(kw, dtype=float) * 1e3 / self.s_base_va


@dataclasses.dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclasses.dataclass(frozen=True)
class FeederModel:
    n_buses: int
    lines: tuple[Line, ...]
    v0: float
    bases: Bases
    radial: bool
    name: str = ''

    @property
    def n(self) -> int:
        '''
        Number of non-root buses.
        '''

        return self.n_buses - 1

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_buses))

    @functools.cached_property
    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_buses))
        for line in self.lines:
            g.add_edge(line.from_bus, line.to_bus, r=line.r, x=line.x)
        return g

    def require_radial(self):
        if not self.radial:
            raise InputError(f'Feeder {self.name or "<inline>"} is not radial')

    @functools.cached_property
    def tree(self) -> 'FeederTree':
        self.require_radial()
        return FeederTree.from_graph(self.graph, self.n_buses)


@dataclasses.dataclass(frozen=True, eq=False)
class FeederTree:
    '''
    Rooted view of a radial feeder. Arrays are indexed by bus id minus one.
    '''

    # Parent bus id of every non-root bus
    parent: np.ndarray
    # Impedance of the line connecting each bus to its parent
    r: np.ndarray
    x: np.ndarray
    # Non-root bus ids in breadth-first order from the root
    order: tuple[int, ...]
    children: tuple[tuple[int, ...], ...]
    # downstream[j, k] is 1 when bus k + 1 lies in the subtree of bus j + 1
    downstream: np.ndarray

    @staticmethod
    def from_graph(graph: nx.Graph, n_buses: int) -> 'FeederTree':
        n = n_buses - 1
        parent = np.zeros(n, dtype=int)
        r = np.zeros(n)
        x = np.zeros(n)
        order = []
        children = [[] for _ in range(n_buses)]

        for i, j in nx.bfs_edges(graph, 0):
            data = graph.edges[i, j]
            parent[j - 1] = i
            r[j - 1] = data['r']
            x[j - 1] = data['x']
            order.append(j)
            children[i].append(j)

        downstream = np.zeros((n, n))
        for j in reversed(order):
            downstream[j - 1, j - 1] = 1.0
            for k in children[j]:
                downstream[j - 1] += downstream[k - 1]

        for a in (parent, r, x, downstream):
            a.setflags(write=False)

        return FeederTree(
            parent=parent,
            r=r,
            x=x,
            order=tuple(order),
            children=tuple(tuple(c) for c in children),
            downstream=downstream,
        )


@dataclasses.dataclass(frozen=True, eq=False)
class BbusMatrix:
    matrix: np.ndarray
    buses: tuple[int, ...]
    eta_tilde: float
    L_tilde: float

    @property
    def n(self) -> int:
        return len(self.buses)

    @functools.cached_property
    def cholesky(self):
        try:
            return scipy.linalg.cho_factor(self.matrix, lower=True)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f'Bbus matrix is not positive definite: {e}')

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        '''
        Apply X = B^-1 to <rhs>.
        '''

        return scipy.linalg.cho_solve(self.cholesky, rhs)

    @functools.cached_property
    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.n))
        inv.setflags(write=False)
        return inv

    @functools.cached_property
    def adjacency(self) -> np.ndarray:
        '''
        Boolean neighbour pattern (off-diagonal nonzeros).
        '''

        adj = self.matrix != 0.0
        np.fill_diagonal(adj, False)
        adj.setflags(write=False)
        return adj


def _line_value(record: dict, key: str, z_base: float, index: int) -> float:
    pu_key = f'{key}_pu'
    ohm_key = f'{key}_ohm'

    if pu_key in record and ohm_key in record:
        raise InputError(f'Line #{index} has both {pu_key} and {ohm_key}')
    elif pu_key in record:
        value = record[pu_key]
    elif ohm_key in record:
        value = record[ohm_key]
        if isinstance(value, (int, float)):
            value = value / z_base
    else:
        raise InputError(f'Line #{index} is missing {pu_key} or {ohm_key}')

    if isinstance(value, bool) or not isinstance(value, (int, float)) \
            or not math.isfinite(value):
        raise InputError(f'Line #{index} has invalid {key}: {value!r}')

    return float(value)


def build_feeder(spec: dict, require_radial: bool = False) -> FeederModel:
    '''
    Validate a feeder description record (the decoded JSON feeder document)
    and convert physical line impedances to per-unit.
    '''

    if not isinstance(spec, dict):
        raise InputError('Feeder description must be a mapping')

    bases_spec = spec.get('bases', {})
    try:
        bases = Bases(
            s_base_va=float(bases_spec.get('s_base_va', DEFAULT_S_BASE_VA)),
            v_base_v=float(bases_spec.get('v_base_v', DEFAULT_V_BASE_V)),
        )
    except (TypeError, ValueError) as e:
        raise InputError(f'Invalid bases: {e}')
    if not all(math.isfinite(x) and x > 0
               for x in (bases.s_base_va, bases.v_base_v)) \
            or not bases.z_base_ohm > 0:
        raise InputError(f'Bases must be finite and positive: {bases}')

    try:
        bus_ids = sorted(int(b['id']) for b in spec['buses'])
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f'Invalid bus list: {e}')

    if not bus_ids or bus_ids[0] != 0:
        raise InputError('Feeder must contain the substation bus 0')
    elif bus_ids != list(range(len(bus_ids))):
        raise InputError(f'Bus ids must be 0..N without gaps: {bus_ids}')
    elif len(bus_ids) < 2:
        raise InputError('Feeder has no bus besides the substation')

    n_buses = len(bus_ids)
    lines = []
    seen = set()

    for index, record in enumerate(spec.get('lines', [])):
        try:
            a = int(record['from'])
            b = int(record['to'])
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f'Line #{index} has invalid endpoints: {e}')

        if a == b:
            raise InputError(f'Line #{index} is a self-loop at bus {a}')
        for bus in (a, b):
            if not 0 <= bus < n_buses:
                raise InputError(f'Line #{index} references unknown bus {bus}')

        key = frozenset((a, b))
        if key in seen:
            raise InputError(f'Duplicate line between buses {a} and {b}')
        seen.add(key)

        r = _line_value(record, 'r', bases.z_base_ohm, index)
        x = _line_value(record, 'x', bases.z_base_ohm, index)
        if x <= 0:
            raise InputError(f'Line {a}-{b} has nonpositive reactance: {x}')
        elif r < 0:
            raise InputError(f'Line {a}-{b} has negative resistance: {r}')

        lines.append(Line(a, b, r, x))

    v0 = spec.get('v0_pu', 1.0)
    if isinstance(v0, bool) or not isinstance(v0, (int, float)) \
            or not 0 < v0 < 2:
        raise InputError(f'Invalid substation voltage: {v0!r}')

    model = FeederModel(
        n_buses=n_buses,
        lines=tuple(lines),
        v0=float(v0),
        bases=bases,
        radial=False,
        name=str(spec.get('name', '')),
    )

    graph = model.graph
    if not nx.is_connected(graph):
        islands = [sorted(c) for c in nx.connected_components(graph)
                   if 0 not in c]
        raise InputError(f'Feeder is disconnected; unreachable buses: '
                         f'{islands}')

    radial = nx.is_tree(graph)
    if require_radial and not radial:
        cycle = nx.find_cycle(graph, source=0)
        raise InputError(f'Feeder contains a cycle: {cycle}')

    return dataclasses.replace(model, radial=radial)


def load_feeder(path: str, require_radial: bool = False) -> FeederModel:
    try:
        with open(path, 'r') as f:
            spec = json.load(f)
    except FileNotFoundError:
        raise InputError(f'Feeder file not found: {path}')
    except json.JSONDecodeError as e:
        raise InputError(f'{path}: invalid JSON: {e}')

    try:
        return build_feeder(spec, require_radial=require_radial)
    except InputError as e:
        raise InputError(f'{path}: {e}') from e


def write_feeder(spec: dict, path: str):
    with util.open_output_file(path, 'w') as f:
        json.dump(spec, f, indent=2)
        f.write('\n')


def chain_feeder(n_buses: int, r_ohm: float, x_ohm: float,
                 bases: typing.Optional[Bases] = None, v0: float = 1.0,
                 name: str = '') -> dict:
    '''
    Description record for a uniform chain 0-1-...-(n_buses - 1).
    '''

    bases = bases or Bases()

    return {
        'name': name or f'chain{n_buses}',
        'bases': {'s_base_va': bases.s_base_va, 'v_base_v': bases.v_base_v},
        'v0_pu': v0,
        'buses': [{'id': i} for i in range(n_buses)],
        'lines': [{'from': i, 'to': i + 1, 'r_ohm': r_ohm, 'x_ohm': x_ohm}
                  for i in range(n_buses - 1)],
    }


def random_radial_feeder(rng: np.random.Generator, n_buses: int,
                         x_range=(0.2, 0.6), r_over_x=(0.3, 1.0)) -> dict:
    '''
    Description record for a random recursive tree with per-unit impedances.
    Every new bus attaches to a uniformly chosen earlier bus.
    '''

    lines = []
    for j in range(1, n_buses):
        parent = int(rng.integers(0, j))
        x = float(rng.uniform(*x_range))
        r = x * float(rng.uniform(*r_over_x))
        lines.append({'from': parent, 'to': j, 'r_pu': r, 'x_pu': x})

    return {
        'name': f'random{n_buses}',
        'buses': [{'id': i} for i in range(n_buses)],
        'lines': lines,
    }


def _spectrum(matrix: np.ndarray) -> tuple[float, float]:
    try:
        eigenvalues = scipy.linalg.eigh(matrix, eigvals_only=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f'Eigendecomposition failed: {e}')

    # B is symmetric, so its singular values are its eigenvalues
    eta, L = float(eigenvalues[0]), float(eigenvalues[-1])
    if not eta > 0:
        raise NumericalError(f'Bbus matrix is not positive definite: '
                             f'smallest eigenvalue {eta}')

    return eta, L


def _finish(matrix: np.ndarray, buses) -> BbusMatrix:
    matrix.setflags(write=False)
    eta, L = _spectrum(matrix)
    return BbusMatrix(matrix=matrix, buses=tuple(buses), eta_tilde=eta,
                      L_tilde=L)


def build_bbus(model: FeederModel) -> BbusMatrix:
    n = model.n
    full = np.zeros((n + 1, n + 1))

    for line in model.lines:
        y = 1.0 / line.x
        a, b = line.from_bus, line.to_bus
        full[a, a] += y
        full[b, b] += y
        full[a, b] -= y
        full[b, a] -= y

    return _finish(full[1:, 1:].copy(), model.bus_ids)


def _split(B: BbusMatrix, keep) -> tuple[np.ndarray, np.ndarray]:
    keep = set(keep)
    if not keep:
        raise InputError('Kron reduction needs at least one kept bus')

    unknown = keep - set(B.buses)
    if unknown:
        raise InputError(f'Cannot keep unknown buses: {sorted(unknown)}')

    k = np.array([i for i, b in enumerate(B.buses) if b in keep], dtype=int)
    e = np.array([i for i, b in enumerate(B.buses) if b not in keep],
                 dtype=int)

    return k, e


def _eliminate(B: BbusMatrix, e: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.solve(B.matrix[np.ix_(e, e)], rhs,
                                  assume_a='pos')
    except np.linalg.LinAlgError as err:
        raise NumericalError(f'Eliminated block is singular: {err}')


def kron_reduce(B: BbusMatrix, keep) -> BbusMatrix:
    '''
    Schur complement of B onto the buses in <keep>. Eliminated buses are
    assumed to carry no controllable injection.
    '''

    k, e = _split(B, keep)
    buses = [B.buses[i] for i in k]

    if len(e) == 0:
        return _finish(B.matrix.copy(), buses)

    B_ke = B.matrix[np.ix_(k, e)]
    reduced = B.matrix[np.ix_(k, k)] - B_ke @ _eliminate(B, e, B_ke.T)
    # Restore exact symmetry lost to rounding
    reduced = (reduced + reduced.T) / 2

    return _finish(reduced, buses)


def kron_operating_vector(B: BbusMatrix, keep, w: np.ndarray) -> np.ndarray:
    '''
    Operating-condition vector seen by the reduced network on <keep>:
    w_k - B_ke B_ee^-1 w_e.
    '''

    k, e = _split(B, keep)
    w = np.asarray(w, dtype=float)
    if w.shape != (B.n,):
        raise ValueError(f'Expected w of length {B.n}, got {w.shape}')

    if len(e) == 0:
        return w.copy()

    return w[k] - B.matrix[np.ix_(k, e)] @ _eliminate(B, e, w[e])
