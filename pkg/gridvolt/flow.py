'''
Power flow engines: the LinDistFlow map Bv = q + w, construction of the
operating-condition vector w, and a backward-forward sweep AC solver for
radial feeders.
'''

import dataclasses
import typing

import numpy as np

from .feeder import BbusMatrix, FeederModel
from .util import NumericalError


AC_TOLERANCE = 1e-12
AC_MAX_SWEEPS = 200
# Accepted voltage magnitudes, per-unit
SANITY_BAND = (0.0, 2.0)


@dataclasses.dataclass(frozen=True, eq=False)
class Injection:
    '''
    Per-unit nodal injections for the non-root buses. Loads are negative.
    '''

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        for name in ('p', 'q'):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.ndim != 1:
                raise ValueError(f'Injection {name} must be a vector')
            elif not np.all(np.isfinite(value)):
                raise ValueError(f'Injection {name} has non-finite entries')
            object.__setattr__(self, name, value)

        if self.p.shape != self.q.shape:
            raise ValueError(f'Injection size mismatch: {self.p.shape} vs '
                             f'{self.q.shape}')

    @staticmethod
    def zeros(n: int) -> 'Injection':
        return Injection(np.zeros(n), np.zeros(n))


@dataclasses.dataclass(frozen=True, eq=False)
class AcSolution:
    # Voltage magnitudes of the non-root buses
    v: np.ndarray
    phasors: np.ndarray
    # Complex power delivered by the substation
    s_root: complex
    losses: complex
    sweeps: int
    # Largest nodal complex power mismatch recomputed from the final phasors
    mismatch: float


def _check_length(name: str, value, n: int) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if value.shape != (n,):
        raise ValueError(f'Expected {name} of length {n}, got shape '
                         f'{value.shape}')
    return value


def lindistflow_voltage(B: BbusMatrix, q, w) -> np.ndarray:
    '''
    Solve Bv = q + w.
    '''

    q = _check_length('q', q, B.n)
    w = _check_length('w', w, B.n)

    return B.solve(q + w)


def downstream_flows(model: FeederModel, p) -> np.ndarray:
    '''
    Lossless flow on the line feeding each bus, positive towards the leaves.
    '''

    p = _check_length('p', p, model.n)
    return -(model.tree.downstream @ p)


def build_operating_vector(model: FeederModel, p, v0: float,
                           q_load: typing.Optional[np.ndarray] = None
                           ) -> np.ndarray:
    '''
    Operating-condition vector w for active injections <p> and zero
    controllable VAR. An optional reactive consumption <q_load> (positive for
    load) is absorbed into w as well.
    '''

    tree = model.tree
    P = downstream_flows(model, p)
    ratio = tree.r / tree.x

    w = -ratio * P
    for j in tree.order:
        parent = tree.parent[j - 1]
        if parent == 0:
            w[j - 1] += v0 / tree.x[j - 1]
        else:
            w[parent - 1] += ratio[j - 1] * P[j - 1]

    if q_load is not None:
        w -= _check_length('q_load', q_load, model.n)

    return w


def lindistflow_recursive(model: FeederModel, inj: Injection,
                          v0: float) -> np.ndarray:
    '''
    Root-to-leaf LinDistFlow evaluation v_j = v_parent - (r P + x Q).
    '''

    tree = model.tree
    P = downstream_flows(model, inj.p)
    Q = downstream_flows(model, inj.q)

    v = np.zeros(model.n)
    for j in tree.order:
        parent = tree.parent[j - 1]
        upstream = v0 if parent == 0 else v[parent - 1]
        v[j - 1] = upstream - (tree.r[j - 1] * P[j - 1]
                               + tree.x[j - 1] * Q[j - 1])

    return v


def _nodal_mismatch(tree, z, v0, phasors, s_load) -> float:
    upstream = np.where(tree.parent == 0, v0,
                        phasors[np.maximum(tree.parent - 1, 0)])
    branch = (upstream - phasors) / z
    # Node current is the branch current in minus the branch currents out
    node = branch.copy()
    for j in tree.order:
        parent = tree.parent[j - 1]
        if parent != 0:
            node[parent - 1] -= branch[j - 1]

    return float(np.max(np.abs(phasors * np.conj(node) - s_load),
                        initial=0.0))


def ac_power_flow(model: FeederModel, inj: Injection, v0: float,
                  warm_start: typing.Optional[np.ndarray] = None
                  ) -> AcSolution:
    '''
    Backward-forward sweep with constant-power loads. Branch currents are
    accumulated from the leaves with the downstream incidence matrix, then
    voltages are updated from the root along each path.
    '''

    tree = model.tree
    n = model.n
    if inj.p.shape != (n,):
        raise ValueError(f'Expected injections for {n} buses, got '
                         f'{inj.p.shape}')

    z = tree.r + 1j * tree.x
    s_load = -(inj.p + 1j * inj.q)
    T = tree.downstream

    if warm_start is not None and warm_start.shape == (n,):
        V = np.array(warm_start, dtype=complex)
    else:
        V = np.full(n, v0, dtype=complex)

    if not np.any(s_load):
        V = np.full(n, v0, dtype=complex)
        return AcSolution(v=np.abs(V), phasors=V, s_root=0j, losses=0j,
                          sweeps=0, mismatch=0.0)

    for sweep in range(1, AC_MAX_SWEEPS + 1):
        current = np.conj(s_load / V)
        branch = T @ current
        V_new = v0 - T.T @ (z * branch)

        if not np.all(np.isfinite(V_new)):
            raise NumericalError('AC power flow produced non-finite voltages')

        change = np.max(np.abs(V_new - V))
        V = V_new
        if change < AC_TOLERANCE:
            break
    else:
        raise NumericalError(f'AC power flow did not converge within '
                             f'{AC_MAX_SWEEPS} sweeps')

    magnitudes = np.abs(V)
    if np.any(magnitudes <= SANITY_BAND[0]) \
            or np.any(magnitudes >= SANITY_BAND[1]):
        raise NumericalError(f'AC voltages outside the sanity band: '
                             f'[{magnitudes.min()}, {magnitudes.max()}]')

    branch = T @ np.conj(s_load / V)
    roots = tree.parent == 0
    s_root = complex(v0 * np.conj(np.sum(branch[roots])))
    losses = complex(np.sum(z * np.abs(branch) ** 2))

    return AcSolution(
        v=magnitudes,
        phasors=V,
        s_root=s_root,
        losses=losses,
        sweeps=sweep,
        mismatch=_nodal_mismatch(tree, z, v0, V, s_load),
    )
