'''
Independent solvers for the static problem, used to check the PPD iterates.

The voltage is eliminated through v = X(q + w), leaving the box-constrained
quadratic

    F(q) = 1/2 (Xq - c)^T (I + gamma B) (Xq - c),    c = mu - Xw

whose minimizer is computed here without touching the PPD code path.
'''

import itertools

import numpy as np
import scipy.linalg
import scipy.optimize

from .ppd import HvcProblem, PpdState
from .util import NumericalError


METHODS = ('bvls', 'apg', 'enumerate')
ENUMERATE_MAX_BUSES = 12
KKT_TOLERANCE = 1e-10


class _Quadratic:
    def __init__(self, problem: HvcProblem):
        self.problem = problem
        self.X = np.array(problem.B.inverse)
        self.c = problem.mu - self.X @ problem.w
        self.M = np.eye(problem.n) + problem.gamma * problem.B.matrix
        self.H = self.X @ self.M @ self.X
        self.H = (self.H + self.H.T) / 2
        self.g = -self.X @ (self.M @ self.c)

    def value(self, q):
        d = self.X @ q - self.c
        return 0.5 * float(d @ (self.M @ d))

    def gradient(self, q):
        return self.H @ q + self.g

    def residual(self, q):
        p = self.problem
        return float(np.linalg.norm(
            q - np.clip(q - self.gradient(q), p.q_lo, p.q_hi)))


def reference_objective(q, problem: HvcProblem) -> float:
    return _Quadratic(problem).value(np.asarray(q, dtype=float))


def _polish(quad: _Quadratic, q: np.ndarray) -> np.ndarray:
    '''
    Re-solve the free variables of <q> exactly, keeping its active set.
    '''

    p = quad.problem
    span = np.maximum(p.q_hi - p.q_lo, 1.0)
    gap = 1e-9 * np.where(np.isfinite(span), span, 1.0)
    at_lo = q <= p.q_lo + gap
    at_hi = ~at_lo & (q >= p.q_hi - gap)
    free = ~(at_lo | at_hi)

    # Variables in the active set sit exactly on their bound
    candidate = np.where(at_lo, p.q_lo, np.where(at_hi, p.q_hi, q))
    if np.any(free):
        fixed = ~free
        rhs = -quad.g[free] - quad.H[np.ix_(free, fixed)] @ candidate[fixed]
        try:
            candidate[free] = scipy.linalg.solve(
                quad.H[np.ix_(free, free)], rhs, assume_a='pos')
        except np.linalg.LinAlgError:
            return q

    candidate = np.clip(candidate, p.q_lo, p.q_hi)
    if quad.residual(candidate) <= quad.residual(q):
        return candidate
    return q


def _solve_bvls(quad: _Quadratic) -> np.ndarray:
    p = quad.problem
    n = p.n
    q = np.zeros(n)

    pinned = p.q_lo == p.q_hi
    q[pinned] = p.q_lo[pinned]
    free = ~pinned
    if not np.any(free):
        return q

    R = scipy.linalg.cholesky(quad.M, lower=True)
    A = R.T @ quad.X
    b = R.T @ quad.c
    # Move the pinned columns into the right-hand side
    b = b - A[:, pinned] @ q[pinned]

    result = scipy.optimize.lsq_linear(
        A[:, free], b,
        bounds=(p.q_lo[free], p.q_hi[free]),
        method='bvls',
        tol=1e-15,
        max_iter=None,
    )
    q[free] = result.x

    return np.clip(q, p.q_lo, p.q_hi)


def _solve_apg(quad: _Quadratic, max_iters=200_000) -> np.ndarray:
    '''
    Accelerated projected gradient with backtracking and gradient-based
    restarts.
    '''

    p = quad.problem
    q = np.clip(np.zeros(p.n), p.q_lo, p.q_hi)
    y = q.copy()
    t = 1.0
    step = 1.0

    for _ in range(max_iters):
        grad = quad.gradient(y)
        f_y = quad.value(y)

        while True:
            candidate = np.clip(y - step * grad, p.q_lo, p.q_hi)
            d = candidate - y
            if quad.value(candidate) <= f_y + grad @ d + (d @ d) / (2 * step):
                break
            step /= 2
            if step < 1e-300:
                raise NumericalError('Backtracking step collapsed')

        if quad.residual(candidate) < 1e-13:
            return candidate

        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        momentum = (t - 1) / t_next

        if (candidate - q) @ (y - candidate) > 0:
            # Restart when the momentum points uphill
            t_next = 1.0
            momentum = 0.0

        y = candidate + momentum * (candidate - q)
        q = candidate
        t = t_next

    return q


def _solve_enumerate(quad: _Quadratic) -> np.ndarray:
    '''
    Try every assignment of each variable to its lower bound, upper bound or
    the interior, and keep the feasible KKT point with the lowest objective.
    '''

    p = quad.problem
    n = p.n
    if n > ENUMERATE_MAX_BUSES:
        raise ValueError(f'Active-set enumeration supports at most '
                         f'{ENUMERATE_MAX_BUSES} buses, got {n}')

    tol = 1e-9
    best = None
    best_value = np.inf

    for pattern in itertools.product((-1, 0, 1), repeat=n):
        pattern = np.array(pattern)
        lower = pattern < 0
        upper = pattern > 0
        if np.any(np.isinf(p.q_lo[lower])) or np.any(np.isinf(p.q_hi[upper])):
            continue

        q = np.zeros(n)
        q[lower] = p.q_lo[lower]
        q[upper] = p.q_hi[upper]
        free = pattern == 0
        fixed = ~free

        if np.any(free):
            rhs = -quad.g[free] - quad.H[np.ix_(free, fixed)] @ q[fixed]
            q[free] = scipy.linalg.solve(quad.H[np.ix_(free, free)], rhs,
                                         assume_a='pos')
            if np.any(q[free] < p.q_lo[free] - tol) \
                    or np.any(q[free] > p.q_hi[free] + tol):
                continue

        grad = quad.gradient(q)
        if np.any(grad[lower] < -tol) or np.any(grad[upper] > tol):
            continue

        value = quad.value(q)
        if value < best_value:
            best, best_value = np.clip(q, p.q_lo, p.q_hi), value

    if best is None:
        raise NumericalError('No active set satisfies the KKT conditions')

    return best


def reference_qp_solve(problem: HvcProblem,
                       method: str = 'bvls') -> tuple[np.ndarray, np.ndarray]:
    '''
    High-accuracy minimizer (v*, q*) of the static problem.
    '''

    quad = _Quadratic(problem)

    if method == 'bvls':
        q = _solve_bvls(quad)
    elif method == 'apg':
        q = _solve_apg(quad)
    elif method == 'enumerate':
        q = _solve_enumerate(quad)
    else:
        raise ValueError(f'Unknown reference method: {method!r}; expected '
                         f'one of {", ".join(METHODS)}')

    q = _polish(quad, q)

    residual = quad.residual(q)
    if residual > KKT_TOLERANCE:
        raise NumericalError(f'Reference solve ({method}) left KKT residual '
                             f'{residual:.3e}')

    return problem.voltage(q), q


def saddle_point(problem: HvcProblem, method: str = 'bvls') -> PpdState:
    '''
    Primal-dual optimum (v*, q*, lambda*) with lambda* = X(mu - v*).
    '''

    v, q = reference_qp_solve(problem, method=method)
    lam = problem.B.solve(problem.mu - v)

    return PpdState(v=v, q=q, lam=lam, k=0)
