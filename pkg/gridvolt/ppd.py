'''
Static hybrid voltage control problem and the projected partial primal-dual
(PPD) solver.

The problem is

    minimize    1/2 |v - mu|^2 + gamma/2 |v - mu|_B^2
    subject to  Bv = q + w,  q_lo <= q <= q_hi

and each PPD iteration minimizes the Lagrangian exactly in v, takes a
projected gradient step in q using the measured voltage, and a gradient
ascent step in the dual lambda.
'''

import dataclasses
import math
import typing

import numpy as np

from . import flow
from .feeder import BbusMatrix
from .util import NumericalError


DEFAULT_GAMMA = 0.5
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 200_000
DEFAULT_STEP_FRACTION = 0.5
DIVERGENCE_THRESHOLD = 1e6


@dataclasses.dataclass(frozen=True, eq=False)
class HvcProblem:
    B: BbusMatrix
    w: np.ndarray
    mu: np.ndarray
    gamma: float
    q_lo: np.ndarray
    q_hi: np.ndarray

    def __post_init__(self):
        n = self.B.n
        for name in ('w', 'mu', 'q_lo', 'q_hi'):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.ndim == 0:
                value = np.full(n, float(value))
            if value.shape != (n,):
                raise ValueError(f'{name} has shape {value.shape}, expected '
                                 f'({n},)')
            elif np.any(np.isnan(value)):
                raise ValueError(f'{name} contains NaN')
            value.setflags(write=False)
            object.__setattr__(self, name, value)

        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValueError(f'gamma must be nonnegative: {self.gamma}')
        elif np.any(self.q_lo > self.q_hi):
            raise ValueError('Box limits are inverted (q_lo > q_hi)')
        elif not np.all(np.isfinite(self.w)) \
                or not np.all(np.isfinite(self.mu)):
            raise ValueError('w and mu must be finite')

    @property
    def n(self) -> int:
        return self.B.n

    def voltage(self, q) -> np.ndarray:
        return flow.lindistflow_voltage(self.B, q, self.w)


@dataclasses.dataclass(eq=False)
class PpdState:
    v: np.ndarray
    q: np.ndarray
    lam: np.ndarray
    k: int = 0

    def copy(self) -> 'PpdState':
        return PpdState(self.v.copy(), self.q.copy(), self.lam.copy(), self.k)

    def norm_inf(self) -> float:
        return max(float(np.max(np.abs(a), initial=0.0))
                   for a in (self.v, self.q, self.lam))


@dataclasses.dataclass(frozen=True)
class ControlConfig:
    alpha: float
    beta: float
    gamma: float = DEFAULT_GAMMA
    theta: float = 0.0
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f'Step sizes must be positive: '
                             f'alpha={self.alpha}, beta={self.beta}')
        elif not self.theta >= 0:
            raise ValueError(f'theta must be nonnegative: {self.theta}')
        elif not self.tol > 0:
            raise ValueError(f'tol must be positive: {self.tol}')
        elif self.max_iters < 0:
            raise ValueError(f'max_iters must be nonnegative: '
                             f'{self.max_iters}')
        elif not self.gamma >= 0:
            raise ValueError(f'gamma must be nonnegative: {self.gamma}')


@dataclasses.dataclass(frozen=True)
class KktResiduals:
    r_v: float
    r_q: float
    r_lambda: float

    def max(self) -> float:
        return max(self.r_v, self.r_q, self.r_lambda)


@dataclasses.dataclass(frozen=True)
class StepSizes:
    alpha: float
    beta: float
    alpha_max: float
    beta_max: float

    @property
    def warnings(self) -> list[str]:
        result = []
        if self.alpha >= self.alpha_max:
            result.append(f'alpha={self.alpha:g} is not below the certified '
                          f'bound {self.alpha_max:g}')
        if self.beta >= self.beta_max:
            result.append(f'beta={self.beta:g} is not below the certified '
                          f'bound {self.beta_max:g}')
        return result


@dataclasses.dataclass(frozen=True)
class TraceRecord:
    k: int
    mismatch_norm: float
    r_v: float
    r_q: float
    r_lambda: float


@dataclasses.dataclass(eq=False)
class StaticSolution:
    state: PpdState
    trace: list[TraceRecord]
    residuals: KktResiduals
    converged: bool
    diverged: bool


def stepsize_bounds(eta_tilde: float, L_tilde: float,
                    gamma: float) -> tuple[float, float]:
    '''
    Certified step-size region from the extremal singular values of B.
    '''

    if not (eta_tilde > 0 and L_tilde > 0 and gamma > 0):
        raise ValueError(f'Step-size bounds need positive inputs: '
                         f'{eta_tilde}, {L_tilde}, {gamma}')

    alpha_max = 2 / (gamma * (1 / L_tilde + 1 / eta_tilde))
    beta_max = 2 / (L_tilde ** 2 + (L_tilde + eta_tilde) / gamma)

    return alpha_max, beta_max


def stepsize_bounds_general(eta: float, L: float, c: float,
                            sigma_max: float) -> tuple[float, float]:
    '''
    General step-size rule for a c-strongly convex f and a g whose gradient
    is eta-strongly monotone and L-Lipschitz.
    '''

    if not (eta > 0 and L > 0 and c > 0 and sigma_max > 0):
        raise ValueError(f'Step-size bounds need positive inputs: '
                         f'{eta}, {L}, {c}, {sigma_max}')

    alpha_max = 2 / (eta + L)
    beta_max = 2 * c * eta * L / (eta * L * sigma_max + c * (eta + L))

    return alpha_max, beta_max


def auto_step_sizes(B: BbusMatrix, gamma: float,
                    alpha_fraction: float = DEFAULT_STEP_FRACTION,
                    beta_fraction: float = DEFAULT_STEP_FRACTION,
                    alpha: typing.Optional[float] = None,
                    beta: typing.Optional[float] = None) -> StepSizes:
    '''
    Resolve step sizes against B. Missing values default to the given
    fractions of the certified bounds.
    '''

    if not (alpha_fraction > 0 and beta_fraction > 0):
        raise ValueError(f'Step fractions must be positive: '
                         f'{alpha_fraction}, {beta_fraction}')

    alpha_max, beta_max = stepsize_bounds(B.eta_tilde, B.L_tilde, gamma)

    return StepSizes(
        alpha=alpha_fraction * alpha_max if alpha is None else alpha,
        beta=beta_fraction * beta_max if beta is None else beta,
        alpha_max=alpha_max,
        beta_max=beta_max,
    )


def mismatch_norm(v, mu) -> float:
    return float(np.linalg.norm(np.asarray(v) - mu))


def g_value(q, problem: HvcProblem) -> float:
    d = problem.voltage(q) - problem.mu
    return 0.5 * problem.gamma * float(d @ (problem.B.matrix @ d))


def grad_g(q, problem: HvcProblem) -> np.ndarray:
    return problem.gamma * (problem.voltage(q) - problem.mu)


def project_box(x, q_lo, q_hi) -> np.ndarray:
    q_lo = np.asarray(q_lo, dtype=float)
    q_hi = np.asarray(q_hi, dtype=float)
    if np.any(q_lo > q_hi):
        raise ValueError('Box limits are inverted (q_lo > q_hi)')

    return np.clip(x, q_lo, q_hi)


def neighbor_sum(matrix: np.ndarray, values: np.ndarray) -> np.ndarray:
    '''
    Row-wise sum_i B_ji x_i. <values> is either a vector shared by all rows or
    a matrix whose row j holds the copy of x known to bus j.
    '''

    return (matrix * values).sum(axis=1)


def v_update(B_lam: np.ndarray, mu: np.ndarray, v_prev: np.ndarray,
             theta: float) -> np.ndarray:
    '''
    Minimizer of the Lagrangian in v, with an optional proximal term
    theta |v - v_prev|^2.
    '''

    return (mu + 2 * theta * v_prev - B_lam) / (1 + 2 * theta)


def q_update(q: np.ndarray, lam: np.ndarray, v_meas: np.ndarray,
             mu: np.ndarray, gamma: float, alpha: float, q_lo: np.ndarray,
             q_hi: np.ndarray) -> np.ndarray:
    return np.clip(q - alpha * (gamma * (v_meas - mu) - lam), q_lo, q_hi)


def lambda_update(lam: np.ndarray, B_v: np.ndarray, q: np.ndarray,
                  w: np.ndarray, beta: float) -> np.ndarray:
    return lam + beta * (B_v - q - w)


def initial_state(problem: HvcProblem, q0=None) -> PpdState:
    q0 = np.zeros(problem.n) if q0 is None else np.asarray(q0, dtype=float)
    return PpdState(
        v=problem.mu.copy(),
        q=project_box(q0, problem.q_lo, problem.q_hi),
        lam=np.zeros(problem.n),
        k=0,
    )


def ppd_step(state: PpdState, problem: HvcProblem, config: ControlConfig,
             v_meas) -> PpdState:
    B = problem.B.matrix

    v = v_update(neighbor_sum(B, state.lam), problem.mu, state.v,
                 config.theta)
    q = q_update(state.q, state.lam, np.asarray(v_meas, dtype=float),
                 problem.mu, problem.gamma, config.alpha, problem.q_lo,
                 problem.q_hi)
    lam = lambda_update(state.lam, neighbor_sum(B, v), q, problem.w,
                        config.beta)

    new_state = PpdState(v=v, q=q, lam=lam, k=state.k + 1)
    if not all(np.all(np.isfinite(a)) for a in (v, q, lam)):
        raise NumericalError(f'Non-finite iterate at k={new_state.k}; '
                             f'reduce the step sizes')

    return new_state


def kkt_residuals(state: PpdState, problem: HvcProblem,
                  v_lin: typing.Optional[np.ndarray] = None) -> KktResiduals:
    '''
    Stationarity residuals in v and q and the primal feasibility residual.
    <v_lin> may carry X(q + w) when the caller already has it.
    '''

    B = problem.B.matrix
    if v_lin is None:
        v_lin = problem.voltage(state.q)

    grad = problem.gamma * (v_lin - problem.mu)
    projected = project_box(state.q - (grad - state.lam), problem.q_lo,
                            problem.q_hi)

    return KktResiduals(
        r_v=float(np.linalg.norm(state.v - problem.mu + B.T @ state.lam)),
        r_q=float(np.linalg.norm(state.q - projected)),
        r_lambda=float(np.linalg.norm(B @ state.v - state.q - problem.w)),
    )


def iterate_static(problem: HvcProblem, config: ControlConfig, q0=None
                   ) -> typing.Iterator[tuple[PpdState, np.ndarray]]:
    '''
    Yield (state, measured voltage) pairs, starting with the initial state.
    The measurement is the exact linear response X(q + w) of the state's q.
    '''

    state = initial_state(problem, q0)
    v_meas = problem.voltage(state.q)
    yield state, v_meas

    while True:
        state = ppd_step(state, problem, config, v_meas)
        v_meas = problem.voltage(state.q)
        yield state, v_meas


def solve_static(problem: HvcProblem, config: ControlConfig,
                 q0=None) -> StaticSolution:
    trace = []
    best = None
    best_residual = math.inf
    converged = False
    diverged = False
    state = None
    residuals = None

    try:
        for state, v_meas in iterate_static(problem, config, q0):
            residuals = kkt_residuals(state, problem, v_lin=v_meas)
            trace.append(TraceRecord(
                k=state.k,
                mismatch_norm=mismatch_norm(v_meas, problem.mu),
                r_v=residuals.r_v,
                r_q=residuals.r_q,
                r_lambda=residuals.r_lambda,
            ))

            current = residuals.max()
            if current < best_residual:
                best, best_residual = state, current

            if current < config.tol:
                converged = True
                break
            elif state.norm_inf() > DIVERGENCE_THRESHOLD:
                diverged = True
                break
            elif state.k >= config.max_iters:
                break
    except NumericalError:
        diverged = True

    if converged:
        final = state
    elif diverged:
        # The best iterate is meaningless once the solve blew up
        final = state if state is not None else best
    else:
        final = best

    return StaticSolution(
        state=final,
        trace=trace,
        residuals=kkt_residuals(final, problem) if not diverged
        else residuals,
        converged=converged,
        diverged=diverged,
    )


def certified_q_weight(B: BbusMatrix, gamma: float, alpha: float,
                       beta: float) -> float:
    '''
    Weight b on |q - q*|^2 for which b|q - q*|^2 + (alpha/beta)|lambda -
    lambda*|^2 is non-increasing along PPD iterates with certified steps.
    '''

    eta = gamma / B.L_tilde
    L = gamma / B.eta_tilde
    sigma = B.L_tilde ** 2
    rho = (eta + L) / (eta * L * sigma)

    return 1 - alpha * beta * (1 + 1 / rho)


def lyapunov_values(states: typing.Iterable[PpdState], saddle: PpdState,
                    alpha: float, beta: float,
                    q_weight: float = 1.0) -> np.ndarray:
    return np.array([
        q_weight * float(np.sum((s.q - saddle.q) ** 2))
        + alpha / beta * float(np.sum((s.lam - saddle.lam) ** 2))
        for s in states
    ])
