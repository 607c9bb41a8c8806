'''
Experiment drivers behind the CLI subcommands: the static solve, the
gamma, activation-rate and step-size sweeps, and strategy comparisons.
Each driver is a pure function of its scenario and arguments; the CLI only
schedules them and writes their outputs.
'''

import dataclasses
import itertools
import typing

import numpy as np
import pandas as pd

from . import ppd
from . import sim
from .formats import results
from .formats.scenario import Scenario
from .reference import reference_qp_solve, saddle_point
from .util import NumericalError


DEFAULT_GAMMAS = (0.017, 0.1, 0.5, 1.0, 5.0)
DEFAULT_RATES = (0.1, 0.25, 0.5, 1.0)
DEFAULT_FRACTIONS = (0.25, 0.5, 0.9, 5.0)
ACTIVATION_TOL = 1e-5
ACTIVATION_MAX_ROUNDS = 20_000


def round_seconds(scenario: Scenario) -> float:
    timing = scenario.timing
    return timing.timestep_seconds / timing.rounds_per_timestep


@dataclasses.dataclass(eq=False)
class StaticRun:
    scenario: Scenario
    problem: ppd.HvcProblem
    solution: ppd.StaticSolution
    steps: ppd.StepSizes
    # None when the reference solve failed
    reference: typing.Optional[ppd.PpdState]

    def summary(self) -> dict:
        s = self.solution
        state = s.state
        v_lin = self.problem.voltage(state.q)

        data = {
            'converged': s.converged,
            'diverged': s.diverged,
            'iterations': state.k,
            'residuals': dataclasses.asdict(s.residuals)
            if s.residuals is not None else None,
            'final_mismatch': ppd.mismatch_norm(v_lin, self.problem.mu),
            'steps': dataclasses.asdict(self.steps),
            'final_state': {'v': state.v, 'q': state.q, 'lambda': state.lam},
            'seed': self.scenario.seed,
            'config': self.scenario.to_dict(),
            'warnings': list(self.scenario.warnings),
        }

        if self.reference is not None:
            ref = self.reference
            data['reference'] = {
                'mismatch': ppd.mismatch_norm(ref.v, self.problem.mu),
                'q': ref.q,
                'v': ref.v,
                'lambda': ref.lam,
                'q_error_inf': float(np.max(np.abs(state.q - ref.q))),
            }

        return data

    def trace_frame(self) -> pd.DataFrame:
        return results.static_trace_frame(self.solution.trace,
                                          round_seconds(self.scenario))


def run_static(scenario: Scenario, unlimited_box: bool = False,
               method: str = 'bvls') -> StaticRun:
    problem = sim.static_problem(scenario, 0, unlimited_box)
    solution = ppd.solve_static(problem, scenario.config())

    try:
        reference = saddle_point(problem, method=method)
    except NumericalError:
        reference = None

    return StaticRun(scenario=scenario, problem=problem, solution=solution,
                     steps=scenario.steps, reference=reference)


def gamma_point(problem: ppd.HvcProblem, gamma: float,
                method: str = 'bvls') -> dict:
    '''
    Optimal voltage deviation of <problem> reweighted with <gamma>.
    '''

    problem = dataclasses.replace(problem, gamma=gamma)
    v, q = reference_qp_solve(problem, method=method)

    return {
        'gamma': gamma,
        'mismatch_norm': ppd.mismatch_norm(v, problem.mu),
        'max_abs_deviation': float(np.max(np.abs(v - problem.mu))),
        'var_total_pu': float(np.sum(np.abs(q))),
        'saturated_buses': int(np.sum((q <= problem.q_lo)
                                      | (q >= problem.q_hi))),
    }


def gamma_table(rows: typing.Iterable[dict]) -> pd.DataFrame:
    return pd.DataFrame(sorted(rows, key=lambda r: r['gamma']),
                        columns=['gamma', 'mismatch_norm', 'max_abs_deviation',
                                 'var_total_pu', 'saturated_buses'])


def sync_rounds_to_tolerance(problem: ppd.HvcProblem,
                             config: ppd.ControlConfig, v_star: np.ndarray,
                             tol: float, max_rounds: int
                             ) -> typing.Optional[int]:
    '''
    Iterations-to-tolerance of the synchronous static solver.
    '''

    measured = (v for _, v in itertools.islice(
        ppd.iterate_static(problem, config), max_rounds + 1))
    return sim.iterations_to_tolerance(measured, v_star, tol)


def activation_target(scenario: Scenario) -> np.ndarray:
    return saddle_point(sim.static_problem(scenario)).v


def activation_point(scenario: Scenario, v_star: np.ndarray, rate: float,
                     seed: int, tol: float = ACTIVATION_TOL,
                     max_rounds: int = ACTIVATION_MAX_ROUNDS
                     ) -> typing.Optional[int]:
    return sim.rounds_to_tolerance(scenario, v_star, tol, max_rounds,
                                   activation_prob=rate, seed=seed)


def median_rounds(counts: typing.Sequence[typing.Optional[int]]) -> float:
    '''
    Median iteration count with runs that missed the tolerance counted as
    infinite.
    '''

    values = [np.inf if c is None else float(c) for c in counts]
    return float(np.median(values)) if values else np.inf


def activation_table(points: dict[tuple[float, int], typing.Optional[int]],
                     sync: typing.Optional[int]) -> pd.DataFrame:
    rows = []
    for rate in sorted({rate for rate, _ in points}):
        counts = [points[key] for key in sorted(points) if key[0] == rate]
        median = median_rounds(counts)
        rows.append({
            'rate': rate,
            'median_rounds': median if np.isfinite(median) else None,
            'converged_runs': sum(c is not None for c in counts),
            'runs': len(counts),
            'sync_rounds': sync,
        })

    return pd.DataFrame(rows, columns=['rate', 'median_rounds',
                                       'converged_runs', 'runs',
                                       'sync_rounds'])


@dataclasses.dataclass(eq=False)
class StepsizePoint:
    alpha_fraction: float
    beta_fraction: float
    steps: ppd.StepSizes
    solution: ppd.StaticSolution

    def row(self) -> dict:
        return {
            'alpha_fraction': self.alpha_fraction,
            'beta_fraction': self.beta_fraction,
            'alpha': self.steps.alpha,
            'beta': self.steps.beta,
            'certified': not self.steps.warnings,
            'converged': self.solution.converged,
            'diverged': self.solution.diverged,
            'iterations': self.solution.trace[-1].k if self.solution.trace
            else 0,
            'final_mismatch': self.solution.trace[-1].mismatch_norm
            if self.solution.trace else None,
        }


def stepsize_point(scenario: Scenario, alpha_fraction: float,
                   beta_fraction: float, unlimited_box: bool = False
                   ) -> StepsizePoint:
    scenario = scenario.with_controller(alpha='auto', beta='auto',
                                        alpha_fraction=alpha_fraction,
                                        beta_fraction=beta_fraction)
    problem = sim.static_problem(scenario, 0, unlimited_box)
    solution = ppd.solve_static(problem, scenario.config())

    return StepsizePoint(alpha_fraction=alpha_fraction,
                         beta_fraction=beta_fraction, steps=scenario.steps,
                         solution=solution)


def stepsize_table(points: typing.Iterable[StepsizePoint]) -> pd.DataFrame:
    rows = sorted((p.row() for p in points),
                  key=lambda r: (r['alpha_fraction'], r['beta_fraction']))
    return pd.DataFrame(rows, columns=['alpha_fraction', 'beta_fraction',
                                       'alpha', 'beta', 'certified',
                                       'converged', 'diverged', 'iterations',
                                       'final_mismatch'])


def outage_timesteps(scenario: Scenario,
                     result: sim.SimulationResult) -> list[int]:
    '''
    Timesteps whose rounds all fall inside a total outage window and whose
    VAR headroom is nonzero.
    '''

    rounds = scenario.timing.rounds_per_timestep
    total = [o.rounds for o in scenario.comm.outages if o.buses is None]

    selected = []
    for summary in result.timesteps:
        first = summary.timestep * rounds
        last = first + rounds - 1
        if summary.headroom_pu > 0 and any(first in window and last in window
                                           for window in total):
            selected.append(summary.timestep)

    return selected


def outage_mismatch(scenario: Scenario,
                    result: sim.SimulationResult) -> typing.Optional[float]:
    '''
    Time-averaged mismatch over the total outage windows, excluding
    timesteps without VAR headroom.
    '''

    selected = set(outage_timesteps(scenario, result))
    values = [s.mean_mismatch for s in result.timesteps
              if s.timestep in selected]

    return float(np.mean(values)) if values else None
