import argparse
import concurrent.futures
import math
import os
import sys
import time

from . import experiments
from . import reference
from . import sim
from . import util
from .formats import results
from .formats.scenario import AUTO, Scenario, parse_scenario
from .util import NumericalError


EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INPUT_ERROR = 3
EXIT_NUMERICAL_ERROR = 4

STRATEGY_ALL = 'all'


class ArgumentParser(argparse.ArgumentParser):
    '''
    Rejected arguments are input errors, not convergence failures.
    '''

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT_ERROR, f'{self.prog}: error: {message}\n')


def print_status(*args, **kwargs):
    print('\x1b[1m*****', *args, '*****\x1b[0m', **kwargs)


def print_warning(*args, **kwargs):
    print('\x1b[1;31m*****', '[WARNING]', *args, '*****\x1b[0m', **kwargs)


def print_completed(start: int):
    elapsed = time.perf_counter_ns() - start
    print_status(f'Completed after {elapsed / 1_000_000_000:.1f}s')


def load_scenario(args) -> Scenario:
    print_status('Loading scenario', args.scenario)
    scenario = parse_scenario(args.scenario)

    controller = {}
    for name in ('gamma', 'alpha', 'beta', 'max_iters', 'tol'):
        value = getattr(args, name, None)
        if value is not None:
            controller[name] = value
    if controller:
        scenario = scenario.with_controller(**controller)

    comm = {}
    if getattr(args, 'activation', None) is not None:
        comm['activation_prob'] = args.activation
    if getattr(args, 'seed', None) is not None:
        comm['seed'] = args.seed
    if comm:
        scenario = scenario.with_comm(**comm)

    strategy = getattr(args, 'strategy', None)
    if strategy is not None and strategy != STRATEGY_ALL:
        scenario = scenario.with_strategy(sim.Strategy(strategy))

    for warning in scenario.warnings:
        print_warning(warning)

    return scenario


def run_parallel(fn, keys) -> dict:
    '''
    Run fn(key) for every key on a thread pool. The result maps each key to
    its value; completion order does not matter.
    '''

    keys = list(keys)
    if not keys:
        return {}

    output = {}
    with concurrent.futures.ThreadPoolExecutor(
            max_workers=util.thread_count(len(keys))) as executor:
        futures = {executor.submit(fn, key): key for key in keys}

        for future in concurrent.futures.as_completed(futures):
            output[futures[future]] = future.result()

    return output


def solve_static_subcommand(args) -> int:
    scenario = load_scenario(args)
    start = time.perf_counter_ns()

    steps = scenario.steps
    print_status(f'Solving static problem with alpha={steps.alpha:g}, '
                 f'beta={steps.beta:g}, gamma={scenario.controller.gamma:g}')
    run = experiments.run_static(scenario, unlimited_box=args.unlimited_box,
                                 method=args.method)

    print_status('Writing results to', args.out)
    results.write_results(args.out, run.trace_frame(), run.summary())

    solution = run.solution
    if run.reference is None:
        print_warning(f'Reference solve ({args.method}) failed')

    if solution.converged:
        print_status(f'Converged after {solution.state.k} iterations; '
                     f'max KKT residual {solution.residuals.max():.3e}')
        code = EXIT_OK
    elif solution.diverged:
        print_warning(f'Iterates diverged at iteration {solution.state.k}')
        code = EXIT_NOT_CONVERGED
    else:
        print_warning(f'Not converged after {solution.state.k} iterations')
        code = EXIT_NOT_CONVERGED

    print_completed(start)
    return code


def sweep_gamma_subcommand(args) -> int:
    scenario = load_scenario(args)
    start = time.perf_counter_ns()

    problem = sim.static_problem(scenario, 0, args.unlimited_box)
    print_status('Sweeping gamma over',
                 ', '.join(f'{g:g}' for g in sorted(set(args.gammas))))
    rows = run_parallel(
        lambda g: experiments.gamma_point(problem, g, method=args.method),
        sorted(set(args.gammas)))

    path = os.path.join(args.out, 'gamma.csv')
    print_status('Writing', path)
    os.makedirs(args.out, exist_ok=True)
    results.write_table(experiments.gamma_table(rows.values()), path)

    print_completed(start)
    return EXIT_OK


def sweep_activation_subcommand(args) -> int:
    scenario = load_scenario(args)
    start = time.perf_counter_ns()

    print_status('Solving reference optimum')
    v_star = experiments.activation_target(scenario)

    sync = experiments.sync_rounds_to_tolerance(
        sim.static_problem(scenario), scenario.config(), v_star,
        args.target_tol, args.max_rounds)

    rates = sorted(set(args.rates))
    seeds = [scenario.seed + i for i in range(args.seeds)]
    print_status(f'Sweeping activation rate over '
                 f'{", ".join(f"{r:g}" for r in rates)} with {len(seeds)} '
                 f'seeds')

    points = run_parallel(
        lambda key: experiments.activation_point(
            scenario, v_star, key[0], key[1], tol=args.target_tol,
            max_rounds=args.max_rounds),
        [(rate, seed) for rate in rates for seed in seeds])

    table = experiments.activation_table(points, sync)
    path = os.path.join(args.out, 'activation.csv')
    print_status('Writing', path)
    os.makedirs(args.out, exist_ok=True)
    results.write_table(table, path)

    code = EXIT_OK
    missed = sorted({rate for (rate, _), count in points.items()
                     if count is None})
    if missed:
        print_warning(f'Runs missed the tolerance within {args.max_rounds} '
                      f'rounds at rates {", ".join(f"{r:g}" for r in missed)}')
        code = EXIT_NOT_CONVERGED

    print_completed(start)
    return code


def sweep_stepsize_subcommand(args) -> int:
    scenario = load_scenario(args)
    start = time.perf_counter_ns()

    c = scenario.controller
    pairs = {(f, c.beta_fraction) for f in args.fractions}
    pairs |= {(c.alpha_fraction, f) for f in args.beta_fractions or ()}
    pairs = sorted(pairs)

    print_status('Sweeping step-size fractions',
                 ', '.join(f'({a:g}, {b:g})' for a, b in pairs))
    points = run_parallel(
        lambda pair: experiments.stepsize_point(
            scenario, pair[0], pair[1], unlimited_box=args.unlimited_box),
        pairs)

    trace_dir = os.path.join(args.out, 'traces')
    os.makedirs(trace_dir, exist_ok=True)
    round_seconds = experiments.round_seconds(scenario)

    for (a, b), point in sorted(points.items()):
        results.write_table(
            results.static_trace_frame(point.solution.trace, round_seconds),
            os.path.join(trace_dir, f'trace_alpha{a:g}_beta{b:g}.csv'))
        if point.solution.diverged:
            print_warning(f'alpha fraction {a:g}, beta fraction {b:g}: '
                          f'diverged')

    path = os.path.join(args.out, 'stepsize.csv')
    print_status('Writing', path)
    results.write_table(experiments.stepsize_table(points.values()), path)

    print_completed(start)
    return EXIT_OK


def simulate_subcommand(args) -> int:
    scenario = load_scenario(args)
    start = time.perf_counter_ns()

    if args.strategy == STRATEGY_ALL:
        strategies = list(sim.Strategy)
    else:
        strategies = [scenario.strategy]

    timing = scenario.timing
    print_status(f'Simulating {timing.timesteps} timesteps of '
                 f'{timing.rounds_per_timestep} rounds with',
                 ', '.join(s.value for s in strategies))

    runs = run_parallel(
        lambda strategy: sim.simulate(
            scenario, strategy=strategy,
            validate_lindistflow=args.validate_lindistflow,
            record_buses=args.record_buses),
        strategies)

    for strategy in strategies:
        result = runs[strategy]
        if len(strategies) > 1:
            directory = os.path.join(args.out, strategy.value)
        else:
            directory = args.out

        extra = {'outage_mismatch':
                 experiments.outage_mismatch(scenario, result)}
        print_status('Writing', strategy.value, 'results to', directory)
        results.write_simulation(result, directory, extra)

        if args.validate_lindistflow:
            for summary in result.timesteps:
                print(f'timestep {summary.timestep}: max |v_ac - v_lin| = '
                      f'{summary.lin_gap:.6f}')

    print_completed(start)
    return EXIT_OK


def positive_float_arg(arg):
    value = float(arg)
    if not (value > 0 and math.isfinite(value)):
        raise ValueError('Must be a positive number')

    return value


def nonnegative_float_arg(arg):
    value = float(arg)
    if not (value >= 0 and math.isfinite(value)):
        raise ValueError('Must be a nonnegative number')

    return value


def probability_arg(arg):
    value = float(arg)
    if not 0 <= value <= 1:
        raise ValueError('Must lie in [0, 1]')

    return value


def step_arg(arg):
    if arg == AUTO:
        return arg

    return positive_float_arg(arg)


def nonnegative_int_arg(arg):
    value = int(arg)
    if value < 0:
        raise ValueError('Must be nonnegative')

    return value


def positive_int_arg(arg):
    value = int(arg)
    if value < 1:
        raise ValueError('Must be positive')

    return value


def list_arg(item_type):
    def parse(arg):
        values = [item_type(item) for item in arg.split(',') if item.strip()]
        if not values:
            raise ValueError('Empty list')
        return values

    # argparse names the type in its error message
    parse.__name__ = f'{item_type.__name__}_list'
    return parse


def parse_args(argv=None):
    scenario_parent = argparse.ArgumentParser(add_help=False)
    scenario_parent.add_argument(
        '--scenario',
        required=True,
        help='Path to scenario file',
    )
    scenario_parent.add_argument(
        '--out',
        default='.',
        help='Output directory',
    )

    controller_parent = argparse.ArgumentParser(add_help=False)
    controller_parent.add_argument(
        '--gamma',
        type=nonnegative_float_arg,
        help='Override the voltage-deviation weight',
    )
    controller_parent.add_argument(
        '--alpha',
        type=step_arg,
        help=f'Override the primal step size (number or "{AUTO}")',
    )
    controller_parent.add_argument(
        '--beta',
        type=step_arg,
        help=f'Override the dual step size (number or "{AUTO}")',
    )
    controller_parent.add_argument(
        '--max-iters',
        type=nonnegative_int_arg,
        help='Override the iteration budget of static solves',
    )
    controller_parent.add_argument(
        '--tol',
        type=positive_float_arg,
        help='Override the KKT stopping tolerance of static solves',
    )

    comm_parent = argparse.ArgumentParser(add_help=False)
    comm_parent.add_argument(
        '--activation',
        type=probability_arg,
        help='Override the bus activation probability',
    )
    comm_parent.add_argument(
        '--seed',
        type=nonnegative_int_arg,
        help='Override the communication random seed',
    )

    static_parent = argparse.ArgumentParser(add_help=False)
    static_parent.add_argument(
        '--unlimited-box',
        action='store_true',
        help='Widen every VAR box to +/-10 pu',
    )
    static_parent.add_argument(
        '--method',
        choices=reference.METHODS,
        default='bvls',
        help='Reference QP method',
    )

    parser = ArgumentParser()
    subparsers = parser.add_subparsers(
        dest='subcommand',
        required=True,
        help='Subcommands',
    )

    subparsers.add_parser(
        'solve-static',
        parents=[scenario_parent, controller_parent, static_parent],
        help='Run the static PPD solver at the first timestep',
    )

    sweep_gamma = subparsers.add_parser(
        'sweep-gamma',
        parents=[scenario_parent, controller_parent, static_parent],
        help='Optimal voltage mismatch versus gamma',
    )
    sweep_gamma.add_argument(
        '--gammas',
        type=list_arg(nonnegative_float_arg),
        default=list(experiments.DEFAULT_GAMMAS),
        help='Comma-separated gamma values',
    )

    sweep_activation = subparsers.add_parser(
        'sweep-activation',
        parents=[scenario_parent, controller_parent, comm_parent],
        help='Iterations to tolerance versus bus activation rate',
    )
    sweep_activation.add_argument(
        '--rates',
        type=list_arg(probability_arg),
        default=list(experiments.DEFAULT_RATES),
        help='Comma-separated activation rates',
    )
    sweep_activation.add_argument(
        '--seeds',
        type=positive_int_arg,
        default=20,
        help='Number of seeds per rate',
    )
    sweep_activation.add_argument(
        '--target-tol',
        type=positive_float_arg,
        default=experiments.ACTIVATION_TOL,
        help='Distance to the optimal voltage profile that counts as '
             'converged',
    )
    sweep_activation.add_argument(
        '--max-rounds',
        type=positive_int_arg,
        default=experiments.ACTIVATION_MAX_ROUNDS,
        help='Round budget per run',
    )

    sweep_stepsize = subparsers.add_parser(
        'sweep-stepsize',
        parents=[scenario_parent, controller_parent, static_parent],
        help='Convergence of the static solver versus step-size fractions',
    )
    sweep_stepsize.add_argument(
        '--fractions',
        type=list_arg(positive_float_arg),
        default=list(experiments.DEFAULT_FRACTIONS),
        help='Comma-separated fractions of the alpha bound',
    )
    sweep_stepsize.add_argument(
        '--beta-fractions',
        type=list_arg(positive_float_arg),
        help='Comma-separated fractions of the beta bound',
    )

    simulate = subparsers.add_parser(
        'simulate',
        parents=[scenario_parent, controller_parent, comm_parent],
        help='Run the online asynchronous controller over the scenario',
    )
    simulate.add_argument(
        '--strategy',
        choices=[s.value for s in sim.Strategy] + [STRATEGY_ALL],
        help='Control strategy, or "all" to compare every strategy',
    )
    simulate.add_argument(
        '--validate-lindistflow',
        action='store_true',
        help='Report max |v_ac - v_lin| for every timestep',
    )
    simulate.add_argument(
        '--record-buses',
        action='store_true',
        help='Add per-bus v, q and lambda columns to the trace',
    )

    args = parser.parse_args(args=argv)

    if args.subcommand == 'sweep-stepsize' and args.alpha is not None:
        parser.error('--alpha conflicts with --fractions')
    elif args.subcommand == 'sweep-stepsize' and args.beta is not None:
        parser.error('--beta conflicts with --beta-fractions')

    return args


def main(argv=None) -> int:
    args = parse_args(argv=argv)

    util.load_umask_unsafe()

    try:
        if args.subcommand == 'solve-static':
            return solve_static_subcommand(args)
        elif args.subcommand == 'sweep-gamma':
            return sweep_gamma_subcommand(args)
        elif args.subcommand == 'sweep-activation':
            return sweep_activation_subcommand(args)
        elif args.subcommand == 'sweep-stepsize':
            return sweep_stepsize_subcommand(args)
        elif args.subcommand == 'simulate':
            return simulate_subcommand(args)
        else:
            raise NotImplementedError()
    except NumericalError as e:
        print_warning(f'Numerical failure: {e}', file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except ValueError as e:
        # InputError is a ValueError
        print_warning(f'Invalid input: {e}', file=sys.stderr)
        return EXIT_INPUT_ERROR
