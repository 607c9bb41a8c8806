'''
End-to-end gates on the shipped scenarios and on random instances. The
numeric thresholds come from tests.yaml. Several of these run for tens of
seconds; see README.md.
'''

import itertools

import numpy as np
import pytest

from gridvolt import experiments
from gridvolt import ppd
from gridvolt import sim
from gridvolt.feeder import build_bbus, build_feeder, random_radial_feeder
from gridvolt.ppd import HvcProblem
from gridvolt.reference import saddle_point
from gridvolt.sim import PlantKind, Simulation, Strategy


def _oracle_problem(rng, n_buses):
    B = build_bbus(build_feeder(random_radial_feeder(rng, n_buses)))
    w = B.matrix @ rng.uniform(0.95, 1.05, B.n) \
        - rng.uniform(-0.2, 0.2, B.n)
    gamma = rng.uniform(0.2, 1.0) / B.L_tilde

    # Flat voltages need q = B mu - w; cut that off on a few buses
    q_flat = B.matrix @ np.ones(B.n) - w
    half_width = np.max(np.abs(q_flat)) + 1.0
    q_lo = np.full(B.n, -half_width)
    q_hi = np.full(B.n, half_width)
    for j in rng.choice(B.n, size=min(B.n, int(rng.integers(1, 3))),
                        replace=False):
        if rng.random() < 0.5:
            q_hi[j] = q_flat[j] - rng.uniform(0.02, 0.2)
            q_lo[j] = q_hi[j] - 0.5
        else:
            q_lo[j] = q_flat[j] + rng.uniform(0.02, 0.2)
            q_hi[j] = q_lo[j] + 0.5

    return HvcProblem(B=B, w=w, mu=1.0, gamma=gamma, q_lo=q_lo, q_hi=q_hi)


def test_oracle_equivalence_and_lyapunov(test_config):
    gates = test_config.data['oracle']
    rng = np.random.default_rng(gates['seed'])
    saturated = 0

    for _ in range(gates['feeders']):
        problem = _oracle_problem(
            rng, int(rng.integers(2, gates['max_buses'] + 1)))
        steps = ppd.auto_step_sizes(problem.B, problem.gamma)
        assert not steps.warnings
        config = ppd.ControlConfig(alpha=steps.alpha, beta=steps.beta,
                                   gamma=problem.gamma,
                                   tol=gates['kkt_tol'] / 100,
                                   max_iters=500_000)

        solution = ppd.solve_static(problem, config)
        saddle = saddle_point(problem)

        assert solution.converged
        assert solution.residuals.max() <= gates['kkt_tol']
        assert np.max(np.abs(solution.state.q - saddle.q)) <= gates['q_tol']

        weight = ppd.certified_q_weight(problem.B, problem.gamma, steps.alpha,
                                        steps.beta)
        values = []
        weighted = []
        for state, _ in itertools.islice(ppd.iterate_static(problem, config),
                                         solution.state.k + 1):
            values.extend(ppd.lyapunov_values(
                [state], saddle, steps.alpha, steps.beta))
            weighted.extend(ppd.lyapunov_values(
                [state], saddle, steps.alpha, steps.beta, q_weight=weight))

        assert np.all(np.diff(values) <= gates['lyapunov_slack'])
        assert np.all(np.diff(weighted) <= gates['lyapunov_slack'])

        saturated += int(np.sum((saddle.q <= problem.q_lo)
                                | (saddle.q >= problem.q_hi)))

    assert saturated > 0


def test_stepsize_bounds_match_general_rule(test_config):
    gates = test_config.data['stepsize_identity']
    rng = np.random.default_rng(gates['seed'])

    for _ in range(gates['triples']):
        eta_tilde = 10 ** rng.uniform(-3, 1)
        L_tilde = eta_tilde * 10 ** rng.uniform(0, 4)
        gamma = 10 ** rng.uniform(-2, 1)

        alpha_max, beta_max = ppd.stepsize_bounds(eta_tilde, L_tilde, gamma)
        general = ppd.stepsize_bounds_general(
            gamma / L_tilde, gamma / eta_tilde, 1.0, L_tilde ** 2)

        assert alpha_max == pytest.approx(general[0], rel=gates['tol'])
        assert beta_max == pytest.approx(general[1], rel=gates['tol'])


def test_gradient_matches_finite_differences(test_config):
    gates = test_config.data['gradient']
    rng = np.random.default_rng(gates['seed'])
    h = 1e-5

    for _ in range(gates['instances']):
        B = build_bbus(build_feeder(random_radial_feeder(
            rng, int(rng.integers(2, 12)))))
        problem = HvcProblem(B=B, w=rng.uniform(-1.0, 3.0, B.n),
                             mu=rng.uniform(0.95, 1.05, B.n),
                             gamma=rng.uniform(0.01, 5.0), q_lo=-np.inf,
                             q_hi=np.inf)
        q = rng.uniform(-0.5, 0.5, B.n)

        grad = ppd.grad_g(q, problem)
        fd = np.empty(B.n)
        for j in range(B.n):
            e = np.zeros(B.n)
            e[j] = h
            fd[j] = (ppd.g_value(q + e, problem)
                     - ppd.g_value(q - e, problem)) / (2 * h)

        assert np.linalg.norm(fd - grad) \
            <= gates['rel_tol'] * np.linalg.norm(grad)


def test_gamma_tradeoff(test_config, load_fixture):
    gates = test_config.data['gamma_sweep']
    scenario = load_fixture('static21')

    problem = sim.static_problem(scenario)
    table = experiments.gamma_table(
        experiments.gamma_point(problem, g) for g in gates['gammas'])
    mismatch = table['mismatch_norm'].to_numpy()
    assert mismatch[0] > 0
    assert np.all(np.diff(mismatch) >= -1e-12)

    unlimited = sim.static_problem(scenario, unlimited_box=True)
    for gamma in gates['gammas']:
        row = experiments.gamma_point(unlimited, gamma)
        assert row['mismatch_norm'] <= gates['unlimited_tol']


def test_synchronous_reduction(test_config, load_fixture):
    scenario = load_fixture('static21')
    problem = sim.static_problem(scenario)

    simulation = Simulation(scenario)
    simulation.start_timestep(0)
    iterates = ppd.iterate_static(problem, scenario.config())
    next(iterates)

    for state, v_meas in itertools.islice(
            iterates, test_config.data['sync_reduction']['rounds']):
        agents = simulation.step()
        np.testing.assert_array_equal(agents.q, state.q)
        np.testing.assert_array_equal(agents.lam, state.lam)
        np.testing.assert_array_equal(agents.v, state.v)
        np.testing.assert_array_equal(agents.v_meas, v_meas)


def test_model_gap(test_config, load_fixture):
    gates = test_config.data['model_gap']
    scenario = load_fixture('static21')

    simulation = Simulation(scenario, plant_kind=PlantKind.AC)
    simulation.start_timestep(0)

    for k in range(51):
        if k % 10 == 0:
            plant = simulation.plant
            assert plant.lin_gap() <= gates['max_gap_pu']

            solution = plant.last
            inj = plant.state.injection
            load = -np.sum(inj.p + 1j * inj.q)
            assert abs(solution.s_root - (load + solution.losses)) \
                <= gates['balance_tol']
            assert solution.mismatch <= gates['balance_tol']
        simulation.step()


def test_activation_sweep(test_config, load_fixture):
    gates = test_config.data['activation']
    scenario = load_fixture('activation7')

    v_star = experiments.activation_target(scenario)
    sync = experiments.sync_rounds_to_tolerance(
        sim.static_problem(scenario), scenario.config(), v_star,
        gates['tol'], experiments.ACTIVATION_MAX_ROUNDS)
    assert sync is not None
    budget = gates['max_slowdown'] * sync

    medians = []
    for rate in gates['rates']:
        counts = [experiments.activation_point(scenario, v_star, rate, seed,
                                               gates['tol'], budget)
                  for seed in range(gates['seeds'])]
        assert None not in counts, f'rate {rate} missed the tolerance'
        medians.append(experiments.median_rounds(counts))

    assert all(a >= b for a, b in zip(medians, medians[1:]))
    assert medians[-1] == sync

    # Local control alone cannot reach an optimum with a nonzero dual
    assert experiments.activation_point(scenario, v_star, 0.0, 0,
                                        gates['tol'], budget) is None


def test_outage_fallback(load_fixture):
    scenario = load_fixture('daily21')

    mismatch = {}
    for strategy in Strategy:
        result = sim.simulate(scenario, strategy=strategy)
        mismatch[strategy] = experiments.outage_mismatch(scenario, result)

    assert None not in mismatch.values()
    assert mismatch[Strategy.HVC] <= mismatch[Strategy.DISTRIBUTED]
    assert mismatch[Strategy.DISTRIBUTED] <= mismatch[Strategy.NONE]


def test_oversized_alpha(test_config, load_fixture):
    gates = test_config.data['divergence']
    scenario = load_fixture('static21').with_controller(
        alpha_fraction=gates['alpha_multiple'], max_iters=gates['max_iters'])
    assert any('alpha' in w for w in scenario.warnings)

    solution = ppd.solve_static(sim.static_problem(scenario),
                                scenario.config())

    # The bound is only sufficient, so convergence is allowed too, but the
    # run has to stop for a recorded reason
    last = solution.trace[-1].k
    assert last <= gates['max_iters']
    assert not (solution.converged and solution.diverged)
    if not (solution.converged or solution.diverged):
        assert last == gates['max_iters']
        assert solution.residuals.max() >= scenario.controller.tol
