import dataclasses
import itertools

import numpy as np
import pytest

from gridvolt import ppd
from gridvolt.feeder import build_bbus, build_feeder
from gridvolt.ppd import ControlConfig, HvcProblem, PpdState
from gridvolt.util import NumericalError


def _two_bus_B():
    return build_bbus(build_feeder({
        'buses': [{'id': 0}, {'id': 1}],
        'lines': [{'from': 0, 'to': 1, 'r_pu': 0.0, 'x_pu': 0.1}],
    }))


def _problem(w=9.9, box=0.05, gamma=0.5):
    return HvcProblem(B=_two_bus_B(), w=w, mu=1.0, gamma=gamma, q_lo=-box,
                      q_hi=box)


def _half_steps(problem, **kwargs):
    steps = ppd.auto_step_sizes(problem.B, problem.gamma)
    return ControlConfig(alpha=steps.alpha, beta=steps.beta,
                         gamma=problem.gamma, **kwargs)


@pytest.mark.parametrize('args,expected', [
    ((1.0, 1.0, 1.0), (1.0, 2 / 3)),
    ((10.0, 10.0, 0.5), (20.0, 2 / 140)),
])
def test_stepsize_bounds(args, expected):
    alpha_max, beta_max = ppd.stepsize_bounds(*args)

    assert alpha_max == pytest.approx(expected[0], rel=1e-12)
    assert beta_max == pytest.approx(expected[1], rel=1e-12)


def test_stepsize_bounds_three_bus_spectrum():
    alpha_max, _ = ppd.stepsize_bounds(3.8197, 26.1803, 0.5)

    assert alpha_max == pytest.approx(13.33, abs=0.01)


@pytest.mark.parametrize('args', [
    (0.0, 1.0, 1.0),
    (1.0, -1.0, 1.0),
    (1.0, 1.0, 0.0),
])
def test_stepsize_bounds_need_positive_inputs(args):
    with pytest.raises(ValueError):
        ppd.stepsize_bounds(*args)


def test_stepsize_bounds_general():
    assert ppd.stepsize_bounds_general(1, 1, 1, 1) == \
        pytest.approx((1.0, 2 / 3), rel=1e-12)

    alpha_max, beta_max = ppd.stepsize_bounds_general(0.05, 0.1, 1, 100)
    assert alpha_max == pytest.approx(2 / 0.15, rel=1e-12)
    assert beta_max == pytest.approx(0.01 / 0.65, rel=1e-12)


def test_step_warnings():
    B = _two_bus_B()

    assert not ppd.auto_step_sizes(B, 0.5).warnings

    steps = ppd.auto_step_sizes(B, 0.5, alpha=1e3)
    assert len(steps.warnings) == 1
    assert 'alpha' in steps.warnings[0]


@pytest.mark.parametrize('w,gamma,expected', [
    (10.0, 0.5, 0.0),
    (9.9, 0.5, -0.005),
    (9.9, 0.0, 0.0),
])
def test_grad_g(w, gamma, expected):
    problem = _problem(w=w, gamma=gamma)

    assert ppd.grad_g(np.zeros(1), problem)[0] == \
        pytest.approx(expected, abs=1e-15)


def test_project_box():
    np.testing.assert_array_equal(ppd.project_box([0.01], -0.05, 0.05),
                                  [0.01])
    np.testing.assert_array_equal(ppd.project_box([0.08], -0.05, 0.05),
                                  [0.05])

    x = np.array([-1.0, 0.0, 2.0])
    once = ppd.project_box(x, [-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(
        ppd.project_box(once, [-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]), once)

    with pytest.raises(ValueError):
        ppd.project_box([0.0], 1.0, -1.0)


def test_project_box_is_nonexpansive():
    rng = np.random.default_rng(11)
    lo = rng.uniform(-1.0, 0.0, 6)
    hi = lo + rng.uniform(0.0, 2.0, 6)

    for _ in range(200):
        x = rng.normal(scale=3.0, size=6)
        y = rng.normal(scale=3.0, size=6)
        distance = np.linalg.norm(ppd.project_box(x, lo, hi)
                                  - ppd.project_box(y, lo, hi))
        assert distance <= np.linalg.norm(x - y) + 1e-15


def test_flat_fixed_point():
    problem = _problem(w=10.0)
    config = ControlConfig(alpha=0.1, beta=0.01, gamma=0.5)
    state = PpdState(v=np.ones(1), q=np.zeros(1), lam=np.zeros(1))

    new = ppd.ppd_step(state, problem, config, np.ones(1))
    np.testing.assert_array_equal(new.v, [1.0])
    np.testing.assert_array_equal(new.q, [0.0])
    np.testing.assert_array_equal(new.lam, [0.0])
    assert new.k == 1


def test_hand_iteration():
    problem = _problem(w=9.9)
    config = ControlConfig(alpha=0.1, beta=0.01, gamma=0.5)
    state = PpdState(v=np.ones(1), q=np.zeros(1), lam=np.zeros(1))

    v_meas = problem.voltage(state.q)
    assert v_meas[0] == pytest.approx(0.99, abs=1e-15)

    new = ppd.ppd_step(state, problem, config, v_meas)
    assert new.v[0] == pytest.approx(1.0, abs=1e-15)
    assert new.q[0] == pytest.approx(0.0005, abs=1e-15)
    assert new.lam[0] == pytest.approx(0.000995, abs=1e-15)


def test_zero_theta_is_plain_update():
    problem = _problem(w=9.9)
    rng = np.random.default_rng(2)
    state = PpdState(v=rng.uniform(0.9, 1.1, 1), q=np.array([0.01]),
                     lam=rng.normal(size=1))
    v_meas = problem.voltage(state.q)

    new = ppd.ppd_step(state, problem,
                       ControlConfig(alpha=0.1, beta=0.01, gamma=0.5,
                                     theta=0.0), v_meas)

    np.testing.assert_array_equal(new.v, problem.mu - 10.0 * state.lam)


def test_proximal_update_shrinks_v_move():
    problem = _problem(w=9.9)
    state = PpdState(v=np.array([0.9]), q=np.zeros(1), lam=np.array([0.01]))
    v_meas = problem.voltage(state.q)

    plain = ppd.ppd_step(state, problem,
                         ControlConfig(alpha=0.1, beta=0.01, gamma=0.5),
                         v_meas)
    prox = ppd.ppd_step(state, problem,
                        ControlConfig(alpha=0.1, beta=0.01, gamma=0.5,
                                      theta=1.0), v_meas)

    assert abs(prox.v[0] - 0.9) < abs(plain.v[0] - 0.9)


def test_nonfinite_iterate():
    problem = _problem(w=9.9)
    config = ControlConfig(alpha=0.1, beta=0.01, gamma=0.5)
    state = PpdState(v=np.ones(1), q=np.zeros(1), lam=np.array([np.inf]))

    with pytest.raises(NumericalError):
        ppd.ppd_step(state, problem, config, np.ones(1))


def test_kkt_at_capped_optimum():
    problem = _problem(w=9.9)
    state = PpdState(v=np.array([0.995]), q=np.array([0.05]),
                     lam=np.array([0.0005]))

    residuals = ppd.kkt_residuals(state, problem)
    assert residuals.max() == pytest.approx(0.0, abs=1e-14)


def test_kkt_at_flat_fixed_point():
    problem = _problem(w=10.0)
    state = PpdState(v=np.ones(1), q=np.zeros(1), lam=np.zeros(1))

    residuals = ppd.kkt_residuals(state, problem)
    assert residuals.max() == pytest.approx(0.0, abs=1e-14)


def test_kkt_off_optimum():
    problem = _problem(w=9.9, box=10.0)
    state = PpdState(v=np.ones(1), q=np.array([0.11]), lam=np.zeros(1))

    assert ppd.kkt_residuals(state, problem).r_q > 0


@pytest.mark.parametrize('box,q_star,v_star', [
    (10.0, 0.1, 1.0),
    (0.05, 0.05, 0.995),
])
def test_solve_static_two_bus(box, q_star, v_star):
    problem = _problem(w=9.9, box=box)
    solution = ppd.solve_static(problem, _half_steps(problem))

    assert solution.converged
    assert not solution.diverged
    assert solution.residuals.max() < 1e-8
    assert solution.state.q[0] == pytest.approx(q_star, abs=1e-7)
    assert problem.voltage(solution.state.q)[0] == \
        pytest.approx(v_star, abs=1e-7)


@pytest.mark.parametrize('box', [10.0, 0.05])
def test_kkt_point_is_fixed(box):
    problem = _problem(w=9.9, box=box)
    config = _half_steps(problem, tol=1e-11)
    solution = ppd.solve_static(problem, config)
    assert solution.converged

    state = solution.state
    assert ppd.kkt_residuals(state, problem).max() < 1e-10

    stepped = ppd.ppd_step(state, problem, config, problem.voltage(state.q))
    np.testing.assert_allclose(stepped.v, state.v, rtol=0, atol=1e-9)
    np.testing.assert_allclose(stepped.q, state.q, rtol=0, atol=1e-9)
    np.testing.assert_allclose(stepped.lam, state.lam, rtol=0, atol=1e-9)


def test_solve_static_gamma_zero_unlimited():
    problem = _problem(w=9.9, box=10.0, gamma=0.0)
    steps = ppd.auto_step_sizes(problem.B, 1.0)
    config = ControlConfig(alpha=steps.alpha, beta=steps.beta, gamma=0.0)

    solution = ppd.solve_static(problem, config)
    assert solution.converged
    assert problem.voltage(solution.state.q)[0] == pytest.approx(1.0,
                                                                 abs=1e-7)


def test_solve_static_budget():
    problem = _problem(w=9.9)
    config = dataclasses.replace(_half_steps(problem), max_iters=3)

    solution = ppd.solve_static(problem, config)
    assert not solution.converged
    assert not solution.diverged
    assert [r.k for r in solution.trace] == [0, 1, 2, 3]


def test_solve_static_divergence_flag():
    problem = _problem(w=9.9, box=10.0)
    steps = ppd.auto_step_sizes(problem.B, 0.5)
    config = ControlConfig(alpha=50 * steps.alpha_max,
                           beta=50 * steps.beta_max, gamma=0.5,
                           max_iters=10_000)

    solution = ppd.solve_static(problem, config)
    assert solution.diverged
    assert not solution.converged


def test_iterate_static_matches_solve_static():
    problem = _problem(w=9.9)
    config = _half_steps(problem)
    solution = ppd.solve_static(problem, config)

    states = [s for s, _ in itertools.islice(
        ppd.iterate_static(problem, config), solution.state.k + 1)]
    np.testing.assert_array_equal(states[-1].q, solution.state.q)
    np.testing.assert_array_equal(states[-1].lam, solution.state.lam)
    assert states[0].k == 0


def test_certified_weight_in_unit_interval():
    B = _two_bus_B()
    steps = ppd.auto_step_sizes(B, 0.5)

    weight = ppd.certified_q_weight(B, 0.5, steps.alpha, steps.beta)
    assert 0 < weight < 1
