import itertools

import numpy as np
import pytest

from gridvolt import ppd
from gridvolt import sim
from gridvolt.formats.scenario import parse_scenario_text
from gridvolt.reference import reference_qp_solve
from gridvolt.sim import CommModel, DelayMode, Outage, Simulation, Strategy
from gridvolt.util import Range


TWO_BUS = '''
schema_version: 1
name: two_bus
feeder:
  buses:
    - id: 0
    - id: 1
  lines:
    - from: 0
      to: 1
      r_pu: 0.05
      x_pu: 0.1
plant: {plant}
w_source: model
timing:
  rounds_per_timestep: {rounds}
loads:
  p_load_kw: {load}
inverters:
  rating_kva: 50.0
'''

CHAIN4 = '''
schema_version: 1
name: chain4
feeder:
  buses:
    - id: 0
    - id: 1
    - id: 2
    - id: 3
  lines:
    - from: 0
      to: 1
      r_pu: 0.02
      x_pu: 0.05
    - from: 1
      to: 2
      r_pu: 0.02
      x_pu: 0.05
    - from: 2
      to: 3
      r_pu: 0.02
      x_pu: 0.05
comm:
  activation_prob: {prob}
  delay:
    prob: {delay}
    max_rounds: 3
    mode: {mode}
  noise_std: {noise}
  seed: 5
plant: ac
timing:
  rounds_per_timestep: 40
  timesteps: 2
loads:
  p_load_kw:
    - 150.0
    - 100.0
    - 120.0
  q_load_kvar: 30.0
  p_gen_kw:
    - 0.0
    - 20.0
    - 10.0
inverters:
  rating_kva: 60.0
'''


def _two_bus(plant='linear', rounds=30, load=200.0):
    return parse_scenario_text(TWO_BUS.format(plant=plant, rounds=rounds,
                                              load=load))


def _chain4(prob=1.0, delay=0.0, mode='drop', noise=0.0):
    return parse_scenario_text(CHAIN4.format(prob=prob, delay=delay,
                                             mode=mode, noise=noise))


@pytest.mark.parametrize('rating,p_gen,limit', [
    (3.5, 3.5, 0.0),
    (3.5, 0.0, 3.5),
    (5.0, 3.0, 4.0),
])
def test_var_limits(rating, p_gen, limit):
    q_lo, q_hi = sim.var_limits_update(rating, p_gen)

    assert q_hi == pytest.approx(limit, abs=1e-12)
    assert q_lo == pytest.approx(-limit, abs=1e-12)


def test_var_limits_per_unit():
    _, q_hi = sim.var_limits_update([5.0], [3.0], s_base_va=1e6)

    assert q_hi[0] == pytest.approx(0.004)


def test_var_limits_overloaded_inverter():
    with pytest.raises(ValueError, match='exceeds'):
        sim.var_limits_update(3.0, 3.5)


def test_activation_draw():
    rng = np.random.default_rng(0)

    assert np.all(sim.activation_draw(rng, 1.0, 10))
    assert not np.any(sim.activation_draw(rng, 0.0, 10))

    first = sim.activation_draw(np.random.default_rng(9), 0.5, 50)
    second = sim.activation_draw(np.random.default_rng(9), 0.5, 50)
    np.testing.assert_array_equal(first, second)

    with pytest.raises(ValueError):
        sim.activation_draw(rng, 1.5, 3)


def test_comm_model_validation():
    with pytest.raises(ValueError):
        CommModel(delay_prob=0.5, max_delay=0)
    with pytest.raises(ValueError):
        CommModel(noise_std=-1.0)
    with pytest.raises(ValueError):
        CommModel(outages=(Outage(Range(5, 2)),))


def test_outage_mask():
    comm = CommModel(outages=(Outage(Range(10, 20)),
                              Outage(Range(0, 5), frozenset({3}))))
    buses = (1, 2, 3)

    np.testing.assert_array_equal(comm.outage_mask(2, buses),
                                  [False, False, True])
    np.testing.assert_array_equal(comm.outage_mask(7, buses),
                                  [False, False, False])
    np.testing.assert_array_equal(comm.outage_mask(10, buses),
                                  [True, True, True])
    np.testing.assert_array_equal(comm.outage_mask(20, buses),
                                  [False, False, False])


def test_synchronous_run_matches_static_iterates():
    scenario = _two_bus()
    problem = sim.static_problem(scenario)
    config = scenario.config()

    simulation = Simulation(scenario)
    simulation.start_timestep(0)
    iterates = ppd.iterate_static(problem, config)
    state, v_meas = next(iterates)
    np.testing.assert_array_equal(simulation.agents.v_meas, v_meas)

    for state, v_meas in itertools.islice(iterates, 200):
        agents = simulation.step()
        np.testing.assert_array_equal(agents.v, state.v)
        np.testing.assert_array_equal(agents.q, state.q)
        np.testing.assert_array_equal(agents.lam, state.lam)
        np.testing.assert_array_equal(agents.v_meas, v_meas)


def test_total_outage_is_local_control():
    scenario = _two_bus().with_comm(outages=(Outage(Range(0, 10_000)),))
    simulation = Simulation(scenario, unlimited_box=True)
    simulation.start_timestep(0)

    w = simulation.conditions.w[0]
    previous = simulation.agents.q[0]
    alpha = scenario.steps.alpha
    gamma = scenario.controller.gamma

    for _ in range(200):
        agents = simulation.step()
        # q[k+1] = q[k](1 - alpha gamma / B) + alpha gamma (mu - w / B)
        expected = previous * (1 - alpha * gamma / 10) \
            + alpha * gamma * (1 - w / 10)
        assert agents.q[0] == pytest.approx(expected, abs=1e-12)
        previous = agents.q[0]

    assert agents.q[0] == pytest.approx(10 - w, abs=1e-10)
    assert agents.lam[0] == 0.0
    assert agents.v[0] == 1.0


def test_inactive_bus_freezes_consensus_state():
    scenario = _chain4().with_comm(
        activation_prob=np.array([1.0, 0.0, 1.0]))
    simulation = Simulation(scenario)
    simulation.start_timestep(0)
    before = simulation.agents.copy()

    for _ in range(5):
        agents = simulation.step()

    assert agents.v[1] == before.v[1]
    assert agents.w[1] == before.w[1]
    assert agents.lam[1] == before.lam[1]
    assert agents.q[1] != before.q[1]
    assert agents.lam[0] != before.lam[0]
    assert not agents.active[1]


def test_distributed_only_holds_q_when_inactive():
    scenario = _chain4().with_comm(
        activation_prob=np.array([1.0, 0.0, 1.0])).with_strategy(
        Strategy.DISTRIBUTED)
    simulation = Simulation(scenario)
    simulation.start_timestep(0)
    before = simulation.agents.copy()

    agents = simulation.step()

    assert agents.q[1] == before.q[1]
    assert agents.q[0] != before.q[0]


def test_no_control_with_zero_load():
    scenario = _two_bus(plant='ac', load=0.0).with_strategy(Strategy.NONE)
    result = sim.simulate(scenario)

    assert all(r.mismatch_norm == 0.0 for r in result.rounds)


def test_static_run_reaches_optimum():
    scenario = _two_bus(rounds=2000)
    v_star, _ = reference_qp_solve(sim.static_problem(scenario))

    result = sim.simulate(scenario)
    assert result.rounds[-1].mismatch_norm == pytest.approx(
        ppd.mismatch_norm(v_star, 1.0), abs=1e-5)


@pytest.mark.parametrize('mode', ['drop', 'queue'])
def test_simulation_is_deterministic(mode):
    scenario = _chain4(prob=0.6, delay=0.3, mode=mode, noise=1e-4)

    first = sim.simulate(scenario, record_buses=True)
    second = sim.simulate(scenario, record_buses=True)

    assert first.rounds == second.rounds
    assert first.timesteps == second.timesteps
    for kind in ('v', 'q', 'lambda'):
        np.testing.assert_array_equal(first.bus_traces[kind],
                                      second.bus_traces[kind])
    assert first.bus_traces['v'].shape == (80, 3)


def test_queued_messages_arrive_late():
    comm = CommModel(delay_prob=1.0, max_delay=2, delay_mode=DelayMode.QUEUE)
    mailbox = sim._Mailbox(comm)
    rng = np.random.default_rng(0)
    links = np.array([[False, True], [True, False]])
    cache = np.zeros((2, 2))
    stamp = np.full((2, 2), -1)

    mailbox.exchange('lam', rng, 0, links, (cache,), stamp,
                     (np.array([1.0, 2.0]),))
    # Every message was delayed, so nothing arrives in the sending round
    np.testing.assert_array_equal(cache, 0.0)

    for k in (1, 2):
        mailbox.exchange('lam', rng, k, np.zeros((2, 2), dtype=bool),
                         (cache,), stamp, (np.array([5.0, 6.0]),))

    assert cache[0, 1] == 2.0
    assert cache[1, 0] == 1.0
    assert stamp[0, 1] == 0


def test_kron_reduced_controller_sees_plant_voltages():
    scenario = parse_scenario_text(CHAIN4.format(
        prob=1.0, delay=0.0, mode='drop', noise=0.0).replace(
        'plant: ac', 'plant: linear\nder_buses:\n  - 1\n  - 3'))
    assert any('Kron' in w for w in scenario.warnings)

    simulation = Simulation(scenario)
    simulation.start_timestep(0)
    for _ in range(20):
        agents = simulation.step()

    problem = sim.static_problem(scenario, system=simulation.system)
    assert simulation.system.B.buses == (1, 3)
    np.testing.assert_allclose(agents.v_meas, problem.voltage(agents.q),
                               atol=1e-12)


def test_timestep_summaries():
    scenario = _chain4()
    result = sim.simulate(scenario, validate_lindistflow=True)

    assert len(result.rounds) == 80
    assert [s.timestep for s in result.timesteps] == [0, 1]
    assert [r.round for r in result.rounds] == list(range(1, 81))
    for summary in result.timesteps:
        assert summary.headroom_pu > 0
        assert 0 <= summary.lin_gap < 0.01


def test_iterations_to_tolerance():
    v_star = np.array([1.0, 1.0])
    trace = [np.array([0.9, 1.0]), np.array([0.99, 1.0]),
             np.array([1.0, 1.0 + 1e-7])]

    assert sim.iterations_to_tolerance(trace, v_star, 1e-6) == 2
    assert sim.iterations_to_tolerance(trace, v_star, 0.05) == 1
    assert sim.iterations_to_tolerance(trace[:2], v_star, 1e-6) is None
