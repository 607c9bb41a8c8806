# Scenario documents: a strictyaml mapping that ties a feeder, its loading,
# the inverters, the controller numbers and the communication model
# together. See docs/formats.md for the full schema.

import dataclasses
import math
import os
import typing

import numpy as np
from strictyaml import Enum, Float, Int, Map, Optional, Seq, Str, \
    YAMLError, as_document, load

from .. import ppd
from .. import util
from ..feeder import FeederModel, build_feeder, load_feeder
from ..sim import CommModel, DelayMode, Outage, PlantKind, Strategy, \
    System, WSource
from ..util import InputError, Range
from . import profiles as profiles_mod


SCHEMA_VERSION = 1
AUTO = 'auto'

DEFAULT_ROUNDS_PER_TIMESTEP = 30
DEFAULT_TIMESTEP_SECONDS = 60.0

STEP = Float() | Enum([AUTO])
NUMBERS = Float() | Seq(Float())

LINE_SCHEMA = Map({
    'from': Int(),
    'to': Int(),
    Optional('r_ohm'): Float(),
    Optional('x_ohm'): Float(),
    Optional('r_pu'): Float(),
    Optional('x_pu'): Float(),
})

FEEDER_SCHEMA = Map({
    Optional('name'): Str(),
    Optional('bases'): Map({
        Optional('s_base_va'): Float(),
        Optional('v_base_v'): Float(),
    }),
    Optional('v0_pu'): Float(),
    'buses': Seq(Map({'id': Int()})),
    'lines': Seq(LINE_SCHEMA),
})

SYNTHETIC_SCHEMA = Map({
    Optional('homes_per_bus'): Int(),
    Optional('solar_peak_kw'): Float(),
    Optional('power_factor'): Float(),
    Optional('variability'): Float(),
    Optional('seed'): Int(),
})

SCHEMA = Map({
    'schema_version': Int(),
    Optional('name'): Str(),
    'feeder': FEEDER_SCHEMA | Str(),
    Optional('mu'): NUMBERS,
    Optional('der_buses'): Seq(Int()),
    Optional('controller'): Map({
        Optional('gamma'): Float(),
        Optional('alpha'): STEP,
        Optional('beta'): STEP,
        Optional('alpha_fraction'): Float(),
        Optional('beta_fraction'): Float(),
        Optional('theta'): Float(),
        Optional('tol'): Float(),
        Optional('max_iters'): Int(),
    }),
    Optional('comm'): Map({
        Optional('activation_prob'): NUMBERS,
        Optional('outages'): Seq(Map({
            'start': Int(),
            'end': Int(),
            Optional('buses'): Seq(Int()),
        })),
        Optional('delay'): Map({
            Optional('prob'): Float(),
            Optional('max_rounds'): Int(),
            Optional('mode'): Enum([m.value for m in DelayMode]),
        }),
        Optional('noise_std'): Float(),
        Optional('seed'): Int(),
    }),
    Optional('strategy'): Enum([s.value for s in Strategy]),
    Optional('plant'): Enum([p.value for p in PlantKind]),
    Optional('w_source'): Enum([w.value for w in WSource]),
    Optional('timing'): Map({
        Optional('rounds_per_timestep'): Int(),
        Optional('timesteps'): Int(),
        Optional('timestep_seconds'): Float(),
    }),
    Optional('profiles'): Map({'synthetic': SYNTHETIC_SCHEMA}) | Str(),
    Optional('loads'): Map({
        Optional('p_load_kw'): NUMBERS,
        Optional('q_load_kvar'): NUMBERS,
        Optional('p_gen_kw'): NUMBERS,
    }),
    Optional('inverters'): Map({
        'rating_kva': NUMBERS,
        Optional('spread'): Float(),
        Optional('seed'): Int(),
    }),
})


@dataclasses.dataclass(frozen=True)
class ControllerSpec:
    gamma: float = ppd.DEFAULT_GAMMA
    alpha: typing.Union[float, str] = AUTO
    beta: typing.Union[float, str] = AUTO
    alpha_fraction: float = ppd.DEFAULT_STEP_FRACTION
    beta_fraction: float = ppd.DEFAULT_STEP_FRACTION
    theta: float = 0.0
    tol: float = ppd.DEFAULT_TOL
    max_iters: int = ppd.DEFAULT_MAX_ITERS

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise InputError(f'gamma must be nonnegative: {self.gamma}')
        for name in ('alpha', 'beta'):
            value = getattr(self, name)
            if value != AUTO and not (value > 0 and math.isfinite(value)):
                raise InputError(f'{name} must be positive or {AUTO!r}: '
                                 f'{value}')
        for name in ('alpha_fraction', 'beta_fraction'):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise InputError(f'{name} must be positive: {value}')
        if not (self.theta >= 0 and math.isfinite(self.theta)):
            raise InputError(f'theta must be nonnegative: {self.theta}')
        elif not (self.tol > 0 and math.isfinite(self.tol)):
            raise InputError(f'tol must be positive: {self.tol}')
        elif self.max_iters < 0:
            raise InputError(f'max_iters must be nonnegative: '
                             f'{self.max_iters}')

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class TimingSpec:
    rounds_per_timestep: int = DEFAULT_ROUNDS_PER_TIMESTEP
    timesteps: int = 1
    timestep_seconds: float = DEFAULT_TIMESTEP_SECONDS

    def __post_init__(self):
        if self.rounds_per_timestep < 1:
            raise InputError(f'rounds_per_timestep must be positive: '
                             f'{self.rounds_per_timestep}')
        elif self.timesteps < 1:
            raise InputError(f'timesteps must be positive: {self.timesteps}')
        elif not (self.timestep_seconds > 0
                  and math.isfinite(self.timestep_seconds)):
            raise InputError(f'timestep_seconds must be positive: '
                             f'{self.timestep_seconds}')


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    homes_per_bus: int = 25
    solar_peak_kw: float = 3.5
    power_factor: float = 0.95
    variability: float = 0.05
    seed: int = 0


@dataclasses.dataclass(frozen=True, eq=False)
class LoadSpec:
    '''
    Constant loading, used when a scenario has no profiles.
    '''

    p_load_kw: typing.Union[float, tuple[float, ...]] = 0.0
    q_load_kvar: typing.Union[float, tuple[float, ...]] = 0.0
    p_gen_kw: typing.Union[float, tuple[float, ...]] = 0.0


@dataclasses.dataclass(frozen=True, eq=False)
class InverterSpec:
    rating_kva: typing.Union[float, tuple[float, ...]]
    # Relative half-width of the uniform rating variation
    spread: float = 0.0
    seed: int = 0


@dataclasses.dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    source: str
    base_dir: str
    # File reference as written, or the inline description record
    feeder_ref: typing.Union[str, dict]
    feeder: FeederModel
    mu: typing.Union[float, tuple[float, ...]]
    der_buses: typing.Optional[tuple[int, ...]]
    controller: ControllerSpec
    comm: CommModel
    strategy: Strategy
    plant: PlantKind
    w_source: WSource
    timing: TimingSpec
    profiles_ref: typing.Union[str, SyntheticSpec, None]
    profiles: typing.Optional[profiles_mod.ProfileSeries]
    loads: typing.Optional[LoadSpec]
    inverters: typing.Optional[InverterSpec]
    # kVA per non-root bus
    ratings: np.ndarray
    steps: ppd.StepSizes
    warnings: tuple[str, ...] = ()

    @property
    def seed(self) -> int:
        return self.comm.seed

    def system(self) -> System:
        return System.build(self.feeder, self.der_buses, self.mu)

    def loading(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        '''
        (p_load_kw, q_load_kvar, p_gen_kw) for every non-root bus at
        timestep <t>.
        '''

        if self.profiles is not None:
            return self.profiles.at(t)

        n = self.feeder.n
        return tuple(np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
                     for v in (self.loads.p_load_kw, self.loads.q_load_kvar,
                               self.loads.p_gen_kw))

    def config(self) -> ppd.ControlConfig:
        c = self.controller
        return ppd.ControlConfig(alpha=self.steps.alpha, beta=self.steps.beta,
                                 gamma=c.gamma, theta=c.theta, tol=c.tol,
                                 max_iters=c.max_iters)

    def with_controller(self, **changes) -> 'Scenario':
        controller = dataclasses.replace(self.controller, **changes)
        steps, warnings = _resolve_steps(self.system(), controller)
        return dataclasses.replace(self, controller=controller, steps=steps,
                                   warnings=tuple(warnings))

    def with_comm(self, **changes) -> 'Scenario':
        try:
            comm = dataclasses.replace(self.comm, **changes)
        except ValueError as e:
            raise InputError(str(e)) from e
        return dataclasses.replace(self, comm=comm)

    def with_strategy(self, strategy: Strategy) -> 'Scenario':
        return dataclasses.replace(self, strategy=strategy)

    def to_dict(self) -> dict:
        '''
        Canonical document for this scenario. Parsing its YAML form yields an
        equivalent scenario.
        '''

        data = {
            'schema_version': SCHEMA_VERSION,
            'name': self.name,
            'feeder': self.feeder_ref,
            'mu': _plain(self.mu),
        }
        if self.der_buses:
            data['der_buses'] = list(self.der_buses)

        data['controller'] = self.controller.to_dict()
        data['comm'] = _comm_to_dict(self.comm)
        data['strategy'] = self.strategy.value
        data['plant'] = self.plant.value
        data['w_source'] = self.w_source.value
        data['timing'] = dataclasses.asdict(self.timing)

        if isinstance(self.profiles_ref, SyntheticSpec):
            data['profiles'] = {
                'synthetic': dataclasses.asdict(self.profiles_ref),
            }
        elif self.profiles_ref is not None:
            data['profiles'] = self.profiles_ref
        else:
            data['loads'] = {
                'p_load_kw': _plain(self.loads.p_load_kw),
                'q_load_kvar': _plain(self.loads.q_load_kvar),
                'p_gen_kw': _plain(self.loads.p_gen_kw),
            }

        if self.inverters is not None:
            data['inverters'] = {
                'rating_kva': _plain(self.inverters.rating_kva),
                'spread': self.inverters.spread,
                'seed': self.inverters.seed,
            }

        return data


def _plain(value):
    if isinstance(value, (tuple, list, np.ndarray)):
        return [float(v) for v in value]
    return float(value)


def _comm_to_dict(comm: CommModel) -> dict:
    data = {'activation_prob': _plain(comm.activation_prob)}

    outages = []
    for outage in comm.outages:
        record = {'start': outage.rounds.start, 'end': outage.rounds.end}
        if outage.buses is not None:
            record['buses'] = sorted(outage.buses)
        outages.append(record)
    if outages:
        data['outages'] = outages

    data['delay'] = {
        'prob': float(comm.delay_prob),
        'max_rounds': comm.max_delay,
        'mode': comm.delay_mode.value,
    }
    data['noise_std'] = float(comm.noise_std)
    data['seed'] = comm.seed

    return data


def _numbers(name: str, value, n: int, label: str) -> typing.Union[
        float, tuple[float, ...]]:
    '''
    Validate a scalar-or-per-bus field.
    '''

    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise InputError(f'{label}: {name} has {len(value)} entries for '
                             f'{n} buses')
        value = tuple(float(v) for v in value)
        values = value
    else:
        value = float(value)
        values = (value,)

    if not all(math.isfinite(v) for v in values):
        raise InputError(f'{label}: {name} must be finite: {value}')

    return value


def _resolve_path(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _resolve_steps(system: System, controller: ControllerSpec
                   ) -> tuple[ppd.StepSizes, list[str]]:
    '''
    Resolve "auto" step sizes against the controller-side B.
    '''

    warnings = []
    gamma = controller.gamma
    if gamma == 0:
        # The bounds vanish at gamma = 0; borrow those for gamma = 1
        gamma = 1.0
        warnings.append('gamma=0: step sizes are not covered by the '
                        'convergence certificate')

    steps = ppd.auto_step_sizes(
        system.B, gamma,
        alpha_fraction=controller.alpha_fraction,
        beta_fraction=controller.beta_fraction,
        alpha=None if controller.alpha == AUTO else controller.alpha,
        beta=None if controller.beta == AUTO else controller.beta,
    )

    if controller.gamma > 0:
        warnings.extend(steps.warnings)
    if system.reduced:
        warnings.append(f'Controller uses a Kron-reduced network over buses '
                        f'{list(system.B.buses)}')

    return steps, warnings


def _build_comm(raw: dict, n_buses: int, n_controlled: int,
                label: str) -> CommModel:
    outages = []
    for record in raw.get('outages', []):
        buses = record.get('buses')
        if buses is not None:
            bad = [b for b in buses if not 1 <= b < n_buses]
            if bad:
                raise InputError(f'{label}: outage references unknown buses '
                                 f'{bad}')
            buses = frozenset(buses)
        outages.append(Outage(Range(record['start'], record['end']), buses))

    # Per-bus values follow the controlled buses in ascending id order
    prob = _numbers('activation_prob', raw.get('activation_prob', 1.0),
                    n_controlled, label)
    if isinstance(prob, tuple):
        prob = np.array(prob, dtype=float)
        prob.setflags(write=False)

    delay = raw.get('delay', {})

    try:
        return CommModel(
            activation_prob=prob,
            outages=tuple(outages),
            delay_prob=delay.get('prob', 0.0),
            max_delay=delay.get('max_rounds', 0),
            delay_mode=DelayMode(delay.get('mode', DelayMode.DROP.value)),
            noise_std=raw.get('noise_std', 0.0),
            seed=raw.get('seed', 0),
        )
    except ValueError as e:
        raise InputError(f'{label}: comm: {e}') from e


def _build_ratings(inverters: typing.Optional[InverterSpec], n: int,
                   label: str) -> np.ndarray:
    if inverters is None:
        return np.zeros(n)

    if not 0 <= inverters.spread < 1:
        raise InputError(f'{label}: rating spread must lie in [0, 1): '
                         f'{inverters.spread}')

    base = np.broadcast_to(np.asarray(inverters.rating_kva, dtype=float),
                           (n,))
    rng = np.random.default_rng(inverters.seed)
    ratings = base * (1 + inverters.spread * rng.uniform(-1.0, 1.0, n))

    if np.any(ratings < 0):
        raise InputError(f'{label}: inverter ratings must be nonnegative')

    return ratings


def scenario_from_data(raw: dict, base_dir: str = '.',
                       label: str = '<scenario>') -> Scenario:
    '''
    Build a scenario from a schema-validated document.
    '''

    version = raw['schema_version']
    if version != SCHEMA_VERSION:
        raise InputError(f'{label}: unsupported schema_version {version}; '
                         f'expected {SCHEMA_VERSION}')

    feeder_ref = raw['feeder']
    if isinstance(feeder_ref, str):
        feeder = load_feeder(_resolve_path(base_dir, feeder_ref))
    else:
        feeder_ref = _plain_record(feeder_ref)
        try:
            feeder = build_feeder(feeder_ref)
        except InputError as e:
            raise InputError(f'{label}: inline feeder: {e}') from e

    n = feeder.n

    der_buses = raw.get('der_buses')
    if der_buses is not None:
        der_buses = tuple(der_buses)
        if not der_buses:
            raise InputError(f'{label}: der_buses is empty')
        elif len(set(der_buses)) != len(der_buses):
            raise InputError(f'{label}: der_buses has duplicates')
        elif any(not 1 <= b <= n for b in der_buses):
            raise InputError(f'{label}: der_buses references unknown buses: '
                             f'{list(der_buses)}')
        der_buses = tuple(sorted(der_buses))

    n_controlled = len(der_buses) if der_buses else n
    mu = _numbers('mu', raw.get('mu', 1.0), n_controlled, label)

    controller = ControllerSpec(**raw.get('controller', {}))
    comm = _build_comm(raw.get('comm', {}), feeder.n_buses, n_controlled,
                       label)

    profiles_ref = raw.get('profiles')
    loads = None
    series = None

    timing_raw = dict(raw.get('timing', {}))

    if profiles_ref is not None and 'loads' in raw:
        raise InputError(f'{label}: give either profiles or loads, not both')
    elif isinstance(profiles_ref, str):
        series = profiles_mod.load_profiles(
            _resolve_path(base_dir, profiles_ref),
            buses=feeder.bus_ids)
        timing_raw.setdefault('timesteps', series.timesteps)
        if series.step_seconds is not None:
            timing_raw.setdefault('timestep_seconds', series.step_seconds)
    elif profiles_ref is not None:
        profiles_ref = SyntheticSpec(**profiles_ref['synthetic'])
        timing_raw.setdefault(
            'timesteps',
            int(round(profiles_mod.SECONDS_PER_DAY
                      / timing_raw.get('timestep_seconds',
                                       DEFAULT_TIMESTEP_SECONDS))))
    else:
        loads_raw = raw.get('loads', {})
        loads = LoadSpec(**{
            key: _numbers(key, loads_raw.get(key, 0.0), n, label)
            for key in ('p_load_kw', 'q_load_kvar', 'p_gen_kw')
        })

    timing = TimingSpec(**timing_raw)

    if isinstance(profiles_ref, SyntheticSpec):
        series = profiles_mod.synthetic_daily_profiles(
            feeder.bus_ids,
            homes_per_bus=profiles_ref.homes_per_bus,
            step_seconds=timing.timestep_seconds,
            timesteps=timing.timesteps,
            solar_peak_kw=profiles_ref.solar_peak_kw,
            power_factor=profiles_ref.power_factor,
            variability=profiles_ref.variability,
            seed=profiles_ref.seed,
        )

    if series is not None:
        if timing.timesteps > series.timesteps:
            raise InputError(f'{label}: {timing.timesteps} timesteps '
                             f'requested but profiles cover '
                             f'{series.timesteps}')
        step = series.step_seconds
        if step is not None and timing.timesteps > 1 \
                and not math.isclose(step, timing.timestep_seconds):
            raise InputError(f'{label}: profile step {step:g}s differs from '
                             f'timestep_seconds {timing.timestep_seconds:g}')
    elif np.any(np.asarray(loads.p_gen_kw) < 0):
        raise InputError(f'{label}: p_gen_kw must be nonnegative')

    inverters = None
    if 'inverters' in raw:
        record = raw['inverters']
        inverters = InverterSpec(
            rating_kva=_numbers('rating_kva', record['rating_kva'], n, label),
            spread=float(record.get('spread', 0.0)),
            seed=record.get('seed', 0),
        )
    ratings = _build_ratings(inverters, n, label)

    try:
        system = System.build(feeder, der_buses, mu)
        steps, warnings = _resolve_steps(system, controller)
    except ValueError as e:
        raise InputError(f'{label}: {e}') from e

    return Scenario(
        name=raw.get('name', os.path.splitext(os.path.basename(label))[0]),
        source=label,
        base_dir=base_dir,
        feeder_ref=feeder_ref,
        feeder=feeder,
        mu=mu,
        der_buses=der_buses,
        controller=controller,
        comm=comm,
        strategy=Strategy(raw.get('strategy', Strategy.HVC.value)),
        plant=PlantKind(raw.get('plant', PlantKind.AC.value)),
        w_source=WSource(raw.get('w_source', WSource.FEEDBACK.value)),
        timing=timing,
        profiles_ref=profiles_ref,
        profiles=series,
        loads=loads,
        inverters=inverters,
        ratings=ratings,
        steps=steps,
        warnings=tuple(warnings),
    )


def _plain_record(value):
    if isinstance(value, dict):
        return {k: _plain_record(v) for k, v in value.items()}
    elif isinstance(value, list):
        return [_plain_record(v) for v in value]
    return value


def parse_scenario_text(text: str, base_dir: str = '.',
                        label: str = '<scenario>') -> Scenario:
    try:
        document = load(text, SCHEMA, label=label)
    except YAMLError as e:
        raise InputError(f'{label}: {e}') from e

    return scenario_from_data(_plain_record(document.data), base_dir, label)


def parse_scenario(path: str) -> Scenario:
    try:
        with open(path, 'r') as f:
            text = f.read()
    except FileNotFoundError:
        raise InputError(f'Scenario file not found: {path}')

    return parse_scenario_text(text, os.path.dirname(os.path.abspath(path)),
                               path)


def dump_scenario(scenario: Scenario) -> str:
    return as_document(scenario.to_dict(), SCHEMA).as_yaml()


def write_scenario(scenario: Scenario, path: str):
    with util.open_output_file(path, 'w') as f:
        f.write(dump_scenario(scenario))
