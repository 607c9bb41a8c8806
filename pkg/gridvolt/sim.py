'''
Online asynchronous hybrid voltage control.

Every controlled bus runs an agent holding (v, q, lambda, w) plus cached
copies of its neighbours' last broadcasts. The simulator executes the agents
as vectorized arrays in a deterministic round loop: row j of every array is
agent j.
'''

import dataclasses
import enum
import math
import typing

import numpy as np

from . import flow
from . import ppd
from .feeder import BbusMatrix, FeederModel, build_bbus, kron_operating_vector
from .feeder import kron_reduce
from .util import InputError, NumericalError, Range

if typing.TYPE_CHECKING:
    from .formats.scenario import Scenario


UNLIMITED_BOX_PU = 10.0


class Strategy(enum.Enum):
    HVC = 'hvc'
    DISTRIBUTED = 'distributed-only'
    NONE = 'no-control'


class WSource(enum.Enum):
    # Operating condition rebuilt every round from neighbour measurements
    FEEDBACK = 'feedback'
    # Static operating condition known to each bus
    MODEL = 'model'


class DelayMode(enum.Enum):
    DROP = 'drop'
    QUEUE = 'queue'


class PlantKind(enum.Enum):
    AC = 'ac'
    LINEAR = 'linear'


@dataclasses.dataclass(frozen=True)
class Outage:
    rounds: Range
    # None means every bus
    buses: typing.Optional[frozenset[int]] = None


@dataclasses.dataclass(frozen=True, eq=False)
class CommModel:
    activation_prob: typing.Union[float, np.ndarray] = 1.0
    outages: tuple[Outage, ...] = ()
    delay_prob: float = 0.0
    max_delay: int = 0
    delay_mode: DelayMode = DelayMode.DROP
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        _check_probability('activation_prob', self.activation_prob)
        _check_probability('delay_prob', self.delay_prob)

        if self.max_delay < 0:
            raise ValueError(f'max_delay must be nonnegative: '
                             f'{self.max_delay}')
        elif self.delay_prob > 0 and self.max_delay < 1:
            raise ValueError('Delayed messages need max_delay >= 1')
        elif not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise ValueError(f'noise_std must be nonnegative: '
                             f'{self.noise_std}')

        for outage in self.outages:
            if outage.rounds.start < 0 \
                    or outage.rounds.end < outage.rounds.start:
                raise ValueError(f'Outage window is not well-ordered: '
                                 f'{outage.rounds!r}')

    def outage_mask(self, k: int, buses: typing.Sequence[int]) -> np.ndarray:
        '''
        Buses whose communication is cut at round <k>.
        '''

        mask = np.zeros(len(buses), dtype=bool)
        for outage in self.outages:
            if k in outage.rounds:
                if outage.buses is None:
                    mask[:] = True
                else:
                    mask |= np.fromiter((b in outage.buses for b in buses),
                                        dtype=bool, count=len(buses))
        return mask


def _check_probability(name, value):
    value = np.asarray(value, dtype=float)
    if np.any(np.isnan(value)) or np.any(value < 0) or np.any(value > 1):
        raise ValueError(f'{name} must lie in [0, 1]: {value}')


@dataclasses.dataclass(eq=False)
class PlantState:
    injection: flow.Injection
    measured: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray


@dataclasses.dataclass(eq=False)
class AgentState:
    v: np.ndarray
    q: np.ndarray
    lam: np.ndarray
    w: np.ndarray
    # Own latest measurement
    v_meas: np.ndarray
    # cache_*[j, i] is bus j's last received copy of bus i's value
    cache_lam: np.ndarray
    cache_v: np.ndarray
    cache_vt: np.ndarray
    stamp_lam: np.ndarray
    stamp_v: np.ndarray
    active: np.ndarray

    @property
    def n(self) -> int:
        return len(self.v)

    def copy(self) -> 'AgentState':
        return AgentState(**{f.name: getattr(self, f.name).copy()
                             for f in dataclasses.fields(self)})

    @staticmethod
    def initial(mu: np.ndarray, q0: np.ndarray, v_meas: np.ndarray,
                w0: np.ndarray) -> 'AgentState':
        n = len(mu)
        return AgentState(
            v=mu.copy(),
            q=q0.copy(),
            lam=np.zeros(n),
            w=w0.copy(),
            v_meas=v_meas.copy(),
            cache_lam=np.zeros((n, n)),
            cache_v=np.tile(mu, (n, 1)),
            cache_vt=np.tile(v_meas, (n, 1)),
            stamp_lam=np.full((n, n), -1),
            stamp_v=np.full((n, n), -1),
            active=np.ones(n, dtype=bool),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Controller:
    B: BbusMatrix
    mu: np.ndarray
    alpha: float
    beta: float
    gamma: float
    theta: float = 0.0
    strategy: Strategy = Strategy.HVC
    w_source: WSource = WSource.FEEDBACK
    w_model: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        if self.w_source == WSource.MODEL and self.w_model is None:
            raise ValueError('Model-based w needs the static operating '
                             'condition')


@dataclasses.dataclass(frozen=True)
class RoundRecord:
    round: int
    time_s: float
    timestep: int
    mismatch_norm: float


@dataclasses.dataclass(frozen=True)
class TimestepSummary:
    timestep: int
    time_s: float
    mean_mismatch: float
    final_mismatch: float
    headroom_pu: float
    lin_gap: typing.Optional[float] = None


@dataclasses.dataclass(eq=False)
class SimulationResult:
    rounds: list[RoundRecord]
    timesteps: list[TimestepSummary]
    final: AgentState
    buses: tuple[int, ...]
    strategy: Strategy
    seed: int
    config: dict
    # Optional per-round, per-bus histories keyed by 'v', 'q', 'lambda'
    bus_traces: dict[str, np.ndarray] = dataclasses.field(
        default_factory=dict)


def var_limits_update(rating_kva, p_gen_kw, s_base_va=None):
    '''
    Reactive power box left by an inverter of <rating_kva> producing
    <p_gen_kw>. Limits are in kVAR, or per-unit when <s_base_va> is given.
    '''

    rating = np.asarray(rating_kva, dtype=float)
    p_gen = np.asarray(p_gen_kw, dtype=float)

    if np.any(rating < 0):
        raise ValueError(f'Inverter ratings must be nonnegative: {rating}')
    elif np.any(p_gen < 0):
        raise ValueError(f'Generation must be nonnegative: {p_gen}')
    elif np.any(p_gen > rating):
        raise ValueError(f'Generation exceeds inverter rating: '
                         f'{p_gen} > {rating}')

    q_hi = np.sqrt(rating ** 2 - p_gen ** 2)
    if s_base_va is not None:
        q_hi = q_hi * 1e3 / s_base_va

    return -q_hi, q_hi


def activation_draw(rng: np.random.Generator, prob, n_buses: int
                    ) -> np.ndarray:
    '''
    Independent Bernoulli draws, one per bus in bus order.
    '''

    _check_probability('activation probability', prob)
    return rng.random(n_buses) < prob


class LinearPlant:
    '''
    LinDistFlow plant. Voltages are the exact response of the linear model.
    '''

    def __init__(self, B: BbusMatrix, index: np.ndarray):
        self.B = B
        self.index = index
        self.w = np.zeros(B.n)
        self.state = None

    def set_conditions(self, inj_p, q_load, w, q_lo, q_hi):
        self.w = w
        self.injection = flow.Injection(inj_p, -q_load)
        self.q_lo, self.q_hi = q_lo, q_hi

    def full_q(self, q: np.ndarray) -> np.ndarray:
        if len(self.index) == self.B.n:
            return q.copy()
        full = np.zeros(self.B.n)
        full[self.index] = q
        return full

    def measure(self, q: np.ndarray) -> np.ndarray:
        v = flow.lindistflow_voltage(self.B, self.full_q(q), self.w)
        measured = v[self.index]
        self.state = PlantState(self.injection, measured, self.q_lo,
                                self.q_hi)
        return measured

    def lin_gap(self) -> float:
        return 0.0


class AcPlant:
    '''
    Backward-forward sweep plant with constant-power loads.
    '''

    def __init__(self, model: FeederModel, B: BbusMatrix, index: np.ndarray):
        self.model = model
        self.B = B
        self.index = index
        self.last = None
        self.state = None

    def set_conditions(self, inj_p, q_load, w, q_lo, q_hi):
        self.p = inj_p
        self.q_load = q_load
        self.w = w
        self.q_lo, self.q_hi = q_lo, q_hi

    def full_q(self, q: np.ndarray) -> np.ndarray:
        full = np.zeros(self.model.n)
        full[self.index] = q
        return full

    def measure(self, q: np.ndarray) -> np.ndarray:
        inj = flow.Injection(self.p, self.full_q(q) - self.q_load)
        warm = None if self.last is None else self.last.phasors
        self.last = flow.ac_power_flow(self.model, inj, self.model.v0,
                                       warm_start=warm)
        measured = self.last.v[self.index]
        self.state = PlantState(inj, measured, self.q_lo, self.q_hi)
        return measured

    def lin_gap(self) -> float:
        '''
        Largest |v_ac - v_lin| over all buses at the last applied injection.
        '''

        v_lin = flow.lindistflow_voltage(self.B, self.state.injection.q
                                         + self.q_load, self.w)
        return float(np.max(np.abs(self.last.v - v_lin)))


Plant = typing.Union[LinearPlant, AcPlant]


def _view(cache: np.ndarray, own: np.ndarray) -> np.ndarray:
    view = cache.copy()
    np.fill_diagonal(view, own)
    return view


class _Mailbox:
    '''
    Delivers broadcasts over the usable links of a round, applying the delay
    model. Queued messages are kept per payload kind.
    '''

    def __init__(self, comm: CommModel):
        self.comm = comm
        self.pending = {'lam': [], 'v': []}

    def _accept(self, kind, k, caches, stamp):
        keep = []
        for arrival, sent, mask, values in self.pending[kind]:
            if arrival > k:
                keep.append((arrival, sent, mask, values))
                continue
            fresh = mask & (sent > stamp) & (k - sent <= self.comm.max_delay)
            for cache, value in zip(caches, values):
                cache[fresh] = np.broadcast_to(value, cache.shape)[fresh]
            stamp[fresh] = sent
        self.pending[kind] = keep

    def exchange(self, kind, rng, k, links, caches, stamp, values):
        comm = self.comm
        delivered = links

        if comm.delay_prob > 0:
            n = links.shape[0]
            delayed = links & (rng.random((n, n)) < comm.delay_prob)
            if comm.delay_mode == DelayMode.QUEUE:
                delays = rng.integers(1, comm.max_delay + 1, size=(n, n))
                for d in np.unique(delays[delayed]):
                    mask = delayed & (delays == d)
                    self.pending[kind].append(
                        (k + int(d), k, mask,
                         tuple(v[None, :].copy() for v in values)))
            delivered = links & ~delayed

        if comm.delay_mode == DelayMode.QUEUE:
            self._accept(kind, k, caches, stamp)

        for cache, value in zip(caches, values):
            np.copyto(cache, value[None, :], where=delivered)
        stamp[delivered] = k


def agent_round(agents: AgentState, plant: Plant, comm: CommModel,
                ctl: Controller, k: int, rng: np.random.Generator,
                mailbox: typing.Optional[_Mailbox] = None) -> AgentState:
    '''
    One round of the asynchronous protocol. Inactive buses keep (v, w,
    lambda); every bus updates q from its own measurement unless the
    strategy says otherwise.
    '''

    if mailbox is None:
        mailbox = _Mailbox(comm)

    B = ctl.B.matrix
    n = agents.n
    active = activation_draw(rng, comm.activation_prob, n) \
        & ~comm.outage_mask(k, ctl.B.buses)
    links = ctl.B.adjacency & active[:, None] & active[None, :]

    new = agents.copy()
    new.active = active

    # Phase 1: dual broadcast and exact v-minimization
    mailbox.exchange('lam', rng, k, links, (new.cache_lam,), new.stamp_lam,
                     (agents.lam,))
    v_all = ppd.v_update(ppd.neighbor_sum(B, _view(new.cache_lam, agents.lam)),
                         ctl.mu, agents.v, ctl.theta)
    new.v = np.where(active, v_all, agents.v)

    # Phase 2: local VAR update, plant response, primal broadcast, dual ascent
    q_lo, q_hi = plant.q_lo, plant.q_hi
    if ctl.strategy == Strategy.NONE:
        q = np.clip(np.zeros(n), q_lo, q_hi)
    else:
        q = ppd.q_update(agents.q, agents.lam, agents.v_meas, ctl.mu,
                         ctl.gamma, ctl.alpha, q_lo, q_hi)
        if ctl.strategy == Strategy.DISTRIBUTED:
            q = np.where(active, q, np.clip(agents.q, q_lo, q_hi))
    new.q = q

    v_meas = plant.measure(q)
    if comm.noise_std > 0:
        v_meas = v_meas + rng.normal(0.0, comm.noise_std, n)
    new.v_meas = v_meas

    mailbox.exchange('v', rng, k, links, (new.cache_v, new.cache_vt),
                     new.stamp_v, (new.v, v_meas))

    if ctl.w_source == WSource.FEEDBACK:
        w_all = ppd.neighbor_sum(B, _view(new.cache_vt, v_meas)) - q
    else:
        w_all = ctl.w_model
    new.w = np.where(active, w_all, agents.w)

    lam_all = ppd.lambda_update(
        agents.lam, ppd.neighbor_sum(B, _view(new.cache_v, new.v)), q, new.w,
        ctl.beta)
    new.lam = np.where(active, lam_all, agents.lam)

    if not all(np.all(np.isfinite(a))
               for a in (new.v, new.q, new.lam, new.w)):
        raise NumericalError(f'Non-finite agent state at round {k}')

    return new


def iterations_to_tolerance(measurements: typing.Iterable[np.ndarray],
                            v_star: np.ndarray,
                            tol: float) -> typing.Optional[int]:
    '''
    Index of the first measured profile within <tol> (2-norm) of <v_star>.
    '''

    for k, v in enumerate(measurements):
        if np.linalg.norm(v - v_star) <= tol:
            return k
    return None


@dataclasses.dataclass(frozen=True, eq=False)
class System:
    '''
    A scenario's feeder resolved into matrices and the controlled bus set.
    '''

    model: FeederModel
    B_full: BbusMatrix
    B: BbusMatrix
    # Positions of the controlled buses within the non-root bus list
    index: np.ndarray
    mu: np.ndarray

    @property
    def reduced(self) -> bool:
        return self.B is not self.B_full

    @staticmethod
    def build(model: FeederModel, der_buses=None, mu=1.0) -> 'System':
        B_full = build_bbus(model)
        if der_buses:
            B = kron_reduce(B_full, der_buses)
        else:
            B = B_full
        index = np.array([b - 1 for b in B.buses], dtype=int)

        mu = np.asarray(mu, dtype=float)
        if mu.ndim == 0:
            mu = np.full(B.n, float(mu))
        elif mu.shape != (B.n,):
            raise InputError(f'mu has {mu.size} entries for {B.n} controlled '
                             f'buses')

        return System(model=model, B_full=B_full, B=B, index=index, mu=mu)

    def operating_vector(self, p_pu, q_load_pu) -> tuple[np.ndarray,
                                                         np.ndarray]:
        '''
        Full and controller-side operating-condition vectors.
        '''

        w_full = flow.build_operating_vector(self.model, p_pu, self.model.v0,
                                             q_load=q_load_pu)
        if self.reduced:
            return w_full, kron_operating_vector(self.B_full, self.B.buses,
                                                 w_full)
        return w_full, w_full


@dataclasses.dataclass(frozen=True, eq=False)
class Conditions:
    p: np.ndarray
    q_load: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray
    w_full: np.ndarray
    w: np.ndarray


def system_conditions(scenario: 'Scenario', system: System, t: int,
                      unlimited_box: bool = False) -> Conditions:
    '''
    Per-unit loading, VAR limits and operating conditions at timestep <t>.
    '''

    bases = system.model.bases
    p_load, q_load, p_gen = scenario.loading(t)
    p = bases.kw_to_pu(p_gen - p_load)
    q_load_pu = bases.kw_to_pu(q_load)

    if unlimited_box:
        q_hi = np.full(system.B.n, UNLIMITED_BOX_PU)
        q_lo = -q_hi
    else:
        try:
            q_lo, q_hi = var_limits_update(scenario.ratings[system.index],
                                           p_gen[system.index],
                                           bases.s_base_va)
        except ValueError as e:
            raise InputError(f'Timestep {t}: {e}') from e

    w_full, w = system.operating_vector(p, q_load_pu)

    return Conditions(p=p, q_load=q_load_pu, q_lo=q_lo, q_hi=q_hi,
                      w_full=w_full, w=w)


def static_problem(scenario: 'Scenario', t: int = 0,
                   unlimited_box: bool = False,
                   system: typing.Optional[System] = None) -> ppd.HvcProblem:
    '''
    Static problem seen by the controller at timestep <t>.
    '''

    system = system or scenario.system()
    cond = system_conditions(scenario, system, t, unlimited_box)

    return ppd.HvcProblem(B=system.B, w=cond.w, mu=system.mu,
                          gamma=scenario.controller.gamma, q_lo=cond.q_lo,
                          q_hi=cond.q_hi)


class Simulation:
    '''
    Round-by-round driver shared by simulate() and the sweeps.
    '''

    def __init__(self, scenario: 'Scenario',
                 strategy: typing.Optional[Strategy] = None,
                 plant_kind: typing.Optional[PlantKind] = None,
                 w_source: typing.Optional[WSource] = None,
                 unlimited_box: bool = False):
        self.scenario = scenario
        self.system = scenario.system()
        self.unlimited_box = unlimited_box
        self.rng = np.random.default_rng(scenario.comm.seed)
        self.comm = scenario.comm
        self.mailbox = _Mailbox(self.comm)

        steps = scenario.steps
        self.strategy = strategy or scenario.strategy
        self.w_source = w_source or scenario.w_source
        self.plant_kind = plant_kind or scenario.plant

        system = self.system
        if self.plant_kind == PlantKind.LINEAR:
            self.plant = LinearPlant(system.B_full, system.index)
        else:
            self.plant = AcPlant(system.model, system.B_full, system.index)

        self.steps = steps
        self.agents = None
        self.conditions = None
        self.k = 0
        self.t = -1

    def controller(self) -> Controller:
        c = self.scenario.controller
        return Controller(
            B=self.system.B,
            mu=self.system.mu,
            alpha=self.steps.alpha,
            beta=self.steps.beta,
            gamma=c.gamma,
            theta=c.theta,
            strategy=self.strategy,
            w_source=self.w_source,
            w_model=self.conditions.w,
        )

    def start_timestep(self, t: int):
        '''
        Apply the loading of timestep <t>. The inverters clip their current
        output to the new limits and every bus re-measures.
        '''

        self.t = t
        cond = system_conditions(self.scenario, self.system, t,
                                 self.unlimited_box)
        self.conditions = cond
        self.plant.set_conditions(cond.p, cond.q_load, cond.w_full,
                                  cond.q_lo, cond.q_hi)
        self.ctl = self.controller()

        if self.agents is None:
            q0 = np.clip(np.zeros(self.system.B.n), cond.q_lo, cond.q_hi)
            v_meas = self.plant.measure(q0)
            if self.w_source == WSource.MODEL:
                w0 = cond.w
            else:
                w0 = ppd.neighbor_sum(self.system.B.matrix, v_meas) - q0
            self.agents = AgentState.initial(self.system.mu, q0, v_meas, w0)
        else:
            q = np.clip(self.agents.q, cond.q_lo, cond.q_hi)
            self.agents.q = q
            self.agents.v_meas = self.plant.measure(q)

    def step(self) -> AgentState:
        self.agents = agent_round(self.agents, self.plant, self.comm,
                                  self.ctl, self.k, self.rng, self.mailbox)
        self.k += 1
        return self.agents

    def mismatch(self) -> float:
        return ppd.mismatch_norm(self.agents.v_meas, self.system.mu)


def simulate(scenario: 'Scenario', strategy: typing.Optional[Strategy] = None,
             validate_lindistflow: bool = False,
             record_buses: bool = False) -> SimulationResult:
    sim = Simulation(scenario, strategy=strategy)
    timing = scenario.timing
    round_seconds = timing.timestep_seconds / timing.rounds_per_timestep

    rounds = []
    summaries = []
    histories = {'v': [], 'q': [], 'lambda': []}

    for t in range(timing.timesteps):
        sim.start_timestep(t)
        mismatches = []

        for _ in range(timing.rounds_per_timestep):
            agents = sim.step()
            mismatch = sim.mismatch()
            mismatches.append(mismatch)
            rounds.append(RoundRecord(
                round=sim.k,
                time_s=sim.k * round_seconds,
                timestep=t,
                mismatch_norm=mismatch,
            ))
            if record_buses:
                histories['v'].append(agents.v_meas.copy())
                histories['q'].append(agents.q.copy())
                histories['lambda'].append(agents.lam.copy())

        gap = None
        if validate_lindistflow:
            gap = sim.plant.lin_gap()

        summaries.append(TimestepSummary(
            timestep=t,
            time_s=(t + 1) * timing.timestep_seconds,
            mean_mismatch=float(np.mean(mismatches)) if mismatches else 0.0,
            final_mismatch=mismatches[-1] if mismatches else sim.mismatch(),
            headroom_pu=float(np.sum(sim.conditions.q_hi)),
            lin_gap=gap,
        ))

    return SimulationResult(
        rounds=rounds,
        timesteps=summaries,
        final=sim.agents,
        buses=sim.system.B.buses,
        strategy=sim.strategy,
        seed=scenario.comm.seed,
        config=scenario.to_dict(),
        bus_traces={name: np.array(values)
                    for name, values in histories.items()}
        if record_buses else {},
    )


def rounds_to_tolerance(scenario: 'Scenario', v_star: np.ndarray, tol: float,
                        max_rounds: int, activation_prob=None,
                        seed=None) -> typing.Optional[int]:
    '''
    Run the static scenario on the linear plant with the model operating
    condition until the measured profile is within <tol> of <v_star>.
    '''

    changes = {}
    if activation_prob is not None:
        changes['activation_prob'] = activation_prob
    if seed is not None:
        changes['seed'] = seed
    if changes:
        scenario = scenario.with_comm(**changes)

    sim = Simulation(scenario, plant_kind=PlantKind.LINEAR,
                     w_source=WSource.MODEL)
    sim.start_timestep(0)

    def measurements():
        yield sim.agents.v_meas
        for _ in range(max_rounds):
            yield sim.step().v_meas

    return iterations_to_tolerance(measurements(), v_star, tol)
