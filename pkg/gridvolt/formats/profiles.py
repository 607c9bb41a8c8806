# Per-bus time series of load and solar generation. The CSV layout is a long
# table with one row per (timestep, bus):
#
#   t,bus,p_load_kw,q_load_kvar,p_gen_kw
#
# where t is in seconds and every (t, bus) pair of a uniform time grid must be
# present exactly once.

import dataclasses
import typing

import numpy as np
import pandas as pd

from .. import util
from ..util import InputError


COLUMNS = ('t', 'bus', 'p_load_kw', 'q_load_kvar', 'p_gen_kw')
VALUES = COLUMNS[2:]

SECONDS_PER_DAY = 86400


@dataclasses.dataclass(frozen=True, eq=False)
class ProfileSeries:
    # Seconds, shape (T,)
    times: np.ndarray
    buses: tuple[int, ...]
    # Shape (T, len(buses))
    p_load_kw: np.ndarray
    q_load_kvar: np.ndarray
    p_gen_kw: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.times)

    @property
    def step_seconds(self) -> typing.Optional[float]:
        if len(self.times) < 2:
            return None
        return float(self.times[1] - self.times[0])

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0 <= t < self.timesteps:
            raise IndexError(f'Timestep {t} outside profile of '
                             f'{self.timesteps} steps')
        return self.p_load_kw[t], self.q_load_kvar[t], self.p_gen_kw[t]

    def to_frame(self) -> pd.DataFrame:
        n_t, n_b = self.p_load_kw.shape
        times = self.times
        if np.all(times == np.round(times)):
            times = times.astype(np.int64)

        return pd.DataFrame({
            't': np.repeat(times, n_b),
            'bus': np.tile(np.array(self.buses, dtype=np.int64), n_t),
            'p_load_kw': self.p_load_kw.ravel(),
            'q_load_kvar': self.q_load_kvar.ravel(),
            'p_gen_kw': self.p_gen_kw.ravel(),
        }, columns=list(COLUMNS))

    def equals(self, other: 'ProfileSeries') -> bool:
        return self.buses == other.buses \
            and np.array_equal(self.times, other.times) \
            and all(np.array_equal(getattr(self, c), getattr(other, c))
                    for c in VALUES)


def _numeric(frame: pd.DataFrame, column: str, label: str) -> np.ndarray:
    # astype() parses with float() and round-trips written values exactly
    try:
        values = frame[column].astype(float).to_numpy()
    except (TypeError, ValueError):
        values = pd.to_numeric(frame[column], errors='coerce') \
            .to_numpy(dtype=float)

    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise InputError(f'{label}: row {row + 2}: {column} is not a finite '
                         f'number: {frame[column].iloc[row]!r}')
    return values


def profiles_from_frame(frame: pd.DataFrame, label: str = '<profiles>',
                        buses: typing.Optional[typing.Sequence[int]] = None
                        ) -> ProfileSeries:
    '''
    Validate a long-format table and pivot it into dense arrays. When <buses>
    is given, the table must cover exactly those buses.
    '''

    if tuple(frame.columns) != COLUMNS:
        raise InputError(f'{label}: expected columns {",".join(COLUMNS)}; '
                         f'got {",".join(map(str, frame.columns))}')
    elif frame.empty:
        raise InputError(f'{label}: no rows')

    t = _numeric(frame, 't', label)
    bus = _numeric(frame, 'bus', label)
    if np.any(bus != np.round(bus)) or np.any(bus < 1):
        row = int(np.flatnonzero((bus != np.round(bus)) | (bus < 1))[0])
        raise InputError(f'{label}: row {row + 2}: invalid bus '
                         f'{frame["bus"].iloc[row]!r}')

    clean = pd.DataFrame({'t': t, 'bus': bus.astype(np.int64)})
    for column in VALUES:
        clean[column] = _numeric(frame, column, label)

    duplicated = clean.duplicated(subset=['t', 'bus'])
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0])
        bus, t = clean['bus'].iloc[row], clean['t'].iloc[row]
        raise InputError(f'{label}: row {row + 2}: duplicate entry for bus '
                         f'{bus} at t={t:g}')

    if np.any(clean['p_gen_kw'] < 0):
        row = int(np.flatnonzero(clean['p_gen_kw'].to_numpy() < 0)[0])
        raise InputError(f'{label}: row {row + 2}: negative p_gen_kw')

    times = np.unique(clean['t'].to_numpy())
    if len(times) > 1:
        steps = np.diff(times)
        if not np.allclose(steps, steps[0], rtol=0.0, atol=1e-9):
            raise InputError(f'{label}: time grid is not uniform')

    present = tuple(int(b) for b in np.unique(clean['bus'].to_numpy()))
    if buses is not None and tuple(buses) != present:
        missing = sorted(set(buses) - set(present))
        extra = sorted(set(present) - set(buses))
        raise InputError(f'{label}: bus set mismatch; missing {missing}, '
                         f'unexpected {extra}')

    arrays = {}
    for column in VALUES:
        table = clean.pivot(index='t', columns='bus', values=column)
        table = table.reindex(index=times, columns=list(present))
        holes = table.isna().to_numpy()
        if holes.any():
            i, j = np.argwhere(holes)[0]
            raise InputError(f'{label}: no entry for bus {present[j]} at '
                             f't={times[i]:g}')
        arrays[column] = table.to_numpy(dtype=float)

    return ProfileSeries(times=times.astype(float), buses=present, **arrays)


def load_profiles(path: str,
                  buses: typing.Optional[typing.Sequence[int]] = None
                  ) -> ProfileSeries:
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except FileNotFoundError:
        raise InputError(f'Profile file not found: {path}')
    except (pd.errors.ParserError, pd.errors.EmptyDataError,
            UnicodeDecodeError) as e:
        raise InputError(f'{path}: cannot parse CSV: {e}')

    return profiles_from_frame(frame, label=path, buses=buses)


def write_profiles(series: ProfileSeries, path: str):
    with util.open_output_file(path, 'w') as f:
        series.to_frame().to_csv(f, index=False, lineterminator='\n')


def _bump(hours: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((hours - center) / width) ** 2)


def household_load_kw(hours: np.ndarray) -> np.ndarray:
    '''
    Mean residential demand per home: a night floor, a morning bump, a
    midday plateau and an evening peak.
    '''

    return 0.8 + 0.6 * _bump(hours, 7.5, 1.2) + 0.4 * _bump(hours, 13.0, 3.0) \
        + 2.0 * _bump(hours, 19.5, 2.0)


def household_solar_kw(hours: np.ndarray, peak_kw: float) -> np.ndarray:
    return np.where((hours >= 6.0) & (hours <= 19.0),
                    peak_kw * _bump(hours, 12.5, 1.8), 0.0)


def synthetic_daily_profiles(buses: typing.Sequence[int],
                             homes_per_bus: int = 25,
                             step_seconds: float = 60.0,
                             timesteps: typing.Optional[int] = None,
                             solar_peak_kw: float = 3.5,
                             power_factor: float = 0.95,
                             variability: float = 0.05,
                             seed: int = 0) -> ProfileSeries:
    '''
    One day of aggregated household load and rooftop solar per bus. Each
    home draws independent multiplicative noise of relative size
    <variability>; solar output never exceeds the aggregated panel peak.
    '''

    if homes_per_bus < 1:
        raise InputError(f'homes_per_bus must be positive: {homes_per_bus}')
    elif not step_seconds > 0:
        raise InputError(f'Step must be positive: {step_seconds}')
    elif not 0 < power_factor <= 1:
        raise InputError(f'Power factor must lie in (0, 1]: {power_factor}')
    elif not variability >= 0:
        raise InputError(f'Variability must be nonnegative: {variability}')

    if timesteps is None:
        timesteps = int(round(SECONDS_PER_DAY / step_seconds))

    rng = np.random.default_rng(seed)
    times = np.arange(timesteps) * float(step_seconds)
    hours = (times / 3600.0) % 24.0
    shape = (timesteps, len(buses))
    spread = variability / np.sqrt(homes_per_bus)

    load = homes_per_bus * household_load_kw(hours)[:, None] \
        * np.maximum(1 + spread * rng.standard_normal(shape), 0.0)

    panel = homes_per_bus * solar_peak_kw
    shading = np.clip(spread * np.abs(rng.standard_normal(shape)), 0.0, 1.0)
    solar = homes_per_bus * household_solar_kw(hours, solar_peak_kw)[:, None] \
        * (1 - shading)
    solar = np.clip(solar, 0.0, panel)

    q_load = load * np.tan(np.arccos(power_factor))

    return ProfileSeries(times=times, buses=tuple(buses), p_load_kw=load,
                         q_load_kvar=q_load, p_gen_kw=solar)
