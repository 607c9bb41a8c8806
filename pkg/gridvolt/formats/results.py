# Result files. Every writer goes through util.open_output_file() and emits
# byte-stable output: fixed column order, sorted JSON keys, '\n' line endings.

import dataclasses
import json
import math
import os
import typing

import numpy as np
import pandas as pd

from .. import util
from ..ppd import TraceRecord
from ..sim import RoundRecord, SimulationResult, TimestepSummary


TRACE_FILE = 'trace.csv'
SUMMARY_FILE = 'summary.json'
TIMESTEPS_FILE = 'timesteps.csv'

SIM_TRACE_COLUMNS = [f.name for f in dataclasses.fields(RoundRecord)]
STATIC_TRACE_COLUMNS = ['round', 'time_s', 'mismatch_norm', 'r_v', 'r_q',
                        'r_lambda']
TIMESTEP_COLUMNS = [f.name for f in dataclasses.fields(TimestepSummary)]


def records_frame(records: typing.Sequence, columns: list[str]
                  ) -> pd.DataFrame:
    return pd.DataFrame([dataclasses.asdict(r) for r in records],
                        columns=columns)


def static_trace_frame(trace: typing.Sequence[TraceRecord],
                       round_seconds: float) -> pd.DataFrame:
    return pd.DataFrame({
        'round': [r.k for r in trace],
        'time_s': [r.k * round_seconds for r in trace],
        'mismatch_norm': [r.mismatch_norm for r in trace],
        'r_v': [r.r_v for r in trace],
        'r_q': [r.r_q for r in trace],
        'r_lambda': [r.r_lambda for r in trace],
    }, columns=STATIC_TRACE_COLUMNS)


def simulation_trace_frame(result: SimulationResult) -> pd.DataFrame:
    frame = records_frame(result.rounds, SIM_TRACE_COLUMNS)

    for kind in ('v', 'q', 'lambda'):
        history = result.bus_traces.get(kind)
        if history is None or len(history) == 0:
            continue
        for column, bus in enumerate(result.buses):
            frame[f'{kind}_{bus}'] = history[:, column]

    return frame


def _plain(value):
    '''
    JSON-compatible copy of <value>. Non-finite floats become null.
    '''

    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    elif isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    elif isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    elif isinstance(value, (bool, np.bool_)):
        return bool(value)
    elif isinstance(value, (int, np.integer)):
        return int(value)
    elif isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dump_json(data: dict) -> str:
    return json.dumps(_plain(data), indent=2, sort_keys=True,
                      allow_nan=False) + '\n'


def write_json(data: dict, path: str):
    with util.open_output_file(path, 'w') as f:
        f.write(dump_json(data))


def write_table(frame: pd.DataFrame, path: str):
    with util.open_output_file(path, 'w') as f:
        frame.to_csv(f, index=False, lineterminator='\n')


def write_results(directory: str, trace: pd.DataFrame, summary: dict,
                  tables: typing.Optional[dict[str, pd.DataFrame]] = None
                  ) -> list[str]:
    '''
    Write trace.csv, summary.json and any extra named tables into
    <directory>, creating it if needed. Returns the written paths.
    '''

    os.makedirs(directory, exist_ok=True)
    paths = []

    path = os.path.join(directory, TRACE_FILE)
    write_table(trace, path)
    paths.append(path)

    for name, frame in sorted((tables or {}).items()):
        path = os.path.join(directory, name)
        write_table(frame, path)
        paths.append(path)

    path = os.path.join(directory, SUMMARY_FILE)
    write_json(summary, path)
    paths.append(path)

    return paths


def simulation_summary(result: SimulationResult,
                       extra: typing.Optional[dict] = None) -> dict:
    mismatches = [r.mismatch_norm for r in result.rounds]
    summary = {
        'strategy': result.strategy.value,
        'seed': result.seed,
        'rounds': len(result.rounds),
        'timesteps': len(result.timesteps),
        'buses': list(result.buses),
        'final_mismatch': mismatches[-1] if mismatches else None,
        'mean_mismatch': float(np.mean(mismatches)) if mismatches else None,
        'final_state': {
            'v': result.final.v,
            'q': result.final.q,
            'lambda': result.final.lam,
            'v_meas': result.final.v_meas,
        },
        'config': result.config,
    }

    gaps = [s.lin_gap for s in result.timesteps if s.lin_gap is not None]
    if gaps:
        summary['max_lin_gap'] = max(gaps)
    if extra:
        summary.update(extra)

    return summary


def write_simulation(result: SimulationResult, directory: str,
                     extra: typing.Optional[dict] = None) -> list[str]:
    return write_results(
        directory,
        simulation_trace_frame(result),
        simulation_summary(result, extra),
        tables={TIMESTEPS_FILE: records_frame(result.timesteps,
                                              TIMESTEP_COLUMNS)},
    )
