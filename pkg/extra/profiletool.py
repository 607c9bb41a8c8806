#!/usr/bin/env python3

import argparse
import os
import sys

import numpy as np

sys.path.append(os.path.join(sys.path[0], '..'))
from gridvolt import feeder
from gridvolt.formats import profiles
from gridvolt.util import InputError


def parse_args():
    parser = argparse.ArgumentParser()
    subparsers = parser.add_subparsers(dest='subcommand', required=True,
                                       help='Subcommands')

    synthetic = subparsers.add_parser(
        'synthetic', help='Write one synthetic day of load and solar')
    summary = subparsers.add_parser(
        'summary', help='Show daily totals and peaks of a profile CSV')

    synthetic.add_argument('output', help='Path to output CSV file')
    group = synthetic.add_mutually_exclusive_group(required=True)
    group.add_argument('--feeder', help='Feeder whose buses get profiles')
    group.add_argument('--buses', type=int,
                       help='Number of non-root buses (ids 1..N)')
    synthetic.add_argument('--homes-per-bus', type=int, default=25)
    synthetic.add_argument('--step-seconds', type=float, default=60.0)
    synthetic.add_argument('--solar-peak-kw', type=float, default=3.5)
    synthetic.add_argument('--power-factor', type=float, default=0.95)
    synthetic.add_argument('--variability', type=float, default=0.05)
    synthetic.add_argument('--seed', type=int, default=0)

    summary.add_argument('input', help='Path to profile CSV file')

    return parser.parse_args()


def print_summary(series):
    hours = series.step_seconds / 3600.0 if series.step_seconds else 0.0
    print('Buses:', ', '.join(str(b) for b in series.buses))
    print('Timesteps:', series.timesteps)
    if series.step_seconds is not None:
        print(f'Step: {series.step_seconds:g}s')

    load = series.p_load_kw.sum(axis=1)
    solar = series.p_gen_kw.sum(axis=1)
    for name, values in (('Load', load), ('Solar', solar)):
        peak = int(np.argmax(values))
        print(f'{name}: {values.sum() * hours:.1f} kWh, peak '
              f'{values[peak]:.1f} kW at t={series.times[peak]:g}s')


def main():
    args = parse_args()

    try:
        if args.subcommand == 'synthetic':
            if args.feeder is not None:
                buses = feeder.load_feeder(args.feeder).bus_ids
            else:
                buses = tuple(range(1, args.buses + 1))

            series = profiles.synthetic_daily_profiles(
                buses,
                homes_per_bus=args.homes_per_bus,
                step_seconds=args.step_seconds,
                solar_peak_kw=args.solar_peak_kw,
                power_factor=args.power_factor,
                variability=args.variability,
                seed=args.seed,
            )
            profiles.write_profiles(series, args.output)

        elif args.subcommand == 'summary':
            print_summary(profiles.load_profiles(args.input))

        else:
            raise NotImplementedError()
    except InputError as e:
        print(e, file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
