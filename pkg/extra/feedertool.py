#!/usr/bin/env python3

import argparse
import os
import sys

sys.path.append(os.path.join(sys.path[0], '..'))
from gridvolt import feeder
from gridvolt import ppd
from gridvolt.util import InputError, NumericalError


def parse_args():
    parser = argparse.ArgumentParser()
    subparsers = parser.add_subparsers(dest='subcommand', required=True,
                                       help='Subcommands')

    info = subparsers.add_parser(
        'info', help='Show the Bbus spectrum and certified step sizes')
    chain = subparsers.add_parser(
        'chain', help='Write a uniform chain feeder')

    info.add_argument('input', help='Path to feeder JSON file')
    info.add_argument('--gamma', type=float, default=ppd.DEFAULT_GAMMA,
                      help='Voltage-deviation weight for the step bounds')
    info.add_argument('--keep', type=int, action='append',
                      help='Kron-reduce onto this bus (repeatable)')

    chain.add_argument('output', help='Path to output feeder JSON file')
    chain.add_argument('--buses', type=int, default=21,
                       help='Number of buses including the substation')
    chain.add_argument('--r-ohm', type=float, default=0.233,
                       help='Segment resistance')
    chain.add_argument('--x-ohm', type=float, default=0.366,
                       help='Segment reactance')
    chain.add_argument('--s-base-va', type=float,
                       default=feeder.DEFAULT_S_BASE_VA,
                       help='Power base')
    chain.add_argument('--v-base-v', type=float,
                       default=feeder.DEFAULT_V_BASE_V,
                       help='Voltage base')

    return parser.parse_args()


def print_info(model, B, gamma):
    print('Feeder:', model.name or '<unnamed>')
    print('Buses:', model.n_buses)
    print('Radial:', model.radial)
    print('Controlled buses:', ', '.join(str(b) for b in B.buses))
    print(f'eta_tilde: {B.eta_tilde:.6g}')
    print(f'L_tilde: {B.L_tilde:.6g}')

    if gamma > 0:
        alpha_max, beta_max = ppd.stepsize_bounds(B.eta_tilde, B.L_tilde,
                                                  gamma)
        print(f'alpha < {alpha_max:.6g}, beta < {beta_max:.6g} '
              f'(gamma={gamma:g})')
    else:
        print('No certified step sizes for gamma=0')


def main():
    args = parse_args()

    try:
        if args.subcommand == 'info':
            model = feeder.load_feeder(args.input)
            B = feeder.build_bbus(model)
            if args.keep:
                B = feeder.kron_reduce(B, args.keep)
            print_info(model, B, args.gamma)

        elif args.subcommand == 'chain':
            bases = feeder.Bases(s_base_va=args.s_base_va,
                                 v_base_v=args.v_base_v)
            spec = feeder.chain_feeder(args.buses, args.r_ohm, args.x_ohm,
                                       bases)
            # Validate before writing
            feeder.build_feeder(spec)
            feeder.write_feeder(spec, args.output)

        else:
            raise NotImplementedError()
    except (InputError, NumericalError, ValueError) as e:
        print(e, file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
