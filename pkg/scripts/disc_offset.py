"""Tabulate I(r, eps) - (pi/2) ln(r/eps) for the radial disc problem."""

import argparse

import numpy as np

from ldglab.flow import solve_disc


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--h", type=float, default=1 / 512)
    p.add_argument("--ratios", type=float, nargs="+", default=[5, 10, 20, 40])
    args = p.parse_args()
    print("r/eps,r,I,offset")
    for q in args.ratios:
        r = q * args.epsilon
        I = solve_disc(r, args.epsilon, args.beta, args.h).total
        print(f"{q:g},{r:g},{I:.6f},{I - 0.5 * np.pi * np.log(q):.6f}")


if __name__ == "__main__":
    main()
