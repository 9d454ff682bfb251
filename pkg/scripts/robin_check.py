"""Compare discrete Robin constants with the disc formula ln(R)/(2 pi) and the unit-square value."""

import argparse

import numpy as np

from ldglab.analysis import green_function
from ldglab.domain import Grid2D


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--N", type=int, nargs="+", default=[129, 257, 513])
    args = p.parse_args()
    a = np.array([0.5, 0.5])
    print("N,domain,robin,reference")
    for N in args.N:
        grid = Grid2D(N)
        rho = np.hypot(*(grid.points() - a).transpose(2, 0, 1))
        for R in (0.3, 0.45):
            val = green_function(grid, a, free=rho < R).robin
            print(f"{N},disc R={R},{val:.6f},{np.log(R) / (2 * np.pi):.6f}")
        print(f"{N},unit square,{green_function(grid, a).robin:.6f},-0.098260")


if __name__ == "__main__":
    main()
