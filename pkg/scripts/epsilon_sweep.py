"""Energy and deficit bound against epsilon at fixed grid size."""

import argparse

from ldglab.cli import RunConfig, cmd_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--N", type=int, default=257)
    p.add_argument("--epsilons", type=float, nargs="+", default=[0.04, 0.02])
    p.add_argument("--output-dir", default="runs/sweep")
    args = p.parse_args()
    man = cmd_sweep(RunConfig(N=args.N, output_dir=args.output_dir), epsilons=args.epsilons)
    print(f"wrote {args.output_dir}/sweep_epsilon.csv; failed: {man['failed']}")


if __name__ == "__main__":
    main()
