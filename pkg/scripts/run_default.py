"""Solve the default problem and analyze it; results go to runs/default."""

import argparse
from pathlib import Path

from ldglab.cli import RunConfig, cmd_analyze, cmd_run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--N", type=int, default=513)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--output-dir", default="runs/default")
    args = p.parse_args()
    cfg = RunConfig(N=args.N, epsilon=args.epsilon, output_dir=args.output_dir)
    cmd_run(cfg)
    out = Path(args.output_dir)
    cmd_analyze(out / "state.ckpt", out / "analysis", radii=cfg.radii, r_report=cfg.r_report)
    print((out / "analysis" / "report.json").read_text())


if __name__ == "__main__":
    main()
