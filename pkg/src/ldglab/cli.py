"""Batch front end: ``run``, ``analyze``, ``sweep`` and ``selftest``.

Exit codes: 0 success, 1 solver or analysis failure, 2 usage or
validation error.  Every command writes ``manifest.json`` last, listing
each emitted file with its SHA-256.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (
    current_vector,
    eigenframe,
    energy_expansion_report,
    extract_lambda,
    extract_g,
    geodesic_length_profile,
    green_function,
    holonomy,
    hopf_differential,
    hopf_profile,
    InsufficientSupport,
    lift_angles,
    linear_fit_r2,
    locate_defect,
    mu_magnitude,
    radial_decay_diagnostics,
    recover_potentials,
    sinh_gordon_residual,
)
from .domain import BoundarySpec, Grid2D
from .flow import (
    CheckpointError,
    CoreUnresolved,
    FlowConfig,
    FlowState,
    energy,
    load_checkpoint,
    run_flow,
    save_checkpoint,
    solve_disc,
)
from .sym3core import inner, project_field

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    return d


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; ``from_dict`` rejects unknown keys."""

    N: int = 513
    epsilon: float = 0.01
    beta: float = 2.0
    boundary: BoundarySpec = field(default_factory=BoundarySpec)
    flow: FlowConfig = field(default_factory=FlowConfig)
    radii: tuple = (0.05, 0.075, 0.1, 0.125, 0.15)
    r_report: float = 0.1
    output_dir: str = "runs/default"
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if not isinstance(self.N, int) or self.N < 16:
            raise ConfigError(f"N: must be an integer >= 16, got {self.N!r}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon: must be positive, got {self.epsilon}")
        if not 1.0 <= self.beta < 3.0:
            raise ConfigError(f"beta: must lie in [1, 3), got {self.beta}")
        if not self.radii or any(r <= 0 for r in self.radii) or list(self.radii) != sorted(set(self.radii)):
            raise ConfigError(f"radii: must be a nonempty increasing list of positive numbers, got {list(self.radii)}")
        if not self.r_report > 0:
            raise ConfigError("r_report: must be positive")

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.N)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radii"] = list(self.radii)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(_strict(cls, d, "config"))
        try:
            if "boundary" in d:
                d["boundary"] = BoundarySpec(**_strict(BoundarySpec, d["boundary"], "boundary"))
            if "flow" in d:
                d["flow"] = FlowConfig(**_strict(FlowConfig, d["flow"], "flow"))
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, text: str, source: str = "<config>") -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: line {e.lineno}, column {e.colno}: {e.msg}") from None
        try:
            return cls.from_dict(d)
        except ConfigError as e:
            raise ConfigError(f"{source}: {e}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- output helpers ------------------------------------------------------------


class Outputs:
    """Collects emitted files so the manifest can list them."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name) -> Path:
        p = self.root / name
        self.files.append(p)
        return p

    def json(self, name, obj):
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))

    def text(self, name, text):
        self.path(name).write_text(text)

    def table(self, name, header, rows):
        with open(self.path(name), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def field(self, name, grid: Grid2D, values, stride=1, mask=None):
        pts = grid.points()[::stride, ::stride]
        vals = np.asarray(values)[::stride, ::stride]
        keep = np.isfinite(vals) if mask is None else (mask[::stride, ::stride] & np.isfinite(vals))
        rows = np.column_stack([pts[..., 0][keep], pts[..., 1][keep], vals[keep]])
        self.table(name, ["x", "y", "value"], rows)

    def profile(self, name, radii, values):
        self.table(name, ["r", "value"], zip(radii, values))

    def manifest(self, extra: dict) -> dict:
        inventory = []
        for p in self.files:
            inventory.append({"file": p.name, "bytes": p.stat().st_size,
                              "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        man = {
            "versions": {"ldglab": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "files": inventory,
            **extra,
        }
        (self.root / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=_jsonable))
        return man


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


# -- commands --------------------------------------------------------------------


def cmd_run(cfg: RunConfig) -> dict:
    """Minimize, then write the checkpoint, energy breakdown and history."""
    out = Outputs(cfg.output_dir)
    t0 = time.perf_counter()
    state = run_flow(cfg.grid, cfg.boundary, cfg.epsilon, cfg.beta, cfg.flow)
    elapsed = time.perf_counter() - t0
    save_checkpoint(out.path("state.ckpt"), state)
    out.json("energy.json", {**state.energy.to_dict(), "iteration": state.iteration})
    out.table("energy_history.csv", ["step", "energy"], enumerate(state.history))
    out.json("config.json", cfg.to_dict())
    return out.manifest({"command": "run", "config": cfg.to_dict(), "timings": {"run_s": elapsed},
                         "energy_series_sha256": _series_hash(state.history)})


def _series_hash(values) -> str:
    return hashlib.sha256(np.asarray(values, dtype="<f8").tobytes()).hexdigest()


def analyze_state(state: FlowState, radii, r_report=0.1, with_green=True, m=512):
    """Full diagnostic pass over a converged state.

    Returns a JSON-ready summary and the arrays needed for figure output.
    """
    grid, eps, beta = state.grid, state.epsilon, state.beta
    u = state.field
    P, _ = project_field(u)
    frame = eigenframe(u)
    defect = locate_defect(grid, frame)
    a = defect.location
    reach = 0.9 * min(a.min() - grid.origin[0], grid.origin[0] + grid.side - a.max())
    annulus = np.linspace(5 * eps, min(max(0.1, 10 * eps), reach), 12)
    omega = hopf_differential(P, grid, defect, eps)
    omega_raw = hopf_differential(u, grid, defect, eps)
    hp = hopf_profile(omega, grid, defect, annulus, m)
    hp_raw = hopf_profile(omega_raw, grid, defect, annulus, m)
    slope, icpt, r2 = linear_fit_r2(annulus, hp["inv_mu"])
    j = current_vector(P, grid)
    Lam, P3, lam_norm = extract_lambda(j, grid, defect)
    geo = geodesic_length_profile(u, grid, defect, radii, m)
    decay = radial_decay_diagnostics(u, grid, defect, P3, Lam, radii, m)
    lift = lift_angles(u, grid, defect, radii, Lam, m)
    green = green_function(grid, a) if with_green else None
    pots = recover_potentials(j, grid, defect, Lam, green, eps, radii, m=m)
    I_disc = solve_disc(r_report, eps, beta, grid.h).total
    total = (state.energy or energy(state)).total
    report = energy_expansion_report(P, grid, eps, beta, total, defect, r_report, I_disc,
                                     green, Lam, pots if with_green else None)
    g = extract_g(P, grid, omega, strict=False)
    try:
        sg = sinh_gordon_residual(g, np.abs(omega.values), grid)
    except InsufficientSupport:
        sg = None
    lam = frame.values
    outside = np.hypot(*(grid.points() - a).transpose(2, 0, 1)) >= 0.1
    deficit = (1 - inner(u, u)) / eps**2
    summary = {
        "defect": defect.to_dict(),
        "lambda3_max": float(lam[..., 2].max()),
        "holonomy": {f"e{k + 1}": holonomy(grid, frame, k, a, min(0.1, 0.5 * min(radii[-1], 0.2)))
                     for k in range(3)},
        "sign_jumps": {f"e{k + 1}": frame.has_jumps(k) for k in range(3)},
        "hopf": {"annulus": annulus, **{k: v for k, v in hp.values.items()},
                 "raw_field": {k: v for k, v in hp_raw.values.items()},
                 "inv_mu_fit": {"slope": slope, "intercept": icpt, "r2": r2}},
        "lambda": {"matrix": Lam, "P3": P3, "raw_norm": lam_norm},
        "geodesic": {"radii": geo.radii, **geo.values},
        "decay": {"radii": decay.radii, **decay.values,
                  "alpha1_deviation": lift.deviation(), "alpha_star": lift.alpha_star,
                  "psi_decay": pots.profile["psi_decay"]},
        "potentials": {"closure": pots.closure, "variation": pots.variation},
        "sinh_gordon_residual": sg if sg is not None else "not applicable",
        "deficit_sup_outside_0.1": float(deficit[outside].max()),
        "expansion": report.to_dict(),
    }
    arrays = {"frame": frame, "omega": omega, "P": P, "g": g}
    return summary, arrays


FIGURE_SCRIPTS = {
    "fig_eigenvalues.gp": """set datafile separator ','
set terminal pngcairo size 1500,450
set output 'eigenvalues.png'
set multiplot layout 1,3
set view map
set size ratio -1
do for [k=1:3] {
  set title sprintf('lambda_%d', k)
  splot sprintf('lambda%d.csv', k) using 1:2:3 with points pt 5 ps 0.3 palette notitle
}
unset multiplot
""",
    "fig_eigenframe.gp": """set datafile separator ','
set terminal pngcairo size 1500,450
set output 'eigenframe.png'
set multiplot layout 1,3
set size ratio -1
do for [k=1:3] {
  set title sprintf('e_%d (x, y components)', k)
  plot sprintf('e%d_quiver.csv', k) using 1:2:($3*0.01):($4*0.01) with vectors nohead notitle
}
unset multiplot
""",
    "fig_zmu.gp": """set datafile separator ','
set terminal pngcairo size 700,600
set output 'zmu.png'
set view map
set size ratio -1
set title '|(z-a) mu|'
splot 'zmu.csv' using 1:2:3 with points pt 5 ps 0.3 palette notitle
""",
    "fig_inv_mu.gp": """set datafile separator ','
set terminal pngcairo size 700,500
set output 'inv_mu.png'
set xlabel 'r'
set ylabel 'circle mean of 1/|mu|'
plot 'inv_mu_profile.csv' using 1:2 with linespoints title 'measured'
""",
    "fig_profiles.gp": """set datafile separator ','
set terminal pngcairo size 900,600
set output 'profiles.png'
set logscale xy
set xlabel 'r'
plot 'latitude_profile.csv' using 1:2 w lp t 'sup <u,P3>', \\
     'commutator_P3_profile.csv' using 1:2 w lp t 'sup |[u,P3]|', \\
     'commutator_u0_profile.csv' using 1:2 w lp t 'sup |[L,[u,u0]]|', \\
     'alpha1_deviation_profile.csv' using 1:2 w lp t 'mean |alpha1 - alpha*|', \\
     'psi_decay_profile.csv' using 1:2 w lp t 'r sup |grad phi|'
""",
}


def cmd_analyze(checkpoint, output_dir, radii=(0.05, 0.075, 0.1, 0.125, 0.15), r_report=0.1,
                stride=4, with_green=True) -> dict:
    """Eigen-data, Hopf fields, radial profiles, expansion report and plot scripts."""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    state = load_checkpoint(checkpoint)
    out = Outputs(output_dir)
    t0 = time.perf_counter()
    summary, arrays = analyze_state(state, radii, r_report, with_green)
    grid = state.grid
    frame = arrays["frame"]
    for k in range(3):
        out.field(f"lambda{k + 1}.csv", grid, frame.values[..., k], stride)
        pts = grid.points()[::stride, ::stride].reshape(-1, 2)
        vec = frame.vectors[::stride, ::stride, :, k].reshape(-1, 3)
        out.table(f"e{k + 1}_quiver.csv", ["x", "y", "ex", "ey", "ez"], np.column_stack([pts, vec]))
    omega = arrays["omega"]
    rho = np.hypot(*(grid.points() - summary["defect"]["location"]).transpose(2, 0, 1))
    mu = mu_magnitude(omega)
    out.field("zmu.csv", grid, rho * mu, stride, omega.valid)
    with np.errstate(divide="ignore"):
        out.field("inv_mu.csv", grid, 1.0 / mu, stride, omega.valid)
    hop = summary["hopf"]
    for key in ("zmu", "inv_mu", "z2omega_re", "z2omega_im"):
        out.profile(f"{key}_profile.csv", hop["annulus"], hop[key])
    geo = summary["geodesic"]
    for key in ("length", "length_raw", "geodesic_distance"):
        out.profile(f"{key}_profile.csv", geo["radii"], geo[key])
    dec = summary["decay"]
    for key in ("latitude", "commutator_P3", "commutator_u0", "alpha1_deviation", "psi_decay"):
        out.profile(f"{key}_profile.csv", dec["radii"], dec[key])
    out.json("report.json", summary)
    for name, text in FIGURE_SCRIPTS.items():
        out.text(name, text)
    return out.manifest({"command": "analyze", "checkpoint": str(checkpoint),
                         "options": {"radii": list(radii), "r_report": r_report, "stride": stride,
                                     "with_green": with_green},
                         "timings": {"analyze_s": time.perf_counter() - t0}})


def cmd_sweep(cfg: RunConfig, epsilons=None, radii=None) -> dict:
    """Runs over a list of epsilons and/or profiles over a list of radii.

    A failing point is recorded in the table and the manifest; the sweep
    continues.
    """
    if epsilons is not None and len(epsilons) == 0 or radii is not None and len(radii) == 0:
        raise ConfigError("sweep lists must be nonempty")
    if epsilons is None and radii is None:
        raise ConfigError("sweep needs --epsilons and/or --radii")
    out = Outputs(cfg.output_dir)
    failed = []
    t0 = time.perf_counter()
    if epsilons is not None:
        rows = []
        for eps in epsilons:
            sub = replace(cfg, epsilon=float(eps), output_dir=str(Path(cfg.output_dir) / f"eps_{eps:g}"))
            try:
                state = run_flow(sub.grid, sub.boundary, sub.epsilon, sub.beta, sub.flow)
                s, _ = analyze_state(state, sub.radii, sub.r_report, with_green=False)
                e = s["expansion"]
                rows.append([eps, e["energy_total"], e["I_disc"], e["residual_k2"], e["residual_k4"],
                             s["deficit_sup_outside_0.1"], s["geodesic"]["length"][0], "ok"])
            except Exception as exc:  # partial-failure policy
                failed.append({"epsilon": eps, "error": f"{type(exc).__name__}: {exc}"})
                rows.append([eps] + [float("nan")] * 6 + ["failed"])
        out.table("sweep_epsilon.csv", ["epsilon", "energy", "I_disc", "residual_k2", "residual_k4",
                                        "deficit_sup", "length_first_radius", "status"], rows)
    if radii is not None:
        try:
            state = run_flow(cfg.grid, cfg.boundary, cfg.epsilon, cfg.beta, cfg.flow)
            s, _ = analyze_state(state, tuple(sorted(radii)), cfg.r_report, with_green=False)
            g, d = s["geodesic"], s["decay"]
            cols = ["length", "geodesic_distance"]
            dcols = ["latitude", "commutator_P3", "commutator_u0", "alpha1_deviation", "psi_decay"]
            rows = [[r] + [g[c][i] for c in cols] + [d[c][i] for c in dcols] for i, r in enumerate(g["radii"])]
            out.table("sweep_radius.csv", ["r"] + cols + dcols, rows)
        except Exception as exc:
            failed.append({"radii": list(radii), "error": f"{type(exc).__name__}: {exc}"})
    return out.manifest({"command": "sweep", "config": cfg.to_dict(), "epsilons": epsilons,
                         "radii": radii, "failed": failed,
                         "timings": {"sweep_s": time.perf_counter() - t0}})


def cmd_selftest(n=20000, seed=0) -> list:
    """Fast in-process property checks; returns ``(name, passed, detail)`` rows."""
    from .domain import boundary_trace
    from .sym3core import (
        canonical_flat,
        coords,
        det3,
        grad_potential,
        hess_apply,
        potential,
        random_psd_trace1,
        reconstruct,
    )

    rng = np.random.default_rng(seed)
    u = random_psd_trace1(rng, n)
    out = []
    s = inner(u, u)
    ch = np.abs(inner(u - u @ u, u - u @ u) + 2 * det3(u) - 0.5 * (1 - s) ** 2).max()
    out.append(("cayley_hamilton", ch < 1e-10, f"max error {ch:.2e}"))
    W = potential(u, 2.0)
    out.append(("potential_lower_bound", bool(np.all(W >= (1 / 12) * (1 - s) ** 2 - 1e-14)), ""))
    k = 50
    h = np.einsum("nij->nji", rng.standard_normal((k, 3, 3)))
    h = h + np.swapaxes(h, 1, 2)
    h -= np.trace(h, axis1=1, axis2=2)[:, None, None] * np.eye(3) / 3
    t = 1e-6
    fd = (potential(u[:k] + t * h, 2.0) - potential(u[:k] - t * h, 2.0)) / (2 * t)
    an = inner(grad_potential(u[:k], 2.0), h)
    err = np.max(np.abs(fd - an) / np.maximum(1e-12, np.abs(an)))
    out.append(("gradient_fd", err < 1e-6, f"max rel error {err:.2e}"))
    fdh = (grad_potential(u[:k] + t * h, 2.0) - grad_potential(u[:k] - t * h, 2.0)) / (2 * t)
    anh = hess_apply(u[:k], h, 2.0)
    errh = np.max(np.linalg.norm(fdh - anh, axis=(1, 2)) / np.linalg.norm(anh, axis=(1, 2)))
    out.append(("hessian_fd", errh < 1e-5, f"max rel error {errh:.2e}"))
    rt = np.abs(reconstruct(coords(u)) - u).max()
    out.append(("coords_roundtrip", rt < 1e-14, f"{rt:.1e}"))
    grid = Grid2D(33)
    _, vals = boundary_trace(BoundarySpec(0.3, 0.2), grid)
    idem = np.abs(vals @ vals - vals).max()
    out.append(("boundary_idempotent", idem < 1e-14, f"{idem:.1e}"))
    x = np.array([[0.5, 0.0]])
    hh = 1e-4
    du = (canonical_flat(x + [0, hh]) - canonical_flat(x - [0, hh])) / (2 * hh)
    j2 = (canonical_flat(x) @ du - du @ canonical_flat(x))[0]
    from .sym3core import LAMBDA
    jerr = np.linalg.norm(j2 + LAMBDA) / np.linalg.norm(LAMBDA)
    out.append(("canonical_current", jerr < 1e-3, f"rel error {jerr:.1e}"))
    return out


def _parse_list(text):
    if text is None:
        return None
    items = [t for t in text.split(",") if t.strip()]
    try:
        return [float(t) for t in items]
    except ValueError:
        raise ConfigError(f"could not parse number list {text!r}") from None


def _load_config(path, output_dir=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = RunConfig.from_json(p.read_text(), str(p))
    if output_dir is not None:
        cfg = replace(cfg, output_dir=str(output_dir))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldglab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="minimize and write a checkpoint")
    r.add_argument("--config", help="JSON run configuration (defaults if omitted)")
    r.add_argument("--output-dir")
    r.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    a = sub.add_parser("analyze", help="diagnostics and figure data from a checkpoint")
    a.add_argument("checkpoint")
    a.add_argument("--output-dir", required=True)
    a.add_argument("--radii", default="0.05,0.075,0.1,0.125,0.15")
    a.add_argument("--r-report", type=float, default=0.1)
    a.add_argument("--stride", type=int, default=4, help="node stride for field CSVs")
    a.add_argument("--no-green", action="store_true", help="skip the Green's-function terms")
    s = sub.add_parser("sweep", help="runs over epsilon and/or profiles over r")
    s.add_argument("--config")
    s.add_argument("--output-dir")
    s.add_argument("--epsilons", help="comma-separated list")
    s.add_argument("--radii", help="comma-separated list")
    t = sub.add_parser("selftest", help="fast property checks")
    t.add_argument("--samples", type=int, default=20000)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load_config(args.config, args.output_dir)
            if args.dump_config:
                print(cfg.to_json())
                return EXIT_OK
            man = cmd_run(cfg)
            print(f"run finished; outputs in {cfg.output_dir} ({len(man['files'])} files)")
        elif args.command == "analyze":
            radii = _parse_list(args.radii)
            if not radii:
                raise ConfigError("--radii must be nonempty")
            man = cmd_analyze(args.checkpoint, args.output_dir, tuple(radii), args.r_report,
                              args.stride, not args.no_green)
            print(f"analysis written to {args.output_dir} ({len(man['files'])} files)")
        elif args.command == "sweep":
            cfg = _load_config(args.config, args.output_dir)
            man = cmd_sweep(cfg, _parse_list(args.epsilons), _parse_list(args.radii))
            if man["failed"]:
                print(f"sweep finished with {len(man['failed'])} failed point(s)", file=sys.stderr)
                return EXIT_FAILURE
            print(f"sweep written to {cfg.output_dir}")
        elif args.command == "selftest":
            rows = cmd_selftest(args.samples)
            for name, ok, detail in rows:
                print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
            return EXIT_OK if all(ok for _, ok, _ in rows) else EXIT_FAILURE
    except (ConfigError, CoreUnresolved, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError) as e:
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
