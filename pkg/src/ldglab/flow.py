"""Gradient-flow minimization of the Landau-de Gennes energy on a grid.

The unknown is the trace-free part of ``u`` in 5 coordinates per node, so
the trace constraint (and its Lagrange multiplier) never appears.  The
discrete energy is assembled from per-cell weights: every grid cell
carries a weight in ``[0, 1]`` (1 on the full square, the covered area
fraction for a disc), edges get the mean weight of their two cells and
nodes a quarter of the sum over their four cells.  On the full square
this reduces to the usual 5-point Laplacian in the interior and
trapezoid quadrature for the potential.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .domain import BoundarySpec, Grid2D, boundary_trace, director_from_angle, disc_mask
from .sym3core import canonical_flat, coords, director_matrix, reconstruct

__all__ = [
    "CheckpointError",
    "CoreUnresolved",
    "DiscreteEnergy",
    "EnergyBreakdown",
    "EnergyIncrease",
    "FlowConfig",
    "FlowState",
    "MaxIterations",
    "energy",
    "initial_field",
    "load_checkpoint",
    "run_flow",
    "save_checkpoint",
    "solve_disc",
    "stable_dt",
    "step",
]

CHECKPOINT_MAGIC = b"LDGLAB-CKPT\n"
CHECKPOINT_VERSION = 1

_S2 = np.sqrt(2.0)
_S6 = np.sqrt(6.0)


class EnergyIncrease(RuntimeError):
    """A flow step raised the energy beyond round-off slack."""


class MaxIterations(RuntimeError):
    pass


class CheckpointError(ValueError):
    """Checkpoint file has the wrong magic, version or size."""


class CoreUnresolved(ValueError):
    """Grid spacing too coarse for the defect core (needs epsilon >= 2h)."""


@dataclass(frozen=True)
class FlowConfig:
    """Stopping and stepping controls.

    ``tol`` bounds the relative energy decrease over ``check_every``
    steps.  ``scheme`` is ``"explicit"``, ``"semi-implicit"`` (implicit
    Laplacian, explicit potential) or ``"lbfgs"`` (quasi-Newton descent on
    the same discrete energy followed by a gradient-flow polish).
    """

    tol: float = 1e-8
    max_iter: int = 200_000
    dt_safety: float = 0.5
    scheme: str = "lbfgs"
    check_every: int = 100
    residual_tol: float = 1e-4
    lbfgs_maxiter: int = 50_000
    lbfgs_memory: int = 20
    coarse_start: bool = True
    polish_windows: int = 50
    deterministic: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.dt_safety <= 1:
            raise ValueError("dt_safety must lie in (0, 1]")
        if self.scheme not in ("explicit", "semi-implicit", "lbfgs"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.max_iter < 1 or self.check_every < 1:
            raise ValueError("max_iter and check_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnergyBreakdown:
    dirichlet: float
    potential: float

    @property
    def total(self) -> float:
        return self.dirichlet + self.potential

    def to_dict(self) -> dict:
        return {"dirichlet": self.dirichlet, "potential": self.potential, "total": self.total}


@dataclass
class FlowState:
    grid: Grid2D
    q: np.ndarray
    epsilon: float
    beta: float
    dt: float
    iteration: int = 0
    energy: EnergyBreakdown | None = None
    boundary: BoundarySpec | None = None
    history: list = field(default_factory=list)

    @property
    def field(self) -> np.ndarray:
        return reconstruct(self.q)


def stable_dt(grid: Grid2D, epsilon: float, beta: float, safety: float = 0.5, scheme="explicit"):
    """Step size bound; the semi-implicit scheme drops the ``h^2/4`` term."""
    pot = epsilon**2 / (1.0 + beta)
    if scheme == "explicit":
        return safety * min(grid.h**2 / 4.0, pot)
    return safety * pot


def _split(A):
    q1, q2, q3, q4, q5 = A
    a11 = q1 / _S2 + q2 / _S6
    a22 = -q1 / _S2 + q2 / _S6
    a33 = -2.0 * q2 / _S6
    return a11, a22, a33, q3 / _S2, q4 / _S2, q5 / _S2


def potential_and_grad(Q, beta):
    """W_beta and its coordinate gradient for ``Q`` of shape ``(5, ...)``.

    Closed-form polynomial evaluation; the gradient of ``det`` is the
    cofactor matrix paired with the basis.
    """
    a11, a22, a33, a12, a13, a23 = _split(Q)
    c11 = a22 * a33 - a23 * a23
    c22 = a11 * a33 - a13 * a13
    c33 = a11 * a22 - a12 * a12
    c12 = a13 * a23 - a12 * a33
    c13 = a12 * a23 - a13 * a22
    c23 = a12 * a13 - a11 * a23
    det = a11 * c11 + a12 * c12 + a13 * c13
    qq = np.einsum("k...,k...->...", Q, Q)
    d = 2.0 / 3.0 - qq
    W = 0.25 * d * d - beta * (1.0 / 27.0 - qq / 6.0 + det)
    cof = np.stack(
        [
            (c11 - c22) / _S2,
            (c11 + c22 - 2.0 * c33) / _S6,
            _S2 * c12,
            _S2 * c13,
            _S2 * c23,
        ]
    )
    G = (beta / 3.0 - d) * Q - beta * cof
    return W, G


class DiscreteEnergy:
    """Weighted finite-difference energy on a grid with a free-node mask.

    ``cell_weight`` has shape ``(N-1, N-1)``; ``free`` marks the nodes
    that move.  Fields are ``(N, N, 5)`` arrays.
    """

    def __init__(self, grid: Grid2D, epsilon: float, beta: float, cell_weight=None, free=None):
        if not 1.0 <= beta < 3.0:
            raise ValueError(f"beta must lie in [1, 3), got {beta}")
        N = grid.N
        self.grid = grid
        self.epsilon = float(epsilon)
        self.beta = float(beta)
        cw = np.ones((N - 1, N - 1)) if cell_weight is None else np.asarray(cell_weight, float)
        pad = np.pad(cw, 1)
        self.ax = 0.5 * (pad[1:-1, :-1] + pad[1:-1, 1:])
        self.ay = 0.5 * (pad[:-1, 1:-1] + pad[1:, 1:-1])
        self.node_w = 0.25 * (pad[:-1, :-1] + pad[1:, :-1] + pad[:-1, 1:] + pad[1:, 1:])
        self.free = grid.interior_mask() if free is None else np.asarray(free, bool)
        self._pot_w = grid.h**2 * self.node_w / self.epsilon**2
        self._lap = None

    @property
    def nfree(self) -> int:
        return int(self.free.sum())

    # (5, N, N) layout internally
    def _value_grad(self, Q, need_grad=True):
        dx = Q[:, 1:, :] - Q[:, :-1, :]
        dy = Q[:, :, 1:] - Q[:, :, :-1]
        fx = self.ax * dx
        fy = self.ay * dy
        dirichlet = 0.5 * (np.sum(fx * dx) + np.sum(fy * dy))
        W, G = potential_and_grad(Q, self.beta)
        pot = float(np.sum(self._pot_w * W))
        if not need_grad:
            return dirichlet, pot, None
        grad = G * self._pot_w
        grad[:, 1:, :] += fx
        grad[:, :-1, :] -= fx
        grad[:, :, 1:] += fy
        grad[:, :, :-1] -= fy
        return dirichlet, pot, grad

    def breakdown(self, q) -> EnergyBreakdown:
        d, p, _ = self._value_grad(np.moveaxis(q, -1, 0), need_grad=False)
        return EnergyBreakdown(float(d), float(p))

    def gradient(self, q):
        """Energy gradient with respect to nodal coordinates, zero at fixed nodes."""
        _, _, g = self._value_grad(np.moveaxis(q, -1, 0))
        g[:, ~self.free] = 0.0
        return np.moveaxis(g, 0, -1)

    def residual(self, q):
        """Per-node ``-Delta_h q + grad W / eps^2`` on free nodes (gradient over h^2)."""
        return self.gradient(q) / self.grid.h**2

    def laplacian(self):
        """Sparse weighted graph Laplacian restricted to free nodes, and the
        coupling block to fixed nodes, both divided by ``h^2``."""
        if self._lap is None:
            N = self.grid.N
            idx = np.arange(N * N).reshape(N, N)
            rows, cols, vals = [], [], []
            for w, a, b in (
                (self.ax, idx[:-1, :], idx[1:, :]),
                (self.ay, idx[:, :-1], idx[:, 1:]),
            ):
                w, a, b = w.ravel(), a.ravel(), b.ravel()
                keep = w > 0
                w, a, b = w[keep], a[keep], b[keep]
                rows += [a, b, a, b]
                cols += [a, b, b, a]
                vals += [w, w, -w, -w]
            L = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(N * N, N * N),
            ) / self.grid.h**2
            f = self.free.ravel()
            self._lap = (L[f][:, f].tocsc(), L[f][:, ~f].tocsr())
        return self._lap


def energy(state: FlowState, model: DiscreteEnergy | None = None) -> EnergyBreakdown:
    model = model or DiscreteEnergy(state.grid, state.epsilon, state.beta)
    return model.breakdown(state.q)


def _check_energy(before: EnergyBreakdown, after: EnergyBreakdown, it: int):
    slack = 1e-12 * max(1.0, abs(before.total))
    if after.total > before.total + slack:
        raise EnergyIncrease(
            f"energy rose from {before.total:.15g} to {after.total:.15g} at iteration {it}; "
            "reduce dt"
        )


class _SemiImplicit:
    def __init__(self, model: DiscreteEnergy, dt: float):
        Lff, self.Lfb = model.laplacian()
        n = Lff.shape[0]
        self.lu = splu((sp.identity(n, format="csc") + dt * Lff).tocsc())
        self.dt = dt
        self.model = model

    def __call__(self, q):
        m = self.model
        free = m.free
        Q = np.moveaxis(q, -1, 0)
        _, G = potential_and_grad(Q, m.beta)
        Gf = (G * (m.node_w / m.epsilon**2))[:, free]
        qb = Q[:, ~free]
        rhs = Q[:, free] - self.dt * (Gf + (self.Lfb @ qb.T).T)
        new = q.copy()
        new[free] = self.lu.solve(np.ascontiguousarray(rhs.T))
        return new


def step(state: FlowState, config: FlowConfig, model: DiscreteEnergy | None = None,
         _solver=None) -> FlowState:
    """One gradient-flow step with a monotonicity check.

    Explicit: ``q <- q - dt * grad E / h^2`` on free nodes, which is
    ``q + dt (Delta_h q - grad W / eps^2)`` away from the boundary.
    """
    model = model or DiscreteEnergy(state.grid, state.epsilon, state.beta)
    before = state.energy or model.breakdown(state.q)
    if config.scheme == "semi-implicit":
        solver = _solver or _SemiImplicit(model, state.dt)
        q = solver(state.q)
    else:
        q = state.q - state.dt * model.residual(state.q)
    after = model.breakdown(q)
    _check_energy(before, after, state.iteration + 1)
    return replace(state, q=q, iteration=state.iteration + 1, energy=after)


def _mollified_flat(rho, alpha, beta_lat, eps):
    """Rank-two blend of the director and its in-plane partner.

    ``((1+eta)/2) n n^T + ((1-eta)/2) m m^T`` with ``eta = tanh(rho/eps)``;
    at ``rho = 0`` it is half the projection onto ``span(n, m)``.
    """
    n = director_from_angle(alpha, beta_lat)
    m = np.stack([-np.sin(alpha), np.cos(alpha), np.zeros_like(alpha)], axis=-1)
    eta = np.tanh(rho / eps)[..., None, None]
    return 0.5 * (1 + eta) * director_matrix(n) + 0.5 * (1 - eta) * director_matrix(m)


def initial_field(grid: Grid2D, spec: BoundarySpec, epsilon: float, center=None):
    """Degree-1/2 initial guess with a mollified core at ``center``.

    The boundary perturbation is switched on over the outer 20% of the
    domain so that the boundary nodes carry the exact data.
    """
    c = grid.center if center is None else np.asarray(center, float)
    pts = grid.points()
    dxy = pts - c
    rho = np.hypot(dxy[..., 0], dxy[..., 1])
    theta = np.mod(np.arctan2(dxy[..., 1], dxy[..., 0]), 2 * np.pi)
    lo = np.array(grid.origin)
    dist_b = np.minimum(pts - lo, lo + grid.side - pts).min(axis=-1)
    w = np.clip(1.0 - dist_b / (0.2 * grid.side), 0.0, 1.0)
    alpha = 0.5 * theta + w * spec.delta1 * np.sin(theta + spec.phase1)
    beta_lat = w * spec.delta2 * np.sin(0.5 * (theta + spec.phase2))
    q = coords(_mollified_flat(rho, alpha, beta_lat, epsilon))
    idx, vals = boundary_trace(spec, grid)
    q[idx[:, 0], idx[:, 1]] = coords(vals)
    return q


def _prolong(qc, N):
    """Bilinear prolongation from ``(N+1)/2`` nodes per side to ``N``."""
    q = np.empty((N, N, qc.shape[-1]))
    q[::2, ::2] = qc
    q[1::2, ::2] = 0.5 * (qc[:-1] + qc[1:])
    q[:, 1::2] = 0.5 * (q[:, :-2:2] + q[:, 2::2])
    return q


def _lbfgs(model: DiscreteEnergy, q0, config: FlowConfig):
    """Preconditioned L-BFGS on the free coordinates.

    The initial inverse Hessian of the two-loop recursion is the inverse
    of ``L + (h/eps)^2 I`` (weighted graph Laplacian plus a potential
    shift), factorized once; this removes the ``1/h^2`` stiffness that
    otherwise dominates the iteration count.  Steps use Armijo
    backtracking from the unit step.  Stops when the RMS residual drops
    below ``residual_tol`` times its initial value.
    """
    free = model.free
    Q = np.ascontiguousarray(np.moveaxis(q0, -1, 0))
    h2 = model.grid.h**2
    Lff, _ = model.laplacian()
    n = Lff.shape[0]
    shift = model.node_w[free] / model.epsilon**2
    lu = splu((Lff + sp.diags(shift)).tocsc() * h2)

    def precond(v):
        return lu.solve(np.ascontiguousarray(v.reshape(5, n).T)).T.ravel()

    def fun(x):
        Q[:, free] = x.reshape(5, n)
        d, p, g = model._value_grad(Q)
        return d + p, g[:, free].ravel()

    x = Q[:, free].ravel().copy()
    f, g = fun(x)
    r0 = np.sqrt(np.mean(g**2)) / h2
    res = 1.0
    S, Y, RHO = [], [], []
    nit = 0
    history = [float(f)]
    while nit < config.lbfgs_maxiter:
        res = np.sqrt(np.mean(g**2)) / h2 / max(r0, 1e-300)
        if res < config.residual_tol:
            break
        v = g.copy()
        coef = []
        for s_, y_, rho in zip(reversed(S), reversed(Y), reversed(RHO)):
            a = rho * (s_ @ v)
            coef.append(a)
            v -= a * y_
        v = precond(v)
        for (s_, y_, rho), a in zip(zip(S, Y, RHO), reversed(coef)):
            b = rho * (y_ @ v)
            v += (a - b) * s_
        d = -v
        slope = g @ d
        if slope >= 0:
            S, Y, RHO = [], [], []
            d = -precond(g)
            slope = g @ d
        t = 1.0
        for _ in range(40):
            xn = x + t * d
            fn, gn = fun(xn)
            if fn <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        s_, y_ = xn - x, gn - g
        sy = s_ @ y_
        if sy > 1e-12 * np.sqrt((s_ @ s_) * (y_ @ y_)):
            S.append(s_)
            Y.append(y_)
            RHO.append(1.0 / sy)
            if len(S) > config.lbfgs_memory:
                S.pop(0), Y.pop(0), RHO.pop(0)
        x, f, g = xn, fn, gn
        nit += 1
        history.append(float(f))
    Q[:, free] = x.reshape(5, n)
    return np.moveaxis(Q, 0, -1).copy(), nit, res, history


def _descend(model: DiscreteEnergy, q, config: FlowConfig, dt: float, it0: int = 0,
             max_windows=None):
    """Flow until the relative energy drop per window falls below ``tol``."""
    grid = model.grid
    state = FlowState(grid, q, model.epsilon, model.beta, dt, it0, model.breakdown(q))
    cfg = replace(config, scheme="explicit") if config.scheme == "lbfgs" else config
    solver = _SemiImplicit(model, dt) if cfg.scheme == "semi-implicit" else None
    history = [state.energy.total]
    windows = 0
    while True:
        e_start = state.energy.total
        for _ in range(config.check_every):
            state = step(state, cfg, model, _solver=solver)
        history.append(state.energy.total)
        windows += 1
        drop = (e_start - state.energy.total) / max(abs(state.energy.total), 1e-300)
        if drop < config.tol:
            break
        if state.iteration - it0 >= config.max_iter:
            raise MaxIterations(
                f"no convergence after {config.max_iter} steps (last relative drop {drop:.3g})"
            )
        if max_windows is not None and windows >= max_windows:
            break
    state.history = history
    return state


def _minimize(model: DiscreteEnergy, q0, config: FlowConfig):
    if config.scheme == "lbfgs":
        q, nit, res, hist = _lbfgs(model, q0, config)
        if res >= config.residual_tol and nit >= config.lbfgs_maxiter:
            raise MaxIterations(f"L-BFGS stopped at relative residual {res:.3g} after {nit} iterations")
        dt = stable_dt(model.grid, model.epsilon, model.beta, config.dt_safety, "explicit")
        state = _descend(model, q, config, dt, it0=nit, max_windows=config.polish_windows)
        state.history = hist + state.history[1:]
        return state
    dt = stable_dt(model.grid, model.epsilon, model.beta, config.dt_safety, config.scheme)
    return _descend(model, q0, config, dt)


def run_flow(grid: Grid2D, boundary: BoundarySpec, epsilon: float, beta: float,
             config: FlowConfig = FlowConfig(), q0=None) -> FlowState:
    """Minimize the discrete energy with Dirichlet data from ``boundary``."""
    if epsilon < 2 * grid.h:
        raise CoreUnresolved(
            f"epsilon={epsilon} is below 2h={2 * grid.h:.6g}; refine the grid"
        )
    model = DiscreteEnergy(grid, epsilon, beta)
    if q0 is None:
        q0 = initial_field(grid, boundary, epsilon)
        Nc = (grid.N + 1) // 2
        if (config.scheme == "lbfgs" and config.coarse_start and grid.N % 2 == 1
                and Nc >= 65 and epsilon >= 2 * grid.side / (Nc - 1)):
            coarse = Grid2D(Nc, grid.side, grid.origin)
            sc = run_flow(coarse, boundary, epsilon, beta, replace(config, polish_windows=1))
            q0 = _prolong(sc.q, grid.N)
            idx, vals = boundary_trace(boundary, grid)
            q0[idx[:, 0], idx[:, 1]] = coords(vals)
    state = _minimize(model, q0, config)
    state.boundary = boundary
    return state


def solve_disc(r: float, epsilon: float, beta: float, h: float,
               config: FlowConfig = FlowConfig()) -> EnergyBreakdown:
    """I(r, eps): minimal energy on ``B_r`` with canonical flat data outside.

    The disc sits at a node of a local grid of spacing ``h``.  Cells cut
    by the circle carry their covered area fraction, and nodes outside
    the open disc are held at the canonical flat map.
    """
    if r / epsilon < 2:
        raise ValueError(f"solve_disc needs r/eps >= 2, got {r / epsilon}")
    if epsilon < 2 * h:
        raise CoreUnresolved(f"epsilon={epsilon} is below 2h={2 * h:.6g}")
    half = int(np.ceil(r / h)) + 2
    N = 2 * half + 1
    side = (N - 1) * h
    grid = Grid2D(N, side, (-half * h, -half * h))
    a = np.zeros(2)
    mask = disc_mask(grid, a, r)
    model = DiscreteEnergy(grid, epsilon, beta, cell_weight=mask.cell_fraction, free=mask.inside)
    pts = grid.points()
    rho = np.hypot(pts[..., 0], pts[..., 1])
    theta = np.arctan2(pts[..., 1], pts[..., 0])
    q0 = coords(_mollified_flat(rho, 0.5 * theta, np.zeros_like(theta), epsilon))
    out = ~mask.inside
    q0[out] = coords(canonical_flat(pts[out], a))
    state = _minimize(model, q0, config)
    return state.energy


# -- checkpoints -------------------------------------------------------------
#
# Layout: the magic line, a little-endian uint64 header length, a UTF-8
# JSON header, then N*N*5 little-endian float64 values in C order of the
# (N, N, 5) array (node (i, j) at x = x0 + i h, y = y0 + j h).


def save_checkpoint(path, state: FlowState) -> Path:
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "grid": state.grid.to_dict(),
        "epsilon": state.epsilon,
        "beta": state.beta,
        "dt": state.dt,
        "iteration": state.iteration,
        "energy": state.energy.to_dict() if state.energy else None,
        "boundary": state.boundary.to_dict() if state.boundary else None,
        "dtype": "<f8",
        "shape": list(state.q.shape),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(state.q, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> FlowState:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format {header.get('format_version')} is not supported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        shape = tuple(header["shape"])
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != np.prod(shape):
        raise CheckpointError(f"{path}: expected {np.prod(shape)} values, found {data.size}")
    grid = Grid2D.from_dict(header["grid"])
    en = header.get("energy")
    bd = header.get("boundary")
    return FlowState(
        grid=grid,
        q=data.reshape(shape).astype(float),
        epsilon=header["epsilon"],
        beta=header["beta"],
        dt=header["dt"],
        iteration=header["iteration"],
        energy=EnergyBreakdown(en["dirichlet"], en["potential"]) if en else None,
        boundary=BoundarySpec(**bd) if bd else None,
    )
