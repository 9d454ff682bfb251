"""Post-processing of computed fields: eigenframes, the defect, the current
vector, the Hopf differential, ``g``, radial diagnostics, potentials,
Green's function and the energy expansion report.

Fields are ``(N, N, 3, 3)`` arrays on a :class:`~ldglab.domain.Grid2D`.
Derivatives are second-order central differences (one-sided at the
boundary).  Quantities of the limit map near the defect (lengths,
latitude, ``Lambda``, potentials) are evaluated on the pointwise nearest
projection of the field, which removes the ``O(eps^2/r^2)`` deviation
from the projection manifold; the Hopf differential uses the field
itself.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import splu

from .domain import (
    CircleOutOfDomain,
    Grid2D,
    cell_disc_fractions,
    circle_points,
    interpolate,
)
from .sym3core import (
    LAMBDA,
    antisym_to_vec,
    commutator,
    coords,
    flat_from_angle,
    inner,
    project_field,
    reconstruct,
    vec_to_antisym,
)

__all__ = [
    "ClosureDefect",
    "ComplexScalarField",
    "DefectInfo",
    "DegenerateLambda",
    "EigenframeField",
    "ExpansionReport",
    "GreenFunction",
    "InsufficientSupport",
    "LatitudeTooLarge",
    "LiftResult",
    "MultipleDefects",
    "NoDefect",
    "OmegaVanishes",
    "Potentials",
    "RadialProfile",
    "SingularOverlap",
    "UnwrapInconsistent",
    "area_density",
    "current_vector",
    "eigenframe",
    "energy_expansion_report",
    "extract_g",
    "extract_lambda",
    "geodesic_length_profile",
    "green_function",
    "hopf_differential",
    "hopf_profile",
    "holonomy",
    "linear_fit_r2",
    "lift_angles",
    "locate_defect",
    "mu_magnitude",
    "radial_decay_diagnostics",
    "recover_potentials",
    "sinh_gordon_residual",
]


class NoDefect(ValueError):
    pass


class MultipleDefects(ValueError):
    pass


class OmegaVanishes(ValueError):
    pass


class InsufficientSupport(ValueError):
    """No node where the sinh-Gordon source exceeds the noise floor."""


class LatitudeTooLarge(ValueError):
    pass


class UnwrapInconsistent(ValueError):
    pass


class DegenerateLambda(ValueError):
    pass


class ClosureDefect(ValueError):
    pass


class SingularOverlap(ValueError):
    pass


DEFECT_THRESHOLD = 0.2
DEGENERATE_GAP = 1e-8
OMEGA_FLOOR = 1e-8


def gradient(f, grid: Grid2D):
    """``(d/dx f, d/dy f)`` stacked on a new leading axis."""
    d = np.gradient(f, grid.h, axis=(0, 1), edge_order=2)
    return np.stack(d)


def _rho(grid: Grid2D, a):
    pts = grid.points()
    return np.hypot(pts[..., 0] - a[0], pts[..., 1] - a[1])


def _theta(grid: Grid2D, a):
    pts = grid.points()
    return np.arctan2(pts[..., 1] - a[1], pts[..., 0] - a[0])


def _check_circle(grid: Grid2D, a, r):
    a = np.asarray(a, float)
    if r <= 0 or not (grid.contains(a - r) and grid.contains(a + r)):
        raise CircleOutOfDomain(f"circle at {a.tolist()} with r={r} leaves the grid")


def circle_values(grid: Grid2D, data, a, r, m=512):
    """Bilinear samples of a node array on ``|x - a| = r``."""
    _check_circle(grid, a, r)
    theta, pts = circle_points(a, r, m)
    return theta, interpolate(grid, data, pts)


# -- eigenframes -------------------------------------------------------------


@dataclass
class EigenframeField:
    """Eigenvalues sorted descending and matching unit eigenvectors.

    ``vectors[..., :, k]`` is ``e_{k+1}``.  ``sign_jump[..., k]`` marks
    nodes where ``e_{k+1}`` flips against a neighbour after alignment;
    ``degenerate[..., k]`` marks nodes where it is not determined.
    """

    values: np.ndarray
    vectors: np.ndarray
    sign_jump: np.ndarray
    degenerate: np.ndarray

    def has_jumps(self, k: int) -> bool:
        return bool(np.any(self.sign_jump[..., k] & ~self.degenerate[..., k]))


def _flip_to(v, ref):
    s = np.sign(np.einsum("...ik,...ik->...k", v, ref))
    v *= np.where(s == 0, 1.0, s)[..., None, :]


def _align_signs(v):
    """Make eigenvectors agree in sign with their neighbours along a spanning tree.

    The tree runs down the middle column, then out along every row, so it
    never passes through the boundary ring where projection-valued data
    leaves the lower eigenvectors undetermined; boundary nodes are matched
    to their inner neighbours last.
    """
    N, M = v.shape[:2]
    c = M // 2
    for i in range(2, N - 1):
        _flip_to(v[i, c], v[i - 1, c])
    for j in range(c + 1, M - 1):
        _flip_to(v[1:-1, j], v[1:-1, j - 1])
    for j in range(c - 1, 0, -1):
        _flip_to(v[1:-1, j], v[1:-1, j + 1])
    _flip_to(v[0, 1:-1], v[1, 1:-1])
    _flip_to(v[-1, 1:-1], v[-2, 1:-1])
    _flip_to(v[:, 0], v[:, 1])
    _flip_to(v[:, -1], v[:, -2])


def eigenframe(u) -> EigenframeField:
    w, v = np.linalg.eigh(u)
    w = w[..., ::-1].copy()
    v = v[..., ::-1].copy()
    _align_signs(v)
    gap = np.abs(np.diff(w, axis=-1))
    degenerate = np.zeros(w.shape, bool)
    degenerate[..., 0] = gap[..., 0] < DEGENERATE_GAP
    degenerate[..., 1] = (gap[..., 0] < DEGENERATE_GAP) | (gap[..., 1] < DEGENERATE_GAP)
    degenerate[..., 2] = gap[..., 1] < DEGENERATE_GAP
    # a flip only counts between two determined neighbours
    ok = ~degenerate
    jump = np.zeros(w.shape, bool)
    dx = (np.einsum("...ik,...ik->...k", v[1:], v[:-1]) < 0) & ok[1:] & ok[:-1]
    dy = (np.einsum("...ik,...ik->...k", v[:, 1:], v[:, :-1]) < 0) & ok[:, 1:] & ok[:, :-1]
    jump[1:] |= dx
    jump[:-1] |= dx
    jump[:, 1:] |= dy
    jump[:, :-1] |= dy
    return EigenframeField(w, v, jump, degenerate)


def holonomy(grid: Grid2D, frame: EigenframeField, k: int, a, r, m=720) -> int:
    """Sign picked up by ``e_{k+1}`` transported once around ``|x - a| = r``.

    ``-1`` is a half-integer winding, ``+1`` a single-valued vector.
    """
    _check_circle(grid, a, r)
    _, pts = circle_points(a, r, m)
    ij = np.rint((pts - np.array(grid.origin)) / grid.h).astype(int)
    vecs = frame.vectors[ij[:, 0], ij[:, 1], :, k]
    s = 1.0
    for t in range(m):
        s *= np.sign(vecs[(t + 1) % m] @ vecs[t]) or 1.0
    return int(s)


@dataclass
class DefectInfo:
    location: np.ndarray
    gap: float
    eigenvalues: np.ndarray
    index: tuple

    def to_dict(self) -> dict:
        return {
            "location": self.location.tolist(),
            "gap": self.gap,
            "eigenvalues": self.eigenvalues.tolist(),
            "index": list(self.index),
        }


def _parabolic_offset(fm, f0, fp):
    den = fm - 2 * f0 + fp
    if den <= 0:
        return 0.0
    return float(np.clip(0.5 * (fm - fp) / den, -0.5, 0.5))


def locate_defect(grid: Grid2D, frame: EigenframeField, threshold=DEFECT_THRESHOLD) -> DefectInfo:
    """Eigenvalue crossing point: subpixel minimum of ``lambda1 - lambda2``."""
    gap = frame.values[..., 0] - frame.values[..., 1]
    inner_gap = gap[1:-1, 1:-1]
    if inner_gap.min() >= threshold:
        raise NoDefect(f"eigenvalue gap never drops below {threshold} (min {inner_gap.min():.3g})")
    labels, count = ndimage.label(inner_gap < threshold)
    if count > 1:
        mins = ndimage.minimum(inner_gap, labels, range(1, count + 1))
        raise MultipleDefects(f"{count} separate low-gap regions with minima {np.round(mins, 4).tolist()}")
    i, j = np.unravel_index(np.argmin(inner_gap), inner_gap.shape)
    i, j = i + 1, j + 1
    di = _parabolic_offset(gap[i - 1, j], gap[i, j], gap[i + 1, j])
    dj = _parabolic_offset(gap[i, j - 1], gap[i, j], gap[i, j + 1])
    loc = np.array(grid.origin) + grid.h * np.array([i + di, j + dj])
    return DefectInfo(loc, float(gap[i, j]), frame.values[i, j].copy(), (int(i), int(j)))


# -- current vector and Hopf differential ------------------------------------


def current_vector(u, grid: Grid2D):
    """``(j1, j2)`` with ``j_k = [u, d_k u]``, shape ``(2, N, N, 3, 3)``."""
    du = gradient(u, grid)
    return commutator(u[None], du)


def current_identity_residual(u, grid: Grid2D, mask):
    """``|grad u - [u, j(u)]| / |grad u|`` over ``mask``; zero on projection-valued maps."""
    du = gradient(u, grid)
    j = commutator(u[None], du)
    res = du - commutator(u[None], j)
    num = np.sqrt(np.sum(inner(res, res)[:, mask]))
    den = np.sqrt(np.sum(inner(du, du)[:, mask]))
    return float(num / den)


@dataclass
class ComplexScalarField:
    values: np.ndarray
    valid: np.ndarray


def _dz(u, grid: Grid2D):
    d1, d2 = gradient(u, grid)
    return 0.5 * (d1 - 1j * d2)


def annulus_mask(grid: Grid2D, a, inner_r, outer_r=None):
    a = np.asarray(a, float)
    if outer_r is None:
        lo = np.array(grid.origin)
        outer_r = 0.5 * float(min(np.min(a - lo), np.min(lo + grid.side - a)))
    rho = _rho(grid, a)
    return (rho > inner_r) & (rho < outer_r)


def hopf_differential(u, grid: Grid2D, defect: DefectInfo, epsilon: float) -> ComplexScalarField:
    """``omega = -tr((du/dz)^2)`` with ``d/dz = (d1 - i d2)/2``.

    Values are computed everywhere; ``valid`` marks the annulus
    ``3 eps < |x - a| < dist(a, boundary)/2``.
    """
    uz = _dz(u, grid)
    omega = -np.einsum("...ij,...ji->...", uz, uz)
    return ComplexScalarField(omega, annulus_mask(grid, defect.location, 3 * epsilon))


def mu_magnitude(omega: ComplexScalarField):
    """``|mu|`` from ``-2 mu^2 = omega``."""
    return np.sqrt(0.5 * np.abs(omega.values))


def area_density(u, grid: Grid2D):
    """``|[conj(j_C), j_C]|`` with ``j_C = [u, du/dz]`` (the area factor)."""
    uz = _dz(u, grid)
    jc = commutator(u.astype(complex), uz)
    c = commutator(np.conj(jc), jc)
    return np.sqrt(np.real(np.einsum("...ij,...ij->...", np.conj(c), c)))


def hopf_profile(omega: ComplexScalarField, grid: Grid2D, defect: DefectInfo, radii, m=512) -> RadialProfile:
    """Circle means of ``|(z-a) mu|``, ``1/|mu|`` and ``(z-a)^2 omega``."""
    a = defect.location
    zmu, inv, re, im = [], [], [], []
    for r in radii:
        theta, w = circle_values(grid, omega.values, a, r, m)
        mu = np.sqrt(0.5 * np.abs(w))
        zmu.append(np.mean(r * mu))
        inv.append(np.mean(1.0 / mu))
        z2w = np.mean((r * np.exp(1j * theta)) ** 2 * w)
        re.append(z2w.real)
        im.append(z2w.imag)
    return RadialProfile(radii, {"zmu": np.array(zmu), "inv_mu": np.array(inv),
                                 "z2omega_re": np.array(re), "z2omega_im": np.array(im)})


def linear_fit_r2(x, y):
    """Slope, intercept and coefficient of determination of a straight-line fit."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    c = np.polyfit(x, y, 1)
    res = y - np.polyval(c, x)
    return float(c[0]), float(c[1]), float(1 - res @ res / np.sum((y - y.mean()) ** 2))


def extract_g(u, grid: Grid2D, omega: ComplexScalarField, floor=OMEGA_FLOOR, strict=True):
    """Nonnegative ``g = asinh(sqrt(2) |[conj j_C, j_C]| / |omega|) / 2``.

    NaN outside the valid mask and where ``|omega| <= floor``; with
    ``strict`` such vanishing points inside the mask raise.
    """
    area = area_density(u, grid)
    absw = np.abs(omega.values)
    small = omega.valid & (absw <= floor)
    if strict and np.any(small):
        raise OmegaVanishes(f"|omega| <= {floor} at {int(small.sum())} annulus nodes")
    g = np.full(absw.shape, np.nan)
    ok = omega.valid & ~small
    g[ok] = 0.5 * np.arcsinh(np.sqrt(2.0) * area[ok] / absw[ok])
    return g


def omega_sinh2_density(u, grid: Grid2D, omega: ComplexScalarField):
    """``|omega| sinh^2 g`` in the form ``(sqrt(|w|^2 + 2A^2) - |w|)/2``, regular at zeros of omega."""
    area = area_density(u, grid)
    absw = np.abs(omega.values)
    return 0.5 * (np.sqrt(absw**2 + 2.0 * area**2) - absw)


def _laplacian5(f, h):
    out = np.full(f.shape, np.nan)
    out[1:-1, 1:-1] = (
        f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4 * f[1:-1, 1:-1]
    ) / h**2
    return out


def sinh_gordon_residual(g, omega_abs, grid: Grid2D, noise_floor=1e-3):
    """Relative L2 residual of ``-Delta g = |omega| sinh(2g)``.

    Evaluated at nodes whose 5-point stencil is inside the support of
    ``g`` (non-NaN) and where ``sinh(2g) > noise_floor``.
    """
    lap = _laplacian5(g, grid.h)
    src = omega_abs * np.sinh(2 * g)
    sel = np.isfinite(lap) & np.isfinite(src) & (np.sinh(2 * np.nan_to_num(g)) > noise_floor)
    if not np.any(sel):
        raise InsufficientSupport("sinh(2g) never exceeds the noise floor; residual not applicable")
    return float(np.linalg.norm(lap[sel] + src[sel]) / np.linalg.norm(src[sel]))


# -- radial diagnostics ------------------------------------------------------


@dataclass
class RadialProfile:
    radii: np.ndarray
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, float)
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("radii must be increasing")

    def __getitem__(self, key):
        return self.values[key]

    def to_rows(self):
        keys = list(self.values)
        return keys, [[r] + [float(self.values[k][i]) for k in keys] for i, r in enumerate(self.radii)]


def _projected_samples(u, grid, a, r, m):
    _check_circle(grid, a, r)
    theta, pts = circle_points(a, r, m)
    vals = reconstruct(interpolate(grid, coords(u), pts))
    P, n = project_field(vals)
    # orient n continuously along the circle
    for t in range(1, m):
        if n[t] @ n[t - 1] < 0:
            n[t] = -n[t]
    return theta, vals, P, n


def geodesic_length_profile(u, grid: Grid2D, defect: DefectInfo, radii, m=512) -> RadialProfile:
    """Length of ``theta -> u(a + r e^{i theta})`` and its distance from a closed geodesic.

    ``length`` uses the nearest projection of the samples and
    ``length_raw`` the samples themselves.  ``geodesic_distance`` is
    ``sqrt(2) max_k |n_k . nu|`` where ``nu`` is normal to the principal
    2-plane of ``sum n n^T``, i.e. the largest distance from a sample to
    the best-fit closed geodesic.
    """
    a = defect.location
    L, Lraw, dist = [], [], []
    for r in radii:
        _, vals, P, n = _projected_samples(u, grid, a, r, m)
        L.append(np.sum(np.linalg.norm(np.roll(P, -1, axis=0) - P, axis=(1, 2))))
        Lraw.append(np.sum(np.linalg.norm(np.roll(vals, -1, axis=0) - vals, axis=(1, 2))))
        _, vecs = np.linalg.eigh(n.T @ n / m)
        dist.append(np.sqrt(2.0) * np.max(np.abs(n @ vecs[:, 0])))
    return RadialProfile(radii, {"length": np.array(L), "length_raw": np.array(Lraw),
                                 "geodesic_distance": np.array(dist)})


def frame_from_lambda(Lam):
    """Rotation ``R`` with ``R e3`` the kernel direction of ``Lam``; the
    smallest such rotation, so ``R = I`` for the canonical matrix."""
    w = antisym_to_vec(Lam)
    w = w / np.linalg.norm(w)
    e3 = np.array([0.0, 0.0, 1.0])
    c = float(w @ e3)
    v = np.cross(e3, w)
    s = np.linalg.norm(v)
    if s < 1e-14:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    K = vec_to_antisym(v / s)
    return np.eye(3) + s * K + (1 - c) * K @ K


def radial_decay_diagnostics(u, grid: Grid2D, defect: DefectInfo, P3, Lam, radii, m=512):
    """Per radius: ``sup <u,P3>``, ``sup |[u,P3]|``, ``sup |[Lambda,[u,u0]]|``.

    ``u0`` is the canonical flat map at the defect, rotated so that its
    image is the closed geodesic of ``Lambda``.
    """
    a = defect.location
    R = frame_from_lambda(Lam)
    lat, com, lam = [], [], []
    for r in radii:
        theta, _, P, _ = _projected_samples(u, grid, a, r, m)
        u0 = R @ flat_from_angle(theta) @ R.T
        lat.append(np.max(np.abs(inner(P, P3))))
        com.append(np.max(np.linalg.norm(commutator(P, P3), axis=(1, 2))))
        lam.append(np.max(np.linalg.norm(commutator(Lam, commutator(P, u0)), axis=(1, 2))))
    return RadialProfile(radii, {"latitude": np.array(lat), "commutator_P3": np.array(com),
                                 "commutator_u0": np.array(lam)})


@dataclass
class LiftResult:
    radii: np.ndarray
    theta: np.ndarray
    alpha1: np.ndarray
    beta_lat: np.ndarray
    alpha_star: float

    def deviation(self):
        """Circle mean of ``|alpha1 - alpha*|`` per radius."""
        return np.mean(np.abs(self.alpha1 - self.alpha_star), axis=1)


def lift_angles(u, grid: Grid2D, defect: DefectInfo, radii, Lam=LAMBDA, m=512) -> LiftResult:
    """Longitude/latitude of the leading eigenvector on circles around ``a``.

    Angles are measured in the frame where ``Lambda`` is the canonical
    matrix (``P3 = e3 e3^T``).  ``alpha1 = 2 alpha - theta`` is single
    valued; ``alpha*`` is its mean on the innermost circle.
    """
    a = defect.location
    R = frame_from_lambda(Lam)
    radii = np.sort(np.asarray(radii, float))
    A1, B = [], []
    theta = None
    for r in radii:
        theta, _, _, n = _projected_samples(u, grid, a, r, m)
        n = n @ R
        if np.max(n[:, 2] ** 2) >= 0.5:
            raise LatitudeTooLarge(f"<u, P3> reaches {np.max(n[:, 2] ** 2):.3f} at r={r}")
        phi = 2.0 * np.arctan2(n[:, 1], n[:, 0])
        dphi = np.angle(np.exp(1j * np.diff(np.append(phi, phi[0]))))
        total = dphi.sum()
        if abs(0.5 * total - np.pi) > 0.1:
            raise UnwrapInconsistent(f"longitude advances by {0.5 * total:.3f} around r={r}, expected pi")
        phi_c = phi[0] + np.concatenate([[0.0], np.cumsum(dphi[:-1])])
        a1 = phi_c - theta
        a1 = a1 - 2 * np.pi * np.round(a1[0] / (2 * np.pi))
        A1.append(a1)
        B.append(np.arcsin(np.clip(n[:, 2], -1, 1)))
    A1 = np.array(A1)
    return LiftResult(radii, theta, A1, np.array(B), float(np.mean(A1[0])))


def extract_lambda(j, grid: Grid2D, defect: DefectInfo, r0=0.1, m=512):
    """``Lambda`` from the circulation of ``j . theta_hat`` and ``P3`` from its kernel.

    Near the defect ``j ~ grad_perp(ln(1/r) Lambda / 2) = -theta_hat Lambda / (2r)``,
    so ``Lambda_raw = -(1/pi) * circulation``.  Returns ``(Lambda, P3, |Lambda_raw|)``.
    """
    a = defect.location
    _check_circle(grid, a, r0)
    theta, pts = circle_points(a, r0, m)
    j1 = interpolate(grid, j[0], pts)
    j2 = interpolate(grid, j[1], pts)
    jt = -np.sin(theta)[:, None, None] * j1 + np.cos(theta)[:, None, None] * j2
    raw = -jt.mean(axis=0) * 2 * np.pi * r0 / np.pi
    norm = np.linalg.norm(raw)
    if norm < 0.5 * np.sqrt(2):
        raise DegenerateLambda(f"|Lambda_raw| = {norm:.3g} is below half the expected sqrt(2)")
    Lam = np.sqrt(2) * raw / norm
    Lam = 0.5 * (Lam - Lam.T)
    Lam *= np.sqrt(2) / np.linalg.norm(Lam)
    if inner(Lam, LAMBDA) < 0:
        Lam = -Lam
    k = antisym_to_vec(Lam)
    k /= np.linalg.norm(k)
    return Lam, np.outer(k, k), norm


# -- Green's function ----------------------------------------------------------


def _dirichlet_laplacian(free, h):
    """``-Delta_h`` (5-point) on the ``free`` nodes with zero data elsewhere."""
    N = free.shape[0]
    idx = -np.ones(free.shape, int)
    idx[free] = np.arange(free.sum())
    rows, cols, vals = [], [], []
    I, J = np.nonzero(free)
    me = idx[I, J]
    rows.append(me)
    cols.append(me)
    vals.append(np.full(me.size, 4.0 / h**2))
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ii, jj = I + di, J + dj
        ok = (ii >= 0) & (ii < N) & (jj >= 0) & (jj < N)
        nb = np.full(me.size, -1)
        nb[ok] = idx[ii[ok], jj[ok]]
        keep = nb >= 0
        rows.append(me[keep])
        cols.append(nb[keep])
        vals.append(np.full(keep.sum(), -1.0 / h**2))
    n = int(free.sum())
    return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


@dataclass
class GreenFunction:
    G: np.ndarray
    robin: float
    a: np.ndarray

    def regular_part(self, grid: Grid2D):
        rho = _rho(grid, self.a)
        with np.errstate(divide="ignore"):
            return self.G - np.log(1.0 / rho) / (2 * np.pi)


def green_function(grid: Grid2D, a, free=None, fit_range=(4, 12)) -> GreenFunction:
    """Discrete Dirichlet Green's function with pole at ``a`` and ``R(a, a)``.

    Solves ``-Delta_h G = delta_h(a)`` (unit mass spread bilinearly over
    the four surrounding nodes).  ``R(a, a)`` is extrapolated from the
    regular part sampled at ``k h`` along the axis and diagonal directions
    (all eight), whose average cancels the leading lattice anisotropy.
    """
    a = np.asarray(a, float)
    h = grid.h
    if free is None:
        free = grid.interior_mask()
    if not grid.contains(a, margin=h):
        raise ValueError("pole must be interior")
    f = (a - np.array(grid.origin)) / h
    i0, j0 = np.floor(f).astype(int)
    tx, ty = f - [i0, j0]
    rhs = np.zeros(free.shape)
    for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                      (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        rhs[i0 + di, j0 + dj] += w / h**2
    A = _dirichlet_laplacian(free, h)
    G = np.zeros(free.shape)
    G[free] = splu(A).solve(rhs[free])
    gf = GreenFunction(G, np.nan, a)
    Rg = gf.regular_part(grid)
    ks = np.arange(fit_range[0], fit_range[1] + 1)
    d = ks * h
    samples = [0.5 * (_ring_mean(grid, Rg, a, dk, 0.0) + _ring_mean(grid, Rg, a, dk, np.pi / 4)) for dk in d]
    gf.robin = float(np.polyfit(d**2, samples, 1)[-1])
    return gf


def _ring_mean(grid, Rg, a, d, phase):
    """Mean of ``Rg`` at the four points ``a + d e^{i(phase + k pi/2)}``."""
    ang = phase + 0.5 * np.pi * np.arange(4)
    pts = a + d * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    return float(np.mean(interpolate(grid, Rg, pts)))


# -- potentials ----------------------------------------------------------------


@dataclass
class Potentials:
    psi: np.ndarray
    phi: np.ndarray
    phi1: np.ndarray | None
    closure: float
    variation: float
    profile: RadialProfile | None


def _boundary_potential(j, grid: Grid2D):
    """Integrate ``dPsi/dtau = -j . nu`` counterclockwise around the square.

    Returns the boundary values (as 3-vectors) on a ``(N, N, 3)`` array,
    the closure defect and the total variation.
    """
    N = grid.N
    h = grid.h
    jv = antisym_to_vec(j)  # (2, N, N, 3)
    # counterclockwise node path and outward normals per edge
    edges = [
        ([(i, 0) for i in range(N)], (0.0, -1.0)),
        ([(N - 1, jj) for jj in range(N)], (1.0, 0.0)),
        ([(i, N - 1) for i in range(N - 1, -1, -1)], (0.0, 1.0)),
        ([(0, jj) for jj in range(N - 1, -1, -1)], (-1.0, 0.0)),
    ]
    psi_b = np.zeros((N, N, 3))
    acc = np.zeros(3)
    variation = 0.0
    path = []
    for nodes, nu in edges:
        I = np.array([p[0] for p in nodes])
        J = np.array([p[1] for p in nodes])
        flux = -(nu[0] * jv[0, I, J] + nu[1] * jv[1, I, J])
        incr = 0.5 * h * (flux[1:] + flux[:-1])
        for k in range(len(nodes) - 1):
            path.append(((I[k], J[k]), acc.copy()))
            acc = acc + incr[k]
            variation += np.linalg.norm(incr[k])
    closure = acc.copy()
    # spread the closure defect linearly along the path
    total = len(path)
    for k, ((i, jj), val) in enumerate(path):
        psi_b[i, jj] = val - closure * k / total
    return psi_b, float(np.linalg.norm(closure)), float(variation)


def recover_potentials(j, grid: Grid2D, defect: DefectInfo, Lam, green: GreenFunction | None = None,
                       epsilon=None, radii=None, closure_tol=0.01, m=512) -> Potentials:
    """Solve ``Delta Psi = d1 j2 - d2 j1`` with boundary data from ``j . nu``.

    With ``grad_perp = (-d2, d1)`` one has ``j = grad_perp Psi``.  Then
    ``phi = Psi - ln(1/|x-a|) Lambda / 2`` and
    ``phi1 = Psi - pi G(., a) Lambda``.  ``psi_decay(r) = r sup |grad phi|``
    on circles of the given radii.
    """
    a = defect.location
    h = grid.h
    psi_b, closure, variation = _boundary_potential(j, grid)
    if closure > closure_tol * variation:
        raise ClosureDefect(f"closure defect {closure:.3g} exceeds {closure_tol:.0%} of variation {variation:.3g}")
    jv = antisym_to_vec(j)
    dj1 = gradient(jv[0], grid)
    dj2 = gradient(jv[1], grid)
    rhs = dj2[0] - dj1[1]
    free = grid.interior_mask()
    A = _dirichlet_laplacian(free, h)  # -Delta_h
    b = -rhs[free]
    # boundary contributions
    bterm = np.zeros_like(psi_b)
    bterm[1, :] += psi_b[0, :]
    bterm[-2, :] += psi_b[-1, :]
    bterm[:, 1] += psi_b[:, 0]
    bterm[:, -2] += psi_b[:, -1]
    b = b + bterm[free] / h**2
    psi = psi_b.copy()
    psi[free] = splu(A).solve(np.ascontiguousarray(b))
    rho = _rho(grid, a)
    with np.errstate(divide="ignore"):
        sing = 0.5 * np.log(1.0 / rho)
    lam_v = antisym_to_vec(Lam)
    with np.errstate(invalid="ignore"):
        phi = psi - sing[..., None] * lam_v
    phi1 = None if green is None else psi - np.pi * green.G[..., None] * lam_v
    profile = None
    if radii is not None:
        if epsilon is not None and np.min(radii) < 3 * epsilon:
            raise SingularOverlap(f"radius {np.min(radii)} is within 3 eps of the defect")
        gphi = gradient(np.where(np.isfinite(phi), phi, 0.0), grid)
        mag = np.sqrt(np.sum(gphi**2, axis=(0, -1)) * 2.0)  # antisymmetric norm: |A|^2 = 2|w|^2
        vals = []
        for r in radii:
            _, s = circle_values(grid, mag, a, r, m)
            vals.append(r * np.max(s))
        profile = RadialProfile(radii, {"psi_decay": np.array(vals)})
    return Potentials(vec_to_antisym(psi), vec_to_antisym(phi),
                      None if phi1 is None else vec_to_antisym(phi1), closure, variation, profile)


# -- energy expansion ----------------------------------------------------------


def outside_disc_integral(grid: Grid2D, density, a, r):
    """``int_{Omega minus B_r(a)} density`` by cell averages and covered fractions."""
    frac = cell_disc_fractions(grid, np.asarray(a, float), r)
    d = np.where(np.isfinite(density), density, 0.0)
    cell = 0.25 * (d[:-1, :-1] + d[1:, :-1] + d[:-1, 1:] + d[1:, 1:])
    return float(np.sum(cell * (1.0 - frac)) * grid.h**2)


@dataclass
class ExpansionReport:
    r: float
    epsilon: float
    beta: float
    defect: list
    energy_total: float
    I_disc: float
    omega_integral: float
    omega_sinh2_integral: float
    residual_k2: float
    residual_k4: float
    kappa_fit_expansion: float
    dirichlet_outside: float
    energy_outside: float
    kappa_fit_identity: float
    identity_residual_k2: float
    identity_residual_k4: float
    green: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _dirichlet_density(u, grid):
    du = gradient(u, grid)
    return 0.5 * np.sum(inner(du, du), axis=0)


def energy_expansion_report(u, grid: Grid2D, epsilon: float, beta: float, energy_total: float,
                            defect: DefectInfo, r: float, I_disc: float,
                            green: GreenFunction | None = None, Lam=None,
                            potentials: Potentials | None = None) -> ExpansionReport:
    """All terms of the two energy expansions plus residuals.

    ``residual_k = E - I - 2 int|omega| - k int|omega| sinh^2 g`` outside
    ``B_r(a)``.  The Green-form block lists both the coefficients as
    commonly stated (``R/2`` and ``1``) and those obtained by expanding
    ``1/2 int |grad(pi G Lambda + phi1)|^2`` with ``|Lambda|^2 = 2``
    (``pi^2 R`` and ``2 pi``).
    """
    from .sym3core import potential as _pot  # local: keeps import list short

    a = defect.location
    omega = hopf_differential(u, grid, defect, epsilon)
    absw = np.abs(omega.values)
    s2 = omega_sinh2_density(u, grid, omega)
    Iw = outside_disc_integral(grid, absw, a, r)
    Is = outside_disc_integral(grid, s2, a, r)
    dens_d = _dirichlet_density(u, grid)
    dens_w = _pot(u, beta) / epsilon**2
    D_out = outside_disc_integral(grid, dens_d, a, r)
    E_out = D_out + outside_disc_integral(grid, dens_w, a, r)
    base = energy_total - I_disc - 2 * Iw
    outside = _rho(grid, a) >= r
    x = s2[outside]
    y = (dens_d - 2 * absw)[outside]
    kfit = float(x @ y / (x @ x)) if x @ x > 0 else float("nan")
    rep = ExpansionReport(
        r=r, epsilon=epsilon, beta=beta, defect=a.tolist(), energy_total=energy_total,
        I_disc=I_disc, omega_integral=Iw, omega_sinh2_integral=Is,
        residual_k2=base - 2 * Is, residual_k4=base - 4 * Is,
        kappa_fit_expansion=base / Is if Is > 0 else float("nan"),
        dirichlet_outside=D_out, energy_outside=E_out, kappa_fit_identity=kfit,
        identity_residual_k2=D_out - 2 * Iw - 2 * Is,
        identity_residual_k4=D_out - 4 * Is - 2 * Iw,
    )
    if green is not None and Lam is not None and potentials is not None:
        du = gradient(u, grid)
        bracket = inner(Lam, commutator(du[0], du[1]))
        Gint = outside_disc_integral(grid, green.G * bracket, a, r)
        gphi1 = gradient(antisym_to_vec(potentials.phi1), grid)
        phi1_energy = outside_disc_integral(grid, np.sum(gphi1**2, axis=(0, -1)), a, r)  # 1/2 |.|^2 with |A|^2 = 2|w|^2
        log_term = 0.5 * np.pi * np.log(1.0 / r)
        stated = log_term + 0.5 * green.robin + Gint + phi1_energy
        derived = log_term + np.pi**2 * green.robin - 2 * np.pi * Gint + phi1_energy
        rep.green = {
            "log_term": log_term,
            "robin": green.robin,
            "G_bracket_integral": Gint,
            "phi1_energy": phi1_energy,
            "closure_defect": potentials.closure,
            "closure_relative": potentials.closure / potentials.variation,
            "stated_sum": stated,
            "stated_residual": energy_total - I_disc - stated,
            "derived_sum": derived,
            "derived_residual": energy_total - I_disc - derived,
        }
    return rep
