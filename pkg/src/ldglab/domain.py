"""Uniform grid on a square, degree-1/2 boundary data and circle sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .sym3core import coords, director_matrix, reconstruct

__all__ = [
    "BoundarySpec",
    "CircleOutOfDomain",
    "CircleSample",
    "DiscMask",
    "DiscOutOfDomain",
    "Grid2D",
    "boundary_trace",
    "director_from_angle",
    "disc_mask",
    "sample_circle",
]


class CircleOutOfDomain(ValueError):
    pass


class DiscOutOfDomain(ValueError):
    pass


@dataclass(frozen=True)
class Grid2D:
    """``N x N`` nodes on ``[x0, x0 + side] x [y0, y0 + side]``.

    Node ``(i, j)`` sits at ``(x0 + i h, y0 + j h)``; fields are indexed
    ``[i, j, ...]`` with ``i`` along x.
    """

    N: int
    side: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.N < 16:
            raise ValueError(f"grid needs N >= 16, got {self.N}")
        if self.side <= 0:
            raise ValueError("side must be positive")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))

    @property
    def h(self) -> float:
        return self.side / (self.N - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.arange(self.N) * self.h

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + self.axis

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + self.axis

    @property
    def center(self) -> np.ndarray:
        return np.array(self.origin) + 0.5 * self.side

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.N, self.N), dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()

    def contains(self, p, margin: float = 0.0) -> bool:
        lo = np.array(self.origin) + margin
        hi = np.array(self.origin) + self.side - margin
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def to_dict(self) -> dict:
        return {"N": self.N, "side": self.side, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid2D":
        return cls(int(d["N"]), float(d.get("side", 1.0)), tuple(d.get("origin", (0.0, 0.0))))


@dataclass(frozen=True)
class BoundarySpec:
    """Perturbation of the half-degree geodesic boundary data.

    On the boundary, at angle ``s`` seen from the square's center, the
    director is ``(cos b cos a, cos b sin a, sin b)`` with
    ``a = s/2 + delta1 sin(s + phase1)`` and
    ``b = delta2 sin((s + phase2)/2)``.
    """

    delta1: float = 0.3
    delta2: float = 0.2
    phase1: float = 0.0
    phase2: float = 0.0

    def __post_init__(self):
        if abs(self.delta2) >= np.pi / 4:
            raise ValueError(
                f"|delta2| must be < pi/4 to keep the latitude small, got {self.delta2}"
            )

    def angles(self, s):
        s = np.asarray(s, dtype=float)
        alpha = 0.5 * s + self.delta1 * np.sin(s + self.phase1)
        beta = self.delta2 * np.sin(0.5 * (s + self.phase2))
        return alpha, beta

    def director(self, s):
        return director_from_angle(*self.angles(s))

    def value(self, s):
        return director_matrix(self.director(s))

    def to_dict(self) -> dict:
        return asdict(self)


def director_from_angle(alpha, beta):
    cb = np.cos(beta)
    return np.stack([cb * np.cos(alpha), cb * np.sin(alpha), np.sin(beta)], axis=-1)


def boundary_angle(grid: Grid2D, pts):
    c = grid.center
    return np.mod(np.arctan2(pts[..., 1] - c[1], pts[..., 0] - c[0]), 2 * np.pi)


def boundary_trace(spec: BoundarySpec, grid: Grid2D):
    """Boundary node indices ``(K, 2)`` and their values ``(K, 3, 3)``."""
    idx = np.argwhere(grid.boundary_mask())
    pts = grid.points()[idx[:, 0], idx[:, 1]]
    return idx, spec.value(boundary_angle(grid, pts))


@dataclass
class CircleSample:
    center: np.ndarray
    radius: float
    m: int
    theta: np.ndarray
    points: np.ndarray
    values: np.ndarray


def _bilinear(grid: Grid2D, pts, data):
    h = grid.h
    fx = (pts[..., 0] - grid.origin[0]) / h
    fy = (pts[..., 1] - grid.origin[1]) / h
    i = np.clip(np.floor(fx).astype(int), 0, grid.N - 2)
    j = np.clip(np.floor(fy).astype(int), 0, grid.N - 2)
    tx = fx - i
    ty = fy - j
    extra = (None,) * (data.ndim - 2)
    tx = tx[(...,) + extra]
    ty = ty[(...,) + extra]
    return (
        (1 - tx) * (1 - ty) * data[i, j]
        + tx * (1 - ty) * data[i + 1, j]
        + (1 - tx) * ty * data[i, j + 1]
        + tx * ty * data[i + 1, j + 1]
    )


def interpolate(grid: Grid2D, data, pts):
    """Bilinear interpolation of a node field at arbitrary points."""
    pts = np.asarray(pts, dtype=float)
    return _bilinear(grid, pts, np.asarray(data))


def circle_points(a, r, m):
    theta = 2 * np.pi * np.arange(m) / m
    a = np.asarray(a, dtype=float)
    return theta, a + r * np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def sample_circle(field, grid: Grid2D, a, r: float, m: int = 512) -> CircleSample:
    """Interpolate a trace-one field ``(N, N, 3, 3)`` on the circle ``|x - a| = r``.

    Interpolation runs in trace-free coordinates, so samples have trace
    exactly one.
    """
    a = np.asarray(a, dtype=float)
    if r <= 0 or not grid.contains(a - r) or not grid.contains(a + r):
        raise CircleOutOfDomain(f"circle at {a.tolist()} with r={r} leaves the grid")
    theta, pts = circle_points(a, r, m)
    q = coords(field)
    vals = reconstruct(_bilinear(grid, pts, q))
    return CircleSample(a, float(r), m, theta, pts, vals)


@dataclass
class DiscMask:
    inside: np.ndarray
    ring: np.ndarray
    center: np.ndarray
    radius: float
    cell_fraction: np.ndarray = field(repr=False)
    h: float = 0.0

    @property
    def area(self) -> float:
        return float(self.cell_fraction.sum()) * self.h**2


def cell_disc_fractions(grid: Grid2D, a, r, sub: int = 16):
    """Fraction of each grid cell covered by the disc, by sub-sampling.

    Cells fully inside or outside are classified exactly from corner
    distances; only cut cells are sub-sampled.
    """
    h = grid.h
    x = grid.x
    y = grid.y
    X, Y = np.meshgrid(x, y, indexing="ij")
    d = np.hypot(X - a[0], Y - a[1])
    corners = np.stack([d[:-1, :-1], d[1:, :-1], d[:-1, 1:], d[1:, 1:]])
    dmax = corners.max(axis=0)
    cx = 0.5 * (x[:-1] + x[1:])
    cy = 0.5 * (y[:-1] + y[1:])
    CX, CY = np.meshgrid(cx, cy, indexing="ij")
    # exact min distance from the disc center to each cell
    nx = np.clip(a[0], CX - h / 2, CX + h / 2)
    ny = np.clip(a[1], CY - h / 2, CY + h / 2)
    dmin = np.hypot(nx - a[0], ny - a[1])
    w = np.where(dmax <= r, 1.0, 0.0)
    cut = (dmin < r) & (dmax > r)
    if np.any(cut):
        off = (np.arange(sub) + 0.5) / sub - 0.5
        ox, oy = np.meshgrid(off * h, off * h, indexing="ij")
        ci, cj = np.nonzero(cut)
        px = CX[ci, cj][:, None, None] + ox
        py = CY[ci, cj][:, None, None] + oy
        w[ci, cj] = (np.hypot(px - a[0], py - a[1]) < r).mean(axis=(1, 2))
    return w


def disc_mask(grid: Grid2D, a, r: float) -> DiscMask:
    """Nodes strictly inside ``B_r(a)`` plus the outside ring touching them."""
    a = np.asarray(a, dtype=float)
    if r < grid.h / 2:
        raise DiscOutOfDomain(f"radius {r} is below half a grid spacing ({grid.h / 2})")
    if not (grid.contains(a - r, margin=grid.h) and grid.contains(a + r, margin=grid.h)):
        raise DiscOutOfDomain(f"disc at {a.tolist()} with r={r} is not inside the grid")
    pts = grid.points()
    d = np.hypot(pts[..., 0] - a[0], pts[..., 1] - a[1])
    inside = d < r
    if not inside.any():
        raise DiscOutOfDomain("disc contains no grid nodes")
    nb = np.zeros_like(inside)
    nb[1:, :] |= inside[:-1, :]
    nb[:-1, :] |= inside[1:, :]
    nb[:, 1:] |= inside[:, :-1]
    nb[:, :-1] |= inside[:, 1:]
    ring = nb & ~inside
    return DiscMask(inside, ring, a, float(r), cell_disc_fractions(grid, a, r), grid.h)
