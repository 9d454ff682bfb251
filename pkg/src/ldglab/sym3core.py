"""Algebra of 3x3 symmetric / antisymmetric matrices and the bulk potential.

Matrices are plain ``numpy`` arrays with trailing shape ``(3, 3)``; every
function broadcasts over leading axes so the same code serves single
matrices and whole grid fields.  Trace-free symmetric matrices are also
carried as 5 coordinates in the fixed orthonormal basis ``BASIS``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BASIS",
    "LAMBDA",
    "SO3_BASIS",
    "AmbiguousProjection",
    "ProjectionMatrix",
    "antisym_to_vec",
    "canonical_flat",
    "commutator",
    "coords",
    "det3",
    "director_matrix",
    "flat_from_angle",
    "grad_potential",
    "grad_potential_coords",
    "hess_apply",
    "inner",
    "nearest_projection",
    "potential",
    "potential_coords",
    "project_field",
    "random_psd_trace1",
    "random_rotation",
    "reconstruct",
    "vec_to_antisym",
]

TIE_TOL = 1e-9

_s2 = np.sqrt(2.0)
_s6 = np.sqrt(6.0)

BASIS = np.array(
    [
        np.diag([1.0, -1.0, 0.0]) / _s2,
        np.diag([1.0, 1.0, -2.0]) / _s6,
        np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float) / _s2,
        np.array([[0, 0, 1], [0, 0, 0], [1, 0, 0]], dtype=float) / _s2,
        np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0]], dtype=float) / _s2,
    ]
)

# Generator of the closed geodesic through diag(1,0,0) and diag(0,1,0).
LAMBDA = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

# so(3) generators L_k x = e_k cross x.  Each has norm sqrt(2), L^3 = -L and
# [L1, L2] = L3 cyclically.
SO3_BASIS = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)

_THIRD = np.eye(3) / 3.0


class AmbiguousProjection(ValueError):
    """Top two eigenvalues coincide, so the nearest projection is not unique."""


@dataclass(frozen=True)
class ProjectionMatrix:
    """Rank-one orthogonal projection ``n n^T`` with ``|n| = 1``."""

    n: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        norm = np.linalg.norm(n)
        if n.shape != (3,) or not np.isfinite(norm) or norm == 0.0:
            raise ValueError(f"projection needs a nonzero 3-vector, got {self.n!r}")
        object.__setattr__(self, "n", n / norm)

    @property
    def matrix(self) -> np.ndarray:
        return np.outer(self.n, self.n)


def inner(a, b):
    """Frobenius pairing tr(B^T A), broadcast over leading axes."""
    return np.einsum("...ij,...ij->...", a, b)


def commutator(a, b):
    return a @ b - b @ a


def coords(u):
    """Coordinates of the trace-free part of ``u`` in ``BASIS``."""
    return np.einsum("...ij,kij->...k", u, BASIS)


def reconstruct(q):
    """Trace-one symmetric matrix ``I/3 + sum_k q_k B_k``."""
    return _THIRD + np.einsum("...k,kij->...ij", q, BASIS)


def det3(u):
    return (
        u[..., 0, 0] * (u[..., 1, 1] * u[..., 2, 2] - u[..., 1, 2] * u[..., 2, 1])
        - u[..., 0, 1] * (u[..., 1, 0] * u[..., 2, 2] - u[..., 1, 2] * u[..., 2, 0])
        + u[..., 0, 2] * (u[..., 1, 0] * u[..., 2, 1] - u[..., 1, 1] * u[..., 2, 0])
    )


def _check_beta(beta):
    if not 1.0 <= beta < 3.0:
        raise ValueError(f"beta must lie in [1, 3), got {beta}")


def potential(u, beta):
    """W_beta(u) = (1 - |u|^2)^2 / 4 - beta det(u)."""
    _check_beta(beta)
    u = np.asarray(u, dtype=float)
    tr = np.trace(u, axis1=-2, axis2=-1)
    if np.any(np.abs(tr - 1.0) > 1e-12):
        raise ValueError("potential expects trace-one matrices")
    s = inner(u, u)
    return 0.25 * (1.0 - s) ** 2 - beta * det3(u)


def grad_potential(u, beta):
    """Unconstrained gradient (|u|^2 - 1) u + beta (u - u^2).

    Its trace equals (beta - 1)(1 - |u|^2); the flow removes that part
    by working in trace-free coordinates.
    """
    s = inner(u, u)[..., None, None]
    return (s - 1.0) * u + beta * (u - u @ u)


def hess_apply(u, h, beta):
    """Second derivative of W_beta at ``u`` applied to a trace-free ``h``."""
    s = inner(u, u)[..., None, None]
    uh = inner(u, h)[..., None, None]
    return (s - 1.0) * h + 2.0 * uh * u + beta * (h - u @ h - h @ u)


def potential_coords(q, beta):
    """W_beta evaluated directly from trace-free coordinates.

    Uses |u|^2 = 1/3 + |q|^2 and det(I/3 + A) = 1/27 - |A|^2/6 + det(A).
    """
    a = np.einsum("...k,kij->...ij", q, BASIS)
    qq = np.einsum("...k,...k->...", q, q)
    det_u = 1.0 / 27.0 - qq / 6.0 + det3(a)
    return 0.25 * (2.0 / 3.0 - qq) ** 2 - beta * det_u


def grad_potential_coords(q, beta):
    """Gradient of ``potential_coords`` with respect to ``q``."""
    u = reconstruct(q)
    return coords(grad_potential(u, beta))


def nearest_projection(u) -> ProjectionMatrix:
    """Closest rank-one projection to a single symmetric matrix."""
    w, v = np.linalg.eigh(np.asarray(u, dtype=float))
    if w[2] - w[1] < TIE_TOL:
        raise AmbiguousProjection(
            f"leading eigenvalues {w[2]:.3g} and {w[1]:.3g} are tied"
        )
    return ProjectionMatrix(v[:, 2])


def project_field(u):
    """Pointwise ``n n^T`` for the leading eigenvector; no tie check.

    Returns ``(P, n)``.  Inside a defect core the result is arbitrary but
    still a projection.
    """
    _, v = np.linalg.eigh(u)
    n = v[..., :, 2]
    return np.einsum("...i,...j->...ij", n, n), n


def canonical_flat(x, a=(0.0, 0.0)):
    """Degree-1/2 map whose image is the geodesic through e1e1^T, e2e2^T.

    ``x`` has shape ``(..., 2)``.  Raises for points at the singularity.
    """
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(a, dtype=float)
    if np.any(np.hypot(d[..., 0], d[..., 1]) == 0.0):
        raise ValueError("canonical flat map is undefined at its singular point")
    theta = np.arctan2(d[..., 1], d[..., 0])
    return flat_from_angle(theta)


def flat_from_angle(theta):
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(np.shape(theta) + (3, 3))
    out[..., 0, 0] = 0.5 * (1.0 + c)
    out[..., 1, 1] = 0.5 * (1.0 - c)
    out[..., 0, 1] = out[..., 1, 0] = 0.5 * s
    return out


def director_matrix(n):
    return np.einsum("...i,...j->...ij", n, n)


def vec_to_antisym(w):
    """Antisymmetric matrix ``A`` with ``A x = w x x``."""
    return np.einsum("...k,kij->...ij", w, SO3_BASIS)


def antisym_to_vec(a):
    return 0.5 * np.einsum("...ij,kij->...k", a, SO3_BASIS)


def random_rotation(rng, size=None):
    """Uniform random rotations via QR of Gaussian matrices."""
    shape = () if size is None else (size,)
    g = rng.standard_normal(shape + (3, 3))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    detq = np.linalg.det(q)
    q[..., :, 0] *= detq[..., None]
    return q


def random_psd_trace1(rng, size):
    """Q diag(d) Q^T with d uniform on the simplex (Dirichlet(1,1,1))."""
    d = rng.dirichlet(np.ones(3), size=size)
    q = random_rotation(rng, size)
    return np.einsum("nij,nj,nkj->nik", q, d, q)
