import numpy as np
import pytest
from scipy.integrate import solve_bvp
from scipy.interpolate import CubicSpline

from ldglab.analysis import InsufficientSupport, sinh_gordon_residual
from ldglab.domain import Grid2D


def _radial_solution(r0, r1, g0, g1):
    """Radial -Delta g = sinh(2g) / (8 r^2); in s = ln r this is g'' = -sinh(2g)/8."""
    s = np.linspace(np.log(r0), np.log(r1), 200)

    def rhs(s, y):
        return np.vstack([y[1], -np.sinh(2 * y[0]) / 8])

    def bc(ya, yb):
        return np.array([ya[0] - g0, yb[0] - g1])

    guess = np.vstack([np.linspace(g0, g1, s.size), np.full(s.size, (g1 - g0) / (s[-1] - s[0]))])
    sol = solve_bvp(rhs, bc, s, guess, tol=1e-10, max_nodes=100_000)
    assert sol.success
    fine = np.linspace(s[0], s[-1], 4000)
    return CubicSpline(fine, sol.sol(fine)[0])


@pytest.mark.parametrize("N", [257, 513])
def test_manufactured_radial_solution(N):
    grid = Grid2D(N)
    a = np.array([0.5, 0.5])
    r0, r1 = 0.08, 0.45
    g_of_s = _radial_solution(r0, r1, 0.6, 0.1)
    rho = np.hypot(*(grid.points() - a).transpose(2, 0, 1))
    inside = (rho > r0) & (rho < r1)
    g = np.full(rho.shape, np.nan)
    g[inside] = g_of_s(np.log(rho[inside]))
    with np.errstate(divide="ignore"):
        omega_abs = 1.0 / (8 * rho**2)
    assert sinh_gordon_residual(g, omega_abs, grid) <= 0.05


def test_wrong_coefficient_is_detected():
    grid = Grid2D(257)
    a = np.array([0.5, 0.5])
    g_of_s = _radial_solution(0.08, 0.45, 0.6, 0.1)
    rho = np.hypot(*(grid.points() - a).transpose(2, 0, 1))
    inside = (rho > 0.08) & (rho < 0.45)
    g = np.full(rho.shape, np.nan)
    g[inside] = g_of_s(np.log(rho[inside]))
    with np.errstate(divide="ignore"):
        omega_abs = 1.0 / (4 * rho**2)
    assert sinh_gordon_residual(g, omega_abs, grid) > 0.3


def test_zero_g_is_not_applicable():
    grid = Grid2D(65)
    with pytest.raises(InsufficientSupport):
        sinh_gordon_residual(np.zeros((65, 65)), np.ones((65, 65)), grid)
