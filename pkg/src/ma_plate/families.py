"""Explicit families of minimisers with negative Monge-Ampere data.

For f <= c0 < 0 with log|f| harmonic, lam = sqrt|f| and a harmonic conjugate
phi of log(lam) give, for every theta, the curl-free symmetric field

    lam * [[cos(phi + theta), -sin(phi + theta)],
           [-sin(phi + theta), -cos(phi + theta)]]

whose potential v_theta is harmonic with det D^2 v_theta = f.  Potentials are
recovered by trapezoidal line integration along axis-parallel staircases.
"""
from __future__ import annotations

import numpy as np

from .discretization import ConfigurationError, Grid2D, ScalarField, SymMatrixField, gradient, hessian, row_curls


class IntegrabilityError(ValueError):
    """A field that should be a gradient (or Hessian) is not, within tolerance."""


def saddle_family(theta: float, grid: Grid2D) -> ScalarField:
    """v_theta = cos(theta) (x1^2 - x2^2) / 2 + sin(theta) x1 x2."""
    c, s = np.cos(theta), np.sin(theta)
    return grid.sample(lambda x, y: c * (x * x - y * y) / 2 + s * x * y)


def _cumtrapz_from(p: np.ndarray, c: int, h: float) -> np.ndarray:
    """Trapezoidal antiderivative of samples ``p`` vanishing at index ``c``."""
    out = np.full_like(p, np.nan, dtype=float)
    out[c] = 0.0
    if c + 1 < p.size:
        out[c + 1:] = np.cumsum(0.5 * h * (p[c:-1] + p[c + 1:]))
    if c > 0:
        back = np.cumsum(0.5 * h * (p[c:0:-1] + p[c - 1::-1]))
        out[c - 1::-1] = -back
    return out


def _staircase(p1: np.ndarray, p2: np.ndarray, grid: Grid2D, first_axis: int) -> np.ndarray:
    """Integrate the gradient (p1, p2) from the centre node along one staircase.

    ``first_axis = 0``: along x1 on the centre row, then along x2;
    ``first_axis = 1``: the other way round.  Domains are convex, so every
    active node is reached through active nodes only.
    """
    ci, cj = grid.center_index
    h = grid.h
    out = np.full((grid.n, grid.n), np.nan)
    if first_axis == 0:
        spine = _cumtrapz_from(p1[:, cj], ci, h)
        for i in range(grid.n):
            if np.isfinite(spine[i]):
                out[i, :] = spine[i] + _cumtrapz_from(p2[i, :], cj, h)
    else:
        spine = _cumtrapz_from(p2[ci, :], cj, h)
        for j in range(grid.n):
            if np.isfinite(spine[j]):
                out[:, j] = spine[j] + _cumtrapz_from(p1[:, j], ci, h)
    out[~grid.active] = np.nan
    return out


def integrate_gradient(p1: ScalarField, p2: ScalarField, path_tol: float | None = None) -> ScalarField:
    """Potential of (p1, p2) with value 0 at the centre node.

    The x1-first staircase is returned; the x2-first one is computed as an
    audit and their maximum difference must stay below ``path_tol``.
    """
    grid = p1.grid
    a = np.where(grid.active, p1.values, np.nan)
    b = np.where(grid.active, p2.values, np.nan)
    phi = _staircase(a, b, grid, 0)
    audit = _staircase(a, b, grid, 1)
    if path_tol is None:
        scale = max(1.0, float(np.nanmax(np.abs(a))), float(np.nanmax(np.abs(b))))
        path_tol = 50 * grid.h ** 2 * scale
    diff = np.abs(phi - audit)[grid.active]
    if np.any(~np.isfinite(diff)) or diff.max() > path_tol:
        raise IntegrabilityError(
            f"path dependence {np.nanmax(diff):.3e} exceeds {path_tol:.3e}; field not a gradient or mask not simply connected"
        )
    return ScalarField(grid, phi)


def _laplacian(u: ScalarField) -> ScalarField:
    H = hessian(u)
    return H.trace()


def harmonic_conjugate(u: ScalarField, tol: float | None = None) -> ScalarField:
    """phi with grad phi = (-d2 u, d1 u) and phi(centre) = 0."""
    grid = u.grid
    scale = max(1.0, u.max_abs())
    tol = 100 * grid.h ** 2 * scale if tol is None else tol
    res = _laplacian(u).max_abs(grid.core)
    if res > tol:
        raise ValueError(f"input is not harmonic: max |Laplacian| = {res:.3e} (tol {tol:.1e})")
    d1, d2 = gradient(u)
    return integrate_gradient(-d2, d1)


def hessian_family(f: ScalarField, theta: float, tol: float | None = None) -> SymMatrixField:
    """Curl-free symmetric field with zero trace and determinant f."""
    grid = f.grid
    vals = f.vec
    if not np.all(vals < 0):
        raise ValueError(f"f must be bounded away from 0 from below zero (max f = {vals.max():.3e})")
    lam = np.sqrt(np.abs(f.values))
    log_lam = ScalarField(grid, np.log(np.where(grid.active, lam, 1.0)))
    log_lam = ScalarField(grid, np.where(grid.active, log_lam.values, np.nan))
    try:
        phi = harmonic_conjugate(log_lam, tol)
    except ValueError as err:
        raise ValueError(f"log|f| is not harmonic: {err}") from err
    ang = phi.values + theta
    c, s = lam * np.cos(ang), lam * np.sin(ang)
    return SymMatrixField(grid, c, -s, -c)


def potential_from_hessian(H: SymMatrixField, tol: float | None = None) -> ScalarField:
    """v with D^2 v = H, v(centre) = 0 and grad v(centre) = 0.

    Integrability (vanishing row curls) is checked on the fringe-free core.
    """
    grid = H.grid
    scale = max(1.0, float(np.nanmax(np.abs(np.stack([H.a11, H.a12, H.a22])[:, grid.active]))))
    tol = 100 * grid.h ** 2 * scale if tol is None else tol
    c1, c2 = row_curls(H)
    res = max(c1.max_abs(grid.core), c2.max_abs(grid.core))
    if res > tol:
        raise IntegrabilityError(f"Hessian field not integrable: max row curl {res:.3e} (tol {tol:.1e})")
    g1 = integrate_gradient(ScalarField(grid, H.a11), ScalarField(grid, H.a12))
    g2 = integrate_gradient(ScalarField(grid, H.a12), ScalarField(grid, H.a22))
    return integrate_gradient(g1, g2)


def family_table(f: ScalarField, thetas) -> list[dict]:
    """theta, energy of the reconstructed potential and constraint residual."""
    from .discretization import det2, integrate

    rows = []
    for th in thetas:
        v = potential_from_hessian(hessian_family(f, th))
        Hv = hessian(v)
        rows.append(
            {
                "theta": float(th),
                "energy": integrate(Hv.frob2()),
                "det_residual": (det2(Hv) - f).max_abs(),
                "laplacian": Hv.trace().max_abs(),
                "v": v,
            }
        )
    return rows
