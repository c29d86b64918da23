"""Thin-plate scaling experiments with manufactured prestrain."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import sympy as sy

from .discretization import ConfigurationError, Grid2D, ScalarField, det2, hessian, make_grid
from .elasticity3d import (
    ISOTROPIC_DEFAULT,
    X1,
    X2,
    CompatReport,
    GrowthSpec,
    QuadraticForm3,
    _lambdify_array,
    build_recovery,
    compat_check,
    energy_3d,
    limit_energy,
)


def _grad(v):
    return sy.Matrix([sy.diff(v, X1), sy.diff(v, X2)])


def manufacture(
    v,
    w: Sequence,
    B_g=None,
    gamma: float = 1.5,
    *,
    name: str = "manufactured",
    audit_grid: Grid2D | None = None,
    tol: float = 1e-10,
) -> GrowthSpec:
    """Growth data for which ``(v, w)`` is an exact in-plane/out-of-plane pair.

    The 2x2 block of S_g is defined as ``sym grad w + 1/2 grad v (x) grad v``;
    the third row and column are zero.  The Monge-Ampere constraint
    ``det D^2 v = -curl^T curl S`` then holds identically, which is audited.
    """
    v = sy.sympify(v)
    w = [sy.sympify(c) for c in w]
    gv = _grad(v)
    Dw = sy.Matrix([[sy.diff(w[0], X1), sy.diff(w[0], X2)], [sy.diff(w[1], X1), sy.diff(w[1], X2)]])
    S2 = sy.simplify((Dw + Dw.T) / 2 + gv * gv.T / 2)
    S = sy.zeros(3, 3)
    S[:2, :2] = S2
    B = sy.zeros(3, 3) if B_g is None else sy.Matrix(B_g)
    spec = GrowthSpec(S, B, gamma, name)
    resid = sy.hessian(v, (X1, X2)).det() - spec.target_curvature()
    grid = audit_grid or make_grid("unit_disk", 33)
    a = grid.active
    err = float(np.max(np.abs(_lambdify_array([resid], (X1, X2), (1,))(grid.x1[a], grid.x2[a]))))
    if err > tol:
        raise RuntimeError(f"manufactured constraint residual {err:.3e}; differentiation bug")
    return spec


@dataclass(frozen=True)
class ScalingExperiment:
    spec: GrowthSpec
    v: sy.Expr
    w: tuple
    h_list: tuple[float, ...] = tuple(2.0 ** -k for k in range(3, 9))
    quad: tuple[int, int] = (65, 3)
    q: QuadraticForm3 = ISOTROPIC_DEFAULT
    domain_kind: str = "unit_disk"

    def __post_init__(self):
        hs = np.asarray(self.h_list, dtype=float)
        if hs.size < 2 or np.any(hs <= 0) or np.any(np.diff(hs) >= 0):
            raise ConfigurationError("h_list must be positive and strictly decreasing with at least 2 entries")
        if not 1.0 < self.spec.gamma < 2.0:
            raise ConfigurationError("scaling experiments need 1 < gamma < 2")
        object.__setattr__(self, "v", sy.sympify(self.v))
        object.__setattr__(self, "w", tuple(sy.sympify(c) for c in self.w))
        object.__setattr__(self, "h_list", tuple(float(h) for h in hs))

    @property
    def gamma(self) -> float:
        return self.spec.gamma

    def grid(self) -> Grid2D:
        return make_grid(self.domain_kind, self.quad[0])

    def sample_v(self, grid: Grid2D | None = None) -> ScalarField:
        grid = grid or self.grid()
        fn = _lambdify_array([self.v], (X1, X2), (1,))
        return grid.sample(lambda x, y: fn(x, y)[..., 0])

    def expected_limit(self) -> float:
        """I_f(v) on the same in-plane quadrature used for the 3D energy."""
        return limit_energy(self.sample_v(), self.spec, self.q)


@dataclass(frozen=True)
class ScalingResult:
    h: np.ndarray
    energy: np.ndarray
    ratio: np.ndarray
    slope: float | None
    limit: float | None
    correction_order: float | None
    expected_limit: float
    min_ratio: float

    def rows(self):
        return list(zip(self.h.tolist(), self.energy.tolist(), self.ratio.tolist()))

    def summary(self) -> dict:
        return {
            "slope": self.slope,
            "limit": self.limit,
            "correction_order": self.correction_order,
            "expected_limit": self.expected_limit,
            "min_ratio": self.min_ratio,
        }


def richardson(h: np.ndarray, ratio: np.ndarray) -> tuple[float, float | None]:
    """Extrapolate ratio(h) -> 0 from the two smallest h.

    The correction exponent is measured from the three smallest h when the
    differences are of one sign; otherwise the last value is returned as is.
    """
    if len(h) < 3:
        return float(ratio[-1]), None
    d1 = ratio[-2] - ratio[-3]
    d2 = ratio[-1] - ratio[-2]
    if d1 == 0 or d2 == 0 or np.sign(d1) != np.sign(d2):
        return float(ratio[-1]), None
    p = np.log(d1 / d2) / np.log(h[-3] / h[-2])
    if not np.isfinite(p) or p <= 0:
        return float(ratio[-1]), None
    t = (h[-2] / h[-1]) ** p
    return float((t * ratio[-1] - ratio[-2]) / (t - 1)), float(p)


def run_scaling(exp: ScalingExperiment) -> ScalingResult:
    """Energies of the recovery deformations for each h in ``exp.h_list``."""
    g = exp.gamma
    hs = np.asarray(exp.h_list)
    E = np.empty_like(hs)
    for k, h in enumerate(hs):
        u = build_recovery(exp.spec, exp.v, exp.w, exp.q, h)
        E[k] = energy_3d(u, exp.spec, h, exp.quad, exp.domain_kind)
    ratio = E / hs ** (g + 2)
    if np.all(E > 0):
        slope = float(np.polyfit(np.log(hs), np.log(E), 1)[0])
        limit, p = richardson(hs, ratio)
    else:
        slope, limit, p = None, (0.0 if np.all(E == 0) else None), None
    return ScalingResult(hs, E, ratio, slope, limit, p, exp.expected_limit(), float(ratio.min()))


@dataclass(frozen=True)
class GapReport:
    gap: float
    best: str
    compat: CompatReport
    energies: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return self.gap


def lower_bound_gap(
    exp: ScalingExperiment,
    candidates: dict[str, ScalarField] | None = None,
    *,
    feasibility_tol: float = 1e-3,
) -> GapReport:
    """Smallest limit energy over a candidate family of admissible displacements.

    Default candidates are ``v`` and ``-v`` (both satisfy the same
    determinant constraint); extra candidates such as radial lifts, saddle
    members or solver output can be passed in.  Candidates violating the
    constraint by more than ``feasibility_tol`` on the interior are skipped.
    """
    grid = exp.grid()
    v = exp.sample_v(grid)
    pool = {"v": v, "-v": -v}
    if candidates:
        pool.update(candidates)
    fn = _lambdify_array([exp.spec.target_curvature()], (X1, X2), (1,))
    f = grid.sample(lambda x, y: fn(x, y)[..., 0])
    inner = grid.core
    energies = {}
    for name, cand in pool.items():
        if (cand.grid.domain_kind, cand.grid.n) != (grid.domain_kind, grid.n):
            raise ConfigurationError(f"candidate {name!r} lives on a different grid")
        cand = ScalarField(grid, cand.values)
        r = (det2(hessian(cand)) - f).max_abs(inner)
        if r <= feasibility_tol:
            energies[name] = limit_energy(cand, exp.spec, exp.q)
    if not energies:
        raise ConfigurationError("no admissible candidate")
    best = min(energies, key=energies.get)
    return GapReport(energies[best], best, compat_check(exp.spec, grid), energies)
