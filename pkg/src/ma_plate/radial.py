"""Radially symmetric Monge-Ampere data on the unit disk.

For a radial right-hand side f(r) >= c > 0 the unique radial solution has
``v'(r)^2 = F(r) = int_0^r 2 s f(s) ds`` and bending energy

    2 pi int_0^1 r^3 f^2 / F dr  +  2 pi int_0^1 F / r dr,

the second term being equal to ``2 pi int_0^1 2 r |log r| f dr``.

All quadratures run on a refined copy of the uniform profile grid: every cell
is split at its midpoint, and cells touching r = 0 or a declared breakpoint of
f are further graded geometrically.  Each refined cell carries a 5-point
Gauss-Legendre rule, so a jump of f located exactly at a node is never sampled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .discretization import ConfigurationError, Grid2D, ScalarField

KINDS = ("constraint_f", "displacement_v", "multiplier_lambda")

_GL_T, _GL_W = np.polynomial.legendre.leggauss(5)
_GL_T = 0.5 * (_GL_T + 1.0)
_GL_W = 0.5 * _GL_W


class NotAdmissibleError(ValueError):
    """f violates the integrability or positivity requirements."""


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Values on a uniform grid of [0, 1].

    ``func`` (vectorised callable of r) is kept for constraint profiles so that
    quadratures can sample between nodes; ``breakpoints`` lists jump locations
    of ``func``.  ``c`` is the sampled lower bound of f.
    """

    r_nodes: np.ndarray
    values: np.ndarray
    kind: str = "constraint_f"
    func: Callable[[np.ndarray], np.ndarray] | None = None
    breakpoints: tuple[float, ...] = ()
    dfunc: Callable[[np.ndarray], np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown profile kind {self.kind!r}")
        r = np.asarray(self.r_nodes, dtype=float)
        if r.ndim != 1 or r.size < 3 or r[0] != 0.0 or abs(r[-1] - 1.0) > 1e-14:
            raise ConfigurationError("radial nodes must be a grid of [0, 1] starting at 0")
        if not np.allclose(np.diff(r), r[1] - r[0], rtol=1e-9, atol=0):
            raise ConfigurationError("radial nodes must be uniform")
        object.__setattr__(self, "r_nodes", r)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def m(self) -> int:
        return self.r_nodes.size

    @property
    def dr(self) -> float:
        return float(self.r_nodes[1] - self.r_nodes[0])

    @property
    def c(self) -> float:
        return float(np.min(self.values))

    @classmethod
    def from_function(
        cls,
        func: Callable[[np.ndarray], np.ndarray],
        m: int = 2001,
        *,
        breakpoints: Sequence[float] = (),
        dfunc=None,
        kind: str = "constraint_f",
    ) -> "RadialProfile":
        r = np.linspace(0.0, 1.0, m)
        vals = np.broadcast_to(np.asarray(func(r), dtype=float), r.shape).copy()
        return cls(r, vals, kind, func, tuple(float(b) for b in breakpoints), dfunc)

    @classmethod
    def from_values(cls, values: np.ndarray, kind: str = "constraint_f") -> "RadialProfile":
        values = np.asarray(values, dtype=float)
        r = np.linspace(0.0, 1.0, values.size)
        spline = CubicSpline(r, values) if kind == "constraint_f" else None
        return cls(r, values, kind, spline, (), spline.derivative() if spline is not None else None)

    def f(self, r: np.ndarray) -> np.ndarray:
        if self.func is None:
            raise ConfigurationError("profile has no underlying function")
        r = np.asarray(r, dtype=float)
        return np.broadcast_to(np.asarray(self.func(r), dtype=float), r.shape)

    def df(self, r: np.ndarray) -> np.ndarray:
        """f' by the supplied derivative, or a Richardson-extrapolated central difference."""
        r = np.asarray(r, dtype=float)
        if self.dfunc is not None:
            return np.broadcast_to(np.asarray(self.dfunc(r), dtype=float), r.shape)
        d = 1e-3
        # radial data extends evenly through the origin
        f = lambda x: self.f(np.abs(x))
        return (8 * (f(r + d) - f(r - d)) - (f(r + 2 * d) - f(r - 2 * d))) / (12 * d)

    @cached_property
    def _fine(self) -> "_FineMesh":
        return _FineMesh(self)

    def lift(self, grid: Grid2D) -> ScalarField:
        """Radial extension to a 2D grid by cubic interpolation in r.

        The spline is fitted to the even extension on [-1, 1], so odd
        derivatives vanish at r = 0 and the lift has no cone at the centre.
        """
        rn = np.concatenate([-self.r_nodes[:0:-1], self.r_nodes])
        spline = CubicSpline(rn, np.concatenate([self.values[:0:-1], self.values]))
        r = np.hypot(grid.x1, grid.x2)
        vals = np.full_like(r, np.nan)
        a = grid.active
        rr = r[a]
        if np.any(rr > 1.0 + 1e-12):
            vals[a] = spline(rr, extrapolate=True)
        else:
            vals[a] = spline(np.minimum(rr, 1.0))
        return ScalarField(grid, vals)


class _FineMesh:
    """Refined cells with Gauss points and the running integral F."""

    def __init__(self, prof: RadialProfile):
        r = prof.r_nodes
        dr = prof.dr
        pts = [r, 0.5 * (r[:-1] + r[1:])]
        grade = dr * 0.5 ** np.arange(1, 40)
        pts.append(grade)
        for b in prof.breakpoints:
            pts.append(np.array([b]))
            pts.append(np.clip(b + grade, 0, 1))
            pts.append(np.clip(b - grade, 0, 1))
        edges = np.unique(np.concatenate(pts))
        self.edges = edges
        a, b = edges[:-1], edges[1:]
        self.len = b - a
        self.gauss = a[:, None] + self.len[:, None] * _GL_T[None, :]
        self.gw = self.len[:, None] * _GL_W[None, :]
        fg = prof.f(self.gauss)
        self.f_gauss = fg
        cell_F = np.sum(self.gw * 2 * self.gauss * fg, axis=1)
        self.F_edges = np.concatenate([[0.0], np.cumsum(cell_F)])
        # F at gauss points: partial integral from the left edge of the cell
        sub = a[:, None, None] + (self.gauss - a[:, None])[:, :, None] * _GL_T[None, None, :]
        sub_w = (self.gauss - a[:, None])[:, :, None] * _GL_W[None, None, :]
        self.F_gauss = self.F_edges[:-1, None] + np.sum(sub_w * 2 * sub * prof.f(sub), axis=2)
        self.node_pos = np.searchsorted(edges, r)

    def F_at_nodes(self) -> np.ndarray:
        return self.F_edges[self.node_pos]

    def cumulative(self, integrand_gauss: np.ndarray) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(np.sum(self.gw * integrand_gauss, axis=1))])


@dataclass(frozen=True)
class Admissibility:
    admissible: bool
    failing: tuple[str, ...]
    estimates: dict

    def __str__(self) -> str:
        return "admissible" if self.admissible else "fails(" + ",".join(self.failing) + ")"


def _truncated_integral(g: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, n: int = 400) -> float:
    """Gauss-Legendre on log-spaced cells of [lo, hi]."""
    edges = np.geomspace(lo, hi, n + 1)
    a, b = edges[:-1], edges[1:]
    x = a[:, None] + (b - a)[:, None] * _GL_T[None, :]
    w = (b - a)[:, None] * _GL_W[None, :]
    return float(np.sum(w * g(x)))


def radial_admissible(f: RadialProfile, levels: int = 5) -> Admissibility:
    """Finiteness test of int r|log r| f and int r^3 f^2 / F over (0, 1).

    Both integrals are computed over [delta_k, 1] with delta_k = 10^(-2^k);
    the integral is declared divergent when the increments between successive
    truncations fail to shrink geometrically.
    """
    fn = f.f

    def F(x):
        return np.array([_truncated_integral(lambda s: 2 * s * fn(s), 1e-300, xi, 60) if xi > 0 else 0.0
                         for xi in np.ravel(x)]).reshape(np.shape(x))

    first = lambda x: x * np.abs(np.log(x)) * fn(x)

    def second(x):
        Fx = F(x)
        num = x ** 3 * fn(x) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            out = num / Fx
        if np.any(~np.isfinite(out)):
            raise ZeroDivisionError
        return out

    deltas = [10.0 ** -(2 ** k) for k in range(1, levels + 1)]
    deltas = [d for d in deltas if d > 1e-300] or [1e-2]
    failing = []
    estimates = {}
    for name, g, npts in (("first", first, 400), ("second", second, 60)):
        try:
            vals = np.array([_truncated_integral(g, d, 1.0, npts) for d in deltas])
        except ZeroDivisionError:
            failing.append(name)
            estimates[name] = float("nan")
            continue
        inc = np.abs(np.diff(vals))
        scale = max(abs(vals[-1]), 1.0)
        # convergent tails shrink at least like delta^(1/2); divergent ones do not
        diverging = inc[-1] > 1e-6 * scale and not inc[-1] < 0.5 * inc[-2]
        if diverging or not np.isfinite(vals[-1]):
            failing.append(name)
        estimates[name] = float(vals[-1])
    if f.c <= 0 and "second" not in failing:
        failing.append("second")
    return Admissibility(not failing, tuple(failing), estimates)


def _require_positive(f: RadialProfile):
    if f.kind != "constraint_f":
        raise ConfigurationError("expected a constraint_f profile")
    if not f.c > 0:
        raise NotAdmissibleError(f"f must satisfy f >= c > 0 (sampled min {f.c:.3e})")


def radial_minimizer(f: RadialProfile, *, check: bool = True) -> RadialProfile:
    """v_f(r) = int_0^r sqrt(F(s)) ds with F(s) = int_0^s 2 t f(t) dt."""
    _require_positive(f)
    if check:
        adm = radial_admissible(f)
        if not adm.admissible:
            raise NotAdmissibleError(f"f is not admissible: {adm}")
    mesh = f._fine
    v_edges = mesh.cumulative(np.sqrt(mesh.F_gauss))
    v = v_edges[mesh.node_pos]
    F = mesh.F_at_nodes()
    dv = np.sqrt(F)
    r = f.r_nodes
    # v'' = r f / v', with limit sqrt(f(0)) at the origin
    ddv = np.empty_like(dv)
    ddv[1:] = r[1:] * f.values[1:] / dv[1:]
    ddv[0] = np.sqrt(f.values[0])
    return RadialProfile(r, v, "displacement_v", meta={"dv": dv, "ddv": ddv, "F": F})


@dataclass(frozen=True)
class RadialEnergy:
    total: float
    term_hessian_rr: float
    term_hessian_tt: float
    term_hessian_tt_check: float

    def __float__(self) -> float:
        return self.total


def radial_energy(f: RadialProfile) -> RadialEnergy:
    """Bending energy of v_f split into the radial and angular Hessian terms.

    The angular term is evaluated both as ``2 pi int F / r`` and as
    ``2 pi int 2 r |log r| f``; they must agree.
    """
    _require_positive(f)
    mesh = f._fine
    x, fg, Fg = mesh.gauss, mesh.f_gauss, mesh.F_gauss
    t1 = 2 * np.pi * float(np.sum(mesh.gw * x ** 3 * fg ** 2 / Fg))
    t2 = 2 * np.pi * float(np.sum(mesh.gw * Fg / x))
    t2_log = 2 * np.pi * float(np.sum(mesh.gw * 2 * x * np.abs(np.log(x)) * fg))
    for name, t in (("rr", t1), ("tt", t2), ("tt-log", t2_log)):
        if not np.isfinite(t):
            raise NotAdmissibleError(f"energy term {name} diverges")
    return RadialEnergy(t1 + t2, t1, t2, t2_log)


def _lambda_rhs(f: RadialProfile, r: np.ndarray, F: np.ndarray) -> np.ndarray:
    """lambda' = -2 r (Delta v)' / v' expressed through f, f' and F."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    rp, Fp = r[pos], F[pos]
    fv, dfv = f.f(rp), f.df(rp)
    bracket = (2 * fv + rp * dfv) / Fp - rp ** 2 * fv ** 2 / Fp ** 2 - 1.0 / rp ** 2
    out[pos] = -2 * rp * bracket
    return out


def lambda_multiplier(f: RadialProfile) -> RadialProfile:
    """Radial Lagrange multiplier by RK4 integration backward from r = 1.

    Terminal value: ``lambda(1) = -2 v''(1) / v'(1) = -2 f(1) / F(1)``.  At the
    origin the right-hand side is set to its limit 0 (``v'/r -> sqrt f(0)``).
    """
    _require_positive(f)
    mesh = f._fine
    r = f.r_nodes
    F_nodes = mesh.F_at_nodes()
    mid = 0.5 * (r[:-1] + r[1:])
    F_mid = mesh.F_edges[np.searchsorted(mesh.edges, mid)]
    if np.any(F_nodes[1:] <= 0):
        raise ArithmeticError("v' vanishes away from the origin; multiplier ODE singular")
    k_nodes = _lambda_rhs(f, r, F_nodes)
    k_mid = _lambda_rhs(f, mid, F_mid)
    lam = np.empty_like(r)
    lam[-1] = -2 * float(f.f(np.array([1.0]))[0]) / F_nodes[-1]
    h = f.dr
    # the right-hand side does not depend on lambda, so RK4 reduces to Simpson per step
    for k in range(r.size - 1, 0, -1):
        lam[k - 1] = lam[k] - h / 6 * (k_nodes[k] + 4 * k_mid[k - 1] + k_nodes[k - 1])
    return RadialProfile(r, lam, "multiplier_lambda", meta={"dlam": k_nodes})


@dataclass(frozen=True)
class RadialELCheck:
    interior: float
    boundary_normal: float
    boundary_third: float
    boundary_tangential: float = 0.0


def radial_el_check(v: RadialProfile, lam: RadialProfile, delta: float = 0.05) -> RadialELCheck:
    """Residuals of the radial Euler-Lagrange system by second-order differences.

    interior: max over (delta, 1) of |lambda' v' + 2 r (Delta v)'|, the
    once-integrated interior equation (both terms vanish at r = 0);
    boundary_normal: 2 v''(1) + lambda(1) v'(1);
    boundary_third: 2 (Delta v)'(1) + v'(1) lambda'(1).
    The tangential boundary term vanishes identically for radial data.
    Exact first derivatives stored by ``radial_minimizer`` and
    ``lambda_multiplier`` are used when present.
    """
    if v.r_nodes.shape != lam.r_nodes.shape or not np.allclose(v.r_nodes, lam.r_nodes):
        raise ConfigurationError("v and lambda must share the radial grid")
    r = v.r_nodes
    h = v.dr
    d = lambda y: np.gradient(y, h, edge_order=2)
    dv = v.meta["dv"] if "dv" in v.meta else d(v.values)
    dlam = lam.meta["dlam"] if "dlam" in lam.meta else d(lam.values)
    ddv = v.meta["ddv"] if "ddv" in v.meta else d(dv)
    safe = np.where(r > 0, r, 1.0)
    lap = np.where(r > 0, ddv + dv / safe, 2 * ddv)
    dlap = d(lap)
    res = dlam * dv + 2 * r * dlap
    sel = r > delta
    return RadialELCheck(
        float(np.max(np.abs(res[sel]))),
        float(2 * ddv[-1] + lam.values[-1] * dv[-1]),
        float(2 * dlap[-1] + dv[-1] * dlam[-1]),
    )


def eps_step(eps: float, m: int = 2001) -> RadialProfile:
    """f = eps on (0, 1/2] and 1 on (1/2, 1]."""
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    func = lambda r: np.where(np.asarray(r) <= 0.5, eps, 1.0)
    return RadialProfile.from_function(func, m, breakpoints=(0.5,), dfunc=lambda r: np.zeros_like(np.asarray(r, float)))


def relaxed_radial_energy(psi_values: Sequence[float], edges: Sequence[float]) -> float:
    """Energy of v_psi for a piecewise-constant psi given cell values and edges."""
    psi_values = np.asarray(psi_values, dtype=float)
    edges = np.asarray(edges, dtype=float)

    def func(r):
        k = np.clip(np.searchsorted(edges, r, side="left") - 1, 0, psi_values.size - 1)
        return psi_values[k]

    return float(radial_energy(RadialProfile.from_function(func, 2001, breakpoints=tuple(edges[1:-1]), dfunc=lambda r: 0 * r)))
