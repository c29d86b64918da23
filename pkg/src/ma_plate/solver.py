"""Bending-energy minimisation under a Monge-Ampere constraint.

The discrete problem lives on the active nodes of a grid: energy
``sum_k w_k |D^2 v|_k^2`` with the quadrature weights ``w`` and constraint
``g = det D^2 v - f`` imposed at every active node.  An augmented Lagrangian
handles the constraint; the inner problems are solved either by a damped
Newton method with the exact sparse Hessian (default) or by L-BFGS.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize

from .discretization import (
    BOUNDARY,
    ConfigurationError,
    Grid2D,
    ScalarField,
    SymMatrixField,
    bilaplacian,
    cof2,
    det2,
    gauss_curvature_metric,
    gradient,
    hessian,
    integrate,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    penalty_mu: float = 100.0
    mu_growth: float = 10.0
    multiplier_update: bool = True
    max_outer: int = 40
    inner_tol: float = 1e-8
    constraint_tol: float = 1e-6
    mode: str = "equality"
    inner: str = "newton"
    max_inner: int = 50
    mu_max: float = 1e6
    constrain: str = "interior"

    def __post_init__(self):
        if self.mode not in ("equality", "inequality"):
            raise ConfigurationError(f"mode must be equality or inequality, got {self.mode!r}")
        if self.constrain not in ("interior", "all"):
            raise ConfigurationError(f"constrain must be interior or all, got {self.constrain!r}")
        if self.inner not in ("newton", "lbfgs"):
            raise ConfigurationError(f"inner must be newton or lbfgs, got {self.inner!r}")
        if not self.constraint_tol > 0:
            raise ConfigurationError("constraint_tol must be positive")
        if self.max_outer < 1:
            raise ConfigurationError("max_outer must be >= 1")
        if not self.penalty_mu > 0 or not self.mu_growth > 1:
            raise ConfigurationError("need penalty_mu > 0 and mu_growth > 1")


@dataclass(frozen=True, eq=False)
class SolveReport:
    v: ScalarField
    energy: float
    constraint_residual: float
    el_residual: float
    outer_iters: int
    trace: list = field(default_factory=list)
    converged: bool = False
    multiplier: ScalarField | None = None
    psi: ScalarField | None = None

    def summary(self) -> dict:
        return {
            "energy": self.energy,
            "constraint_residual": self.constraint_residual,
            "el_residual": self.el_residual,
            "outer_iters": self.outer_iters,
            "converged": self.converged,
        }


class NonConvergenceError(RuntimeError):
    pass


# ----------------------------------------------------------------------------

def gauge_fix(v: ScalarField) -> ScalarField:
    """Remove the affine part: zero weighted mean and zero mean gradient."""
    g = v.grid
    w = g.quad_weights[g.active]
    W = w.sum()
    vec = v.vec
    x1, x2 = g.x1[g.active], g.x2[g.active]
    m1 = np.dot(w, g.D1 @ vec) / W
    m2 = np.dot(w, g.D2 @ vec) / W
    xb1, xb2 = np.dot(w, x1) / W, np.dot(w, x2) / W
    out = vec - m1 * (x1 - xb1) - m2 * (x2 - xb2)
    out -= np.dot(w, out) / W
    return ScalarField(g, g.from_vector(out))


class PenalizedObjective:
    """Augmented-Lagrangian objective as a function of the active vector.

    equality:   E(v) + sum_k w_k (lam_k g_k + mu/2 g_k^2),  g = det D^2 v - f
    inequality: E(v) + sum_k w_k psi(c_k, nu_k),  c = det D^2 v - f, with
                psi = -nu c + mu/2 c^2 if c < nu/mu and -nu^2/(2 mu) otherwise.
    """

    def __init__(self, grid: Grid2D, f: np.ndarray, mode: str = "equality", constrain: str = "interior"):
        self.grid = grid
        self.f = np.asarray(f, dtype=float)
        self.mode = mode
        self.w = grid.quad_weights[grid.active]
        self.cmask = constraint_mask(grid, constrain)
        self.wc = np.where(self.cmask, self.w, 0.0)
        self.D11, self.D12, self.D22 = grid.D11, grid.D12, grid.D22
        W = sp.diags(self.w)
        self.H_energy = (2 * (self.D11.T @ W @ self.D11 + 2 * self.D12.T @ W @ self.D12 + self.D22.T @ W @ self.D22)).tocsr()

    def parts(self, x: np.ndarray):
        a11, a12, a22 = self.D11 @ x, self.D12 @ x, self.D22 @ x
        return a11, a12, a22, a11 * a22 - a12 * a12 - self.f

    def energy(self, x: np.ndarray) -> float:
        a11, a12, a22, _ = self.parts(x)
        return float(np.dot(self.w, a11 ** 2 + 2 * a12 ** 2 + a22 ** 2))

    def _penalty_terms(self, g, lam, mu):
        """(value per node, d/dg per node, d2/dg2 per node), unweighted."""
        if self.mode == "equality":
            return lam * g + 0.5 * mu * g * g, lam + mu * g, np.full_like(g, mu)
        active = g < lam / mu
        val = np.where(active, -lam * g + 0.5 * mu * g * g, -lam * lam / (2 * mu))
        d1 = np.where(active, -lam + mu * g, 0.0)
        return val, d1, np.where(active, mu, 0.0)

    def value_grad(self, x: np.ndarray, lam: np.ndarray, mu: float):
        a11, a12, a22, g = self.parts(x)
        w = self.w
        E = np.dot(w, a11 ** 2 + 2 * a12 ** 2 + a22 ** 2)
        pv, pd, _ = self._penalty_terms(g, lam, mu)
        m = self.wc * pd
        grad = 2 * (self.D11.T @ (w * a11) + 2 * self.D12.T @ (w * a12) + self.D22.T @ (w * a22))
        # adjoint of det D^2: cofactor entries against the second-difference operators
        grad += self.D11.T @ (m * a22) + self.D22.T @ (m * a11) - 2 * self.D12.T @ (m * a12)
        return float(E + np.dot(self.wc, pv)), grad

    def energy_grad(self, x: np.ndarray) -> np.ndarray:
        a11, a12, a22, _ = self.parts(x)
        w = self.w
        return 2 * (self.D11.T @ (w * a11) + 2 * self.D12.T @ (w * a12) + self.D22.T @ (w * a22))

    def __call__(self, x, lam, mu):
        return self.value_grad(x, lam, mu)[0]

    def hessian(self, x: np.ndarray, lam: np.ndarray, mu: float) -> sp.csr_matrix:
        a11, a12, a22, g = self.parts(x)
        _, pd, pdd = self._penalty_terms(g, lam, mu)
        w = self.wc
        Jg = sp.diags(a22) @ self.D11 + sp.diags(a11) @ self.D22 - 2 * sp.diags(a12) @ self.D12
        m = sp.diags(w * pd)
        cross = self.D11.T @ m @ self.D22
        H = self.H_energy + Jg.T @ sp.diags(w * pdd) @ Jg + cross + cross.T - 2 * self.D12.T @ m @ self.D12
        return H.tocsr()


def constraint_mask(grid: Grid2D, constrain: str = "interior") -> np.ndarray:
    """Active-vector mask of nodes carrying the determinant constraint.

    ``interior``: nodes whose eight neighbours are all active, so the
    constraint uses the centred Hessian; the one-cell boundary layer then
    carries the free boundary behaviour (imposing det D^2 v = f at every
    node would leave more equations than unknowns modulo affine maps).
    """
    from .discretization import INTERIOR

    if constrain == "all":
        return np.ones(grid.n_active, dtype=bool)
    return grid.mask[grid.active] == INTERIOR


def _pinned_nodes(grid: Grid2D) -> np.ndarray:
    ci, cj = grid.center_index
    idx = grid.index
    return np.array([idx[ci, cj], idx[ci + 1, cj], idx[ci, cj + 1]])


def _sparse_solve(K: sp.csc_matrix, b: np.ndarray) -> np.ndarray:
    """Symmetric-mode LU with a minimum-degree ordering, checked by its residual."""
    try:
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        x = lu.solve(b)
        if np.all(np.isfinite(x)) and np.linalg.norm(K @ x - b) <= 1e-8 * max(np.linalg.norm(b), 1e-300):
            return x
    except RuntimeError:
        pass
    return spla.spsolve(K, b)


def _newton_inner(obj: PenalizedObjective, x, lam, mu, free, tol, max_iter, trace_energy):
    J, gr = obj.value_grad(x, lam, mu)
    last_shift = 0.0
    for _ in range(max_iter):
        gfree = gr[free]
        gnorm = float(np.max(np.abs(gfree)))
        if gnorm <= tol * max(float(np.max(np.abs(obj.energy_grad(x)[free]))), 1e-300):
            break
        H = obj.hessian(x, lam, mu)[free][:, free].tocsc()
        diag_scale = float(np.max(np.abs(H.diagonal())))
        # Levenberg shift, restarted just below the last one that worked
        shift = 0.0 if last_shift < 1e-9 * diag_scale else 0.1 * last_shift
        for _attempt in range(14):
            try:
                K = H if shift == 0 else (H + shift * sp.identity(H.shape[0], format="csc"))
                d = _sparse_solve(K, -gfree)
            except RuntimeError:
                d = None
            if d is not None and np.all(np.isfinite(d)) and np.dot(d, gfree) < 0:
                break
            shift = max(1e-10 * diag_scale, 10 * shift)
        else:
            d = -gfree
        last_shift = shift
        slope = float(np.dot(d, gfree))
        if -slope < 1e-13 * (1.0 + abs(J)):
            # Newton decrement at round-off level
            break
        t = 1.0
        step = np.zeros_like(x)
        while True:
            step[free] = t * d
            Jn, grn = obj.value_grad(x + step, lam, mu)
            if Jn <= J + 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10:
            break
        x = x + step
        J, gr = Jn, grn
        trace_energy.append(J)
    return x


def _lbfgs_inner(obj: PenalizedObjective, x, lam, mu, free, tol, max_iter, trace_energy):
    base = x.copy()

    def fun(y):
        z = base.copy()
        z[free] = y
        J, g = obj.value_grad(z, lam, mu)
        return J, g[free]

    gscale = float(np.max(np.abs(obj.energy_grad(x)[free])))
    res = minimize(fun, x[free], jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter * 40, "gtol": tol * gscale, "ftol": 1e-15, "maxcor": 30})
    out = base.copy()
    out[free] = res.x
    trace_energy.append(float(res.fun))
    return out


def _minimize(f: ScalarField, cfg: SolverConfig, v0: ScalarField) -> SolveReport:
    grid = f.grid
    if v0.grid is not grid:
        raise ConfigurationError("f and v0 must live on the same grid")
    fvec = f.vec
    if not np.all(np.isfinite(fvec)) or not np.all(np.isfinite(v0.vec)):
        raise ConfigurationError("f and v0 must be finite on active nodes")
    if cfg.mode == "equality" and fvec.min() < 0 < fvec.max():
        warnings.warn("f changes sign; no convergence guarantee", RuntimeWarning, stacklevel=3)
    obj = PenalizedObjective(grid, fvec, cfg.mode, cfg.constrain)
    x = v0.vec.copy()
    free = np.ones(x.size, dtype=bool)
    free[_pinned_nodes(grid)] = False
    lam = np.zeros_like(x)
    mu = cfg.penalty_mu
    inner = _newton_inner if cfg.inner == "newton" else _lbfgs_inner
    trace = []
    inner_energy: list[float] = []
    prev_viol = np.inf
    converged = False
    k = 0
    for k in range(1, cfg.max_outer + 1):
        # inexact inner solves early on, tightening with the constraint violation
        tol_k = max(cfg.inner_tol, min(1e-3, 1e-2 * prev_viol))
        x = inner(obj, x, lam, mu, free, tol_k, cfg.max_inner, inner_energy)
        _, _, _, g = obj.parts(x)
        g = np.where(obj.cmask, g, 0.0)
        viol = _violation(g, lam, mu, cfg.mode)
        E = obj.energy(x)
        trace.append((E, viol))
        log.debug("outer %d: energy %.10g violation %.3e mu %.1e", k, E, viol, mu)
        if cfg.multiplier_update:
            lam = lam + mu * g if cfg.mode == "equality" else np.maximum(lam - mu * g, 0.0)
        if viol < cfg.constraint_tol:
            # Lagrangian stationarity with the updated multiplier, relative to the energy gradient
            _, gr = obj.value_grad(x, lam, mu)
            if np.max(np.abs(gr[free])) <= 1e-3 * max(np.max(np.abs(obj.energy_grad(x)[free])), 1e-300):
                converged = True
                break
        if viol > 0.25 * prev_viol or not cfg.multiplier_update:
            mu = min(mu * cfg.mu_growth, cfg.mu_max)
        prev_viol = viol
    v = ScalarField(grid, grid.from_vector(x))
    sign = 1.0 if cfg.mode == "equality" else -1.0
    lam_field = ScalarField(grid, grid.from_vector(sign * lam))
    vg = gauge_fix(v)
    Hs = hessian(vg)
    energy = integrate(Hs.frob2())
    psi = det2(Hs)
    _, _, _, g = obj.parts(x)
    g = g[obj.cmask]
    res = float(np.max(np.abs(g))) if cfg.mode == "equality" else float(max(0.0, -g.min()))
    # multipliers on the outermost constrained ring are not resolved; keep the
    # 13-point stencil clear of them
    el = el_residual(vg, lam_field, margin=_EL_MARGIN)[0]
    return SolveReport(vg, energy, res, el, k, trace, converged, lam_field, psi)


_EL_MARGIN = 6


def _violation(g, lam, mu, mode):
    if mode == "equality":
        return float(np.max(np.abs(g)))
    # infeasibility plus complementarity
    return float(np.max(np.abs(np.minimum(g, lam / mu))))


def constrained_minimize(f: ScalarField, cfg: SolverConfig | None = None, v0: ScalarField | None = None) -> SolveReport:
    """Minimise the bending energy subject to det D^2 v = f."""
    cfg = cfg or SolverConfig()
    if cfg.mode != "equality":
        cfg = replace(cfg, mode="equality")
    v0 = v0 if v0 is not None else default_start(f)
    return _minimize(f, cfg, v0)


def relaxed_minimize(f: ScalarField, cfg: SolverConfig | None = None, v0: ScalarField | None = None) -> SolveReport:
    """Minimise the bending energy subject to det D^2 v >= f; ``psi`` = det D^2 v."""
    cfg = cfg or SolverConfig()
    cfg = replace(cfg, mode="inequality")
    v0 = v0 if v0 is not None else default_start(f)
    return _minimize(f, cfg, v0)


def default_start(f: ScalarField) -> ScalarField:
    """Paraboloid sqrt(mean f) r^2 / 2 (saddle for negative mean)."""
    g = f.grid
    w = g.quad_weights
    m = float(np.sum(w[g.active] * f.vec) / np.sum(w[g.active]))
    if m >= 0:
        return g.sample(lambda x, y: np.sqrt(m) * (x * x + y * y) / 2)
    return g.sample(lambda x, y: np.sqrt(-m) * (x * x - y * y) / 2)


# ----------------------------------------------------------------------------
# Euler-Lagrange residuals

def _boundary_order(grid: Grid2D) -> np.ndarray:
    """Boundary nodes as a closed polyline, ordered by angle about the centre."""
    I, J = np.nonzero(grid.mask == BOUNDARY)
    c = grid.lo + grid.h * (grid.n - 1) / 2
    ang = np.arctan2(grid.x2[I, J] - c, grid.x1[I, J] - c)
    order = np.argsort(ang, kind="stable")
    return np.column_stack([I[order], J[order]])


def el_residual(v: ScalarField, lam: ScalarField, margin: int = 3) -> tuple[float, float, float]:
    """Residuals of 2 Delta^2 v + cof D^2 v : D^2 lam = 0 and the natural boundary conditions.

    interior: max over nodes at depth >= ``margin`` (13-point biharmonic
    stencil; the default excludes the two-cell fringe);
    bdry_normal: max |(2 D^2 v + lam cof D^2 v) : (n x n)| on boundary nodes;
    bdry_third: max |d_tau[(2 D^2 v + lam cof D^2 v) : (tau x n)]
    + (2 grad Delta v + cof D^2 v grad lam) . n| with d_tau taken along the
    boundary polyline.

    On the staircase boundary of the disk the one-sided third derivatives in
    bdry_third do not converge; it stays O(1) for a general radial pair and is
    only a coarse diagnostic.
    """
    grid = v.grid
    Hv = hessian(v)
    Hl = hessian(lam)
    cof = cof2(Hv)
    inner = 2 * bilaplacian(v).values + cof.contract(Hl).values
    interior = ScalarField(grid, inner).max_abs(grid.depth >= margin)

    n1, n2 = grid.boundary_normals()
    b = grid.mask == BOUNDARY
    lv = lam.values
    M11 = 2 * Hv.a11 + lv * cof.a11
    M12 = 2 * Hv.a12 + lv * cof.a12
    M22 = 2 * Hv.a22 + lv * cof.a22
    nn = M11 * n1 * n1 + 2 * M12 * n1 * n2 + M22 * n2 * n2
    bdry_normal = float(np.max(np.abs(nn[b])))

    t1, t2 = -n2, n1
    tn = M11 * t1 * n1 + M12 * (t1 * n2 + t2 * n1) + M22 * t2 * n2
    lap = ScalarField(grid, Hv.a11 + Hv.a22)
    L1, L2 = gradient(lap)
    l1, l2 = gradient(lam)
    flux = (2 * L1.values + cof.a11 * l1.values + cof.a12 * l2.values) * n1 + (
        2 * L2.values + cof.a12 * l1.values + cof.a22 * l2.values
    ) * n2
    poly = _boundary_order(grid)
    P = np.column_stack([grid.x1[poly[:, 0], poly[:, 1]], grid.x2[poly[:, 0], poly[:, 1]]])
    vals = tn[poly[:, 0], poly[:, 1]]
    seg = np.linalg.norm(np.roll(P, -1, 0) - P, axis=1)
    seg_prev = np.roll(seg, 1)
    nxt, prv = np.roll(vals, -1), np.roll(vals, 1)
    # non-uniform centred difference along the closed polyline
    dtau = (seg_prev ** 2 * (nxt - vals) + seg ** 2 * (vals - prv)) / (seg * seg_prev * (seg + seg_prev))
    third = dtau + flux[poly[:, 0], poly[:, 1]]
    bdry_third = float(np.max(np.abs(third)))
    return float(interior), bdry_normal, bdry_third


# ----------------------------------------------------------------------------
# matching correction

@dataclass(frozen=True, eq=False)
class MatchingResult:
    z: ScalarField
    residual: float
    newton_trace: list
    kappa_max: float


def matching_metric(S: SymMatrixField, s_eps: SymMatrixField | None, eps: float) -> SymMatrixField:
    """P = Id + 2 eps^2 sym S + eps^3 s_eps."""
    grid = S.grid
    one = np.where(grid.active, 1.0, np.nan)
    s_eps = s_eps if s_eps is not None else SymMatrixField.constant(grid, 0.0, 0.0, 0.0)
    return SymMatrixField(
        grid,
        one + 2 * eps ** 2 * S.a11 + eps ** 3 * s_eps.a11,
        2 * eps ** 2 * S.a12 + eps ** 3 * s_eps.a12,
        one + 2 * eps ** 2 * S.a22 + eps ** 3 * s_eps.a22,
    )


class _MatchingSystem:
    """Discrete Phi(eps, .) for a fixed metric P and its exact Jacobian.

    Phi(u) = (1 - eps^2 q) det P kappa(P) / eps^2 - det(D^2 u - Gamma^k d_k u),
    q = grad u . P^-1 grad u.  For eps = 0 the limit
    -curl^T curl S - det D^2 u is used.
    """

    def __init__(self, P: SymMatrixField, S: SymMatrixField, eps: float):
        grid = P.grid
        self.grid, self.eps = grid, eps
        a = grid.active
        E, F, G = P.a11[a], P.a12[a], P.a22[a]
        self.detP = E * G - F * F
        self.Pi = ((G / self.detP, -F / self.detP), (-F / self.detP, E / self.detP))
        if eps == 0:
            from .discretization import curlT_curl

            self.lead = -curlT_curl(S).vec
            self.gam = {(k, i, j): np.zeros(grid.n_active) for k in range(2) for i in range(2) for j in range(2)}
            self.kdet = np.zeros(grid.n_active)
            return
        kP = gauss_curvature_metric(P, ScalarField(grid, np.where(a, 0.0, np.nan)), 0.0).vec
        self.lead = self.detP * kP / eps ** 2
        self.kdet = self.detP * kP
        D1, D2 = grid.D1, grid.D2
        dP = [[[D1 @ E, D1 @ F], [D1 @ F, D1 @ G]], [[D2 @ E, D2 @ F], [D2 @ F, D2 @ G]]]
        Pi = self.Pi
        self.gam = {
            (k, i, j): 0.5 * sum(Pi[k][l] * (dP[j][i][l] + dP[i][j][l] - dP[l][i][j]) for l in range(2))
            for k in range(2)
            for i in range(2)
            for j in range(2)
        }

    def _pieces(self, x):
        g = self.grid
        p1, p2 = g.D1 @ x, g.D2 @ x
        ops = {(0, 0): g.D11, (0, 1): g.D12, (1, 1): g.D22}
        M = {ij: op @ x - self.gam[(0,) + ij] * p1 - self.gam[(1,) + ij] * p2 for ij, op in ops.items()}
        return p1, p2, ops, M

    def phi(self, x: np.ndarray) -> np.ndarray:
        p1, p2, _, M = self._pieces(x)
        Pi = self.Pi
        q = Pi[0][0] * p1 * p1 + 2 * Pi[0][1] * p1 * p2 + Pi[1][1] * p2 * p2
        return self.lead - self.eps ** 2 * q * self.lead - (M[0, 0] * M[1, 1] - M[0, 1] ** 2)

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        g = self.grid
        p1, p2, ops, M = self._pieces(x)
        Pi = self.Pi
        dq = sp.diags(2 * (Pi[0][0] * p1 + Pi[0][1] * p2)) @ g.D1 + sp.diags(2 * (Pi[0][1] * p1 + Pi[1][1] * p2)) @ g.D2
        dM = {ij: op - sp.diags(self.gam[(0,) + ij]) @ g.D1 - sp.diags(self.gam[(1,) + ij]) @ g.D2 for ij, op in ops.items()}
        ddet = sp.diags(M[1, 1]) @ dM[0, 0] + sp.diags(M[0, 0]) @ dM[1, 1] - 2 * sp.diags(M[0, 1]) @ dM[0, 1]
        return (-sp.diags(self.kdet) @ dq - ddet).tocsr()


def matching_phi(v: ScalarField, S: SymMatrixField, s_eps: SymMatrixField | None, eps: float, z: ScalarField) -> ScalarField:
    """Phi(eps, z) on the grid; zero exactly where the metric g_eps(z) is flat."""
    grid = v.grid
    system = _MatchingSystem(matching_metric(S, s_eps, eps), S, eps)
    return ScalarField(grid, grid.from_vector(system.phi(v.vec + z.vec)))


def matching_correct(
    v: ScalarField,
    S: SymMatrixField,
    s_eps: SymMatrixField | None,
    eps: float,
    *,
    tol: float = 1e-10,
    max_iter: int = 30,
    ellipticity_floor: float = 1e-8,
) -> MatchingResult:
    """Newton solve of Phi(eps, z) = 0 with z = 0 on boundary nodes.

    Every step solves the exact linearisation of the discrete Phi, whose
    leading part is the elliptic operator -cof D^2 v : D^2 z.
    """
    grid = v.grid
    from .discretization import curlT_curl

    core = grid.core
    curv = -curlT_curl(S)
    dv = det2(hessian(v))
    c = curv.values[core]
    if np.nanmin(c) <= ellipticity_floor or np.nanmin(dv.values[core]) <= ellipticity_floor:
        raise ValueError("matching needs -curl^T curl S >= c > 0 (uniform ellipticity)")
    if (dv - curv).max_abs(core) > 1e-6 * max(1.0, curv.max_abs(core)):
        raise ValueError("det D^2 v does not match -curl^T curl S")
    zero = np.where(grid.active, 0.0, np.nan)
    P = matching_metric(S, s_eps, eps)
    system = _MatchingSystem(P, S, eps)
    unknown = grid.mask[grid.active] != BOUNDARY
    x0 = v.vec
    z = np.zeros(grid.n_active)
    trace = []
    for _ in range(max_iter):
        r = system.phi(x0 + z) - (system.phi(x0) if eps == 0 else 0.0)
        res = float(np.max(np.abs(r[unknown])))
        trace.append(res)
        if res < tol:
            break
        J = system.jacobian(x0 + z)[unknown][:, unknown].tocsc()
        dz = spla.spsolve(J, -r[unknown])
        step = np.zeros_like(z)
        step[unknown] = dz
        t = 1.0
        while t > 1e-6:
            rn = system.phi(x0 + z + t * step)
            if np.max(np.abs(rn[unknown])) < (1 - 1e-4 * t) * res:
                break
            t *= 0.5
        z = z + t * step
        if len(trace) > 4 and trace[-1] > 0.9 * trace[-5]:
            raise NonConvergenceError(f"matching Newton stalled; residual trace {trace}")
    else:
        raise NonConvergenceError(f"matching Newton did not converge; residual trace {trace}")
    zf = ScalarField(grid, grid.from_vector(z))
    if eps == 0:
        return MatchingResult(ScalarField(grid, zero), trace[-1], trace, 0.0)
    kappa = gauss_curvature_metric(P, v + zf, eps).max_abs(core)
    return MatchingResult(zf, trace[-1], trace, kappa)
