"""Masked Cartesian grids, finite-difference operators and quadrature.

Every differential operator is assembled once per grid as a sparse matrix
acting on the vector of *active* (non-exterior) nodes.  Centered stencils are
used wherever the neighbours exist; at the mask fringe the stencils switch to
one-sided second-order formulas.  All operators reproduce polynomials of
degree <= 2 exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

EXTERIOR, BOUNDARY, INTERIOR = 0, 1, 2

DOMAIN_KINDS = ("unit_square", "unit_disk")


class ConfigurationError(ValueError):
    """Raised for invalid grid or run configuration."""


class DomainError(ArithmeticError):
    """Raised when a pointwise formula leaves its domain of validity."""


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Uniform node grid on the unit square [0, 1]^2 or the unit disk.

    Arrays are indexed ``[i, j]`` with ``x1 = lo + i*h`` and ``x2 = lo + j*h``.
    """

    domain_kind: str
    n: int
    h: float
    lo: float
    mask: np.ndarray
    quad_weights: np.ndarray

    @property
    def extent(self) -> float:
        return self.h * (self.n - 1)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        t = self.lo + self.h * np.arange(self.n)
        return np.meshgrid(t, t, indexing="ij")

    @property
    def x1(self) -> np.ndarray:
        return self.coords[0]

    @property
    def x2(self) -> np.ndarray:
        return self.coords[1]

    @cached_property
    def active(self) -> np.ndarray:
        return self.mask != EXTERIOR

    @cached_property
    def n_active(self) -> int:
        return int(self.active.sum())

    @cached_property
    def index(self) -> np.ndarray:
        """Position of each node in the active vector (-1 on exterior nodes)."""
        idx = -np.ones((self.n, self.n), dtype=np.int64)
        idx[self.active] = np.arange(self.n_active)
        return idx

    @cached_property
    def depth(self) -> np.ndarray:
        """Chessboard distance (in cells) to the nearest exterior node.

        Nodes outside the array count as exterior, so on the square the edge
        nodes have depth 1.
        """
        padded = np.pad(self.active, 1, constant_values=False)
        d = ndimage.distance_transform_cdt(padded, metric="chessboard")
        return d[1:-1, 1:-1]

    @property
    def core(self) -> np.ndarray:
        """Nodes that survive exclusion of a two-cell fringe."""
        return self.depth >= 3

    @property
    def center_index(self) -> tuple[int, int]:
        c = (self.n - 1) // 2
        return c, c

    def sample(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ScalarField":
        vals = np.full((self.n, self.n), np.nan)
        a = self.active
        vals[a] = np.broadcast_to(func(self.x1[a], self.x2[a]), (self.n_active,))
        return ScalarField(self, vals)

    def to_vector(self, values: np.ndarray) -> np.ndarray:
        return values[self.active]

    def from_vector(self, vec: np.ndarray) -> np.ndarray:
        out = np.full((self.n, self.n), np.nan)
        out[self.active] = vec
        return out

    def boundary_normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Outward unit normals at BOUNDARY nodes (NaN elsewhere)."""
        n1 = np.full((self.n, self.n), np.nan)
        n2 = np.full((self.n, self.n), np.nan)
        b = self.mask == BOUNDARY
        if self.domain_kind == "unit_disk":
            r = np.hypot(self.x1[b], self.x2[b])
            n1[b], n2[b] = self.x1[b] / r, self.x2[b] / r
        else:
            # nearest edge wins; corners take the diagonal
            y1 = self.x1[b] - 0.5
            y2 = self.x2[b] - 0.5
            m = np.maximum(np.abs(y1), np.abs(y2))
            a1 = np.where(np.isclose(np.abs(y1), m), np.sign(y1), 0.0)
            a2 = np.where(np.isclose(np.abs(y2), m), np.sign(y2), 0.0)
            nrm = np.hypot(a1, a2)
            n1[b], n2[b] = a1 / nrm, a2 / nrm
        return n1, n2

    # --- sparse operators on the active vector -------------------------
    @cached_property
    def _ops(self) -> dict[str, sp.csr_matrix]:
        D1 = _first_derivative(self, axis=0)
        D2 = _first_derivative(self, axis=1)
        D11 = _second_derivative(self, axis=0)
        D22 = _second_derivative(self, axis=1)
        D12 = (0.5 * (D1 @ D2 + D2 @ D1)).tocsr()
        D12.eliminate_zeros()
        return {"D1": D1, "D2": D2, "D11": D11, "D22": D22, "D12": D12}

    @property
    def D1(self) -> sp.csr_matrix:
        return self._ops["D1"]

    @property
    def D2(self) -> sp.csr_matrix:
        return self._ops["D2"]

    @property
    def D11(self) -> sp.csr_matrix:
        return self._ops["D11"]

    @property
    def D12(self) -> sp.csr_matrix:
        return self._ops["D12"]

    @property
    def D22(self) -> sp.csr_matrix:
        return self._ops["D22"]


def make_grid(domain_kind: str, n: int) -> Grid2D:
    """Build a uniform grid with mask and quadrature weights.

    ``unit_square`` is [0, 1]^2 with trapezoid weights; ``unit_disk`` is the
    open unit disk embedded in [-1, 1]^2, where each cell hands h^2/4 to every
    corner lying inside the disk.
    """
    if domain_kind not in DOMAIN_KINDS:
        raise ConfigurationError(f"unknown domain kind {domain_kind!r}")
    if int(n) != n or n < 9:
        raise ConfigurationError(f"need n >= 9 nodes per axis, got {n}")
    n = int(n)
    if domain_kind == "unit_square":
        lo, h = 0.0, 1.0 / (n - 1)
        inside = np.ones((n, n), dtype=bool)
    else:
        lo, h = -1.0, 2.0 / (n - 1)
        t = lo + h * np.arange(n)
        X1, X2 = np.meshgrid(t, t, indexing="ij")
        inside = X1 * X1 + X2 * X2 < 1.0

    # each cell contributes h^2/4 to every active corner
    cell_w = np.zeros((n, n))
    for di in (0, 1):
        for dj in (0, 1):
            sub = inside[di:n - 1 + di, dj:n - 1 + dj]
            cell_w[di:n - 1 + di, dj:n - 1 + dj] += sub * (h * h / 4)
    weights = np.where(inside, cell_w, 0.0)

    padded = np.pad(inside, 1, constant_values=False)
    full = np.ones_like(inside)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            full &= padded[1 + di:n + 1 + di, 1 + dj:n + 1 + dj]
    mask = np.where(inside, np.where(full, INTERIOR, BOUNDARY), EXTERIOR).astype(np.int8)
    grid = Grid2D(domain_kind, n, h, lo, mask, weights)
    grid._ops  # fail early if some node has no admissible stencil
    return grid


def _neighbour_ok(grid: Grid2D, axis: int, k: int) -> np.ndarray:
    """active[i + k e_axis] for every node (False past the array edge)."""
    a = grid.active
    out = np.zeros_like(a)
    n = grid.n
    if axis == 0:
        if k > 0:
            out[: n - k, :] = a[k:, :]
        else:
            out[-k:, :] = a[: n + k, :]
    else:
        if k > 0:
            out[:, : n - k] = a[:, k:]
        else:
            out[:, -k:] = a[:, : n + k]
    return out & a


def _assemble(grid: Grid2D, axis: int, plan: list[tuple[np.ndarray, dict[int, float]]]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    idx = grid.index
    I, J = np.nonzero(grid.active)
    assigned = np.zeros(grid.n_active, dtype=bool)
    for sel_full, stencil in plan:
        sel = sel_full[I, J] & ~assigned
        if not sel.any():
            continue
        assigned |= sel
        r = idx[I[sel], J[sel]]
        for off, c in stencil.items():
            if axis == 0:
                col = idx[I[sel] + off, J[sel]]
            else:
                col = idx[I[sel], J[sel] + off]
            rows.append(r)
            cols.append(col)
            vals.append(np.full(r.shape, c))
    if not assigned.all():
        bad = np.column_stack([I[~assigned], J[~assigned]])[:5]
        raise ConfigurationError(f"no admissible stencil along axis {axis} at nodes {bad.tolist()}")
    N = grid.n_active
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )


def _first_derivative(grid: Grid2D, axis: int) -> sp.csr_matrix:
    h = grid.h
    ok = {k: _neighbour_ok(grid, axis, k) for k in (-2, -1, 1, 2)}
    plan = [
        (ok[-1] & ok[1], {-1: -0.5 / h, 1: 0.5 / h}),
        (ok[1] & ok[2], {0: -1.5 / h, 1: 2.0 / h, 2: -0.5 / h}),
        (ok[-1] & ok[-2], {0: 1.5 / h, -1: -2.0 / h, -2: 0.5 / h}),
    ]
    return _assemble(grid, axis, plan)


def _second_derivative(grid: Grid2D, axis: int) -> sp.csr_matrix:
    h2 = grid.h ** 2
    ok = {k: _neighbour_ok(grid, axis, k) for k in (-3, -2, -1, 1, 2, 3)}
    plan = [
        (ok[-1] & ok[1], {-1: 1 / h2, 0: -2 / h2, 1: 1 / h2}),
        (ok[1] & ok[2] & ok[3], {0: 2 / h2, 1: -5 / h2, 2: 4 / h2, 3: -1 / h2}),
        (ok[-1] & ok[-2] & ok[-3], {0: 2 / h2, -1: -5 / h2, -2: 4 / h2, -3: -1 / h2}),
        (ok[1] & ok[2], {0: 1 / h2, 1: -2 / h2, 2: 1 / h2}),
        (ok[-1] & ok[-2], {0: 1 / h2, -1: -2 / h2, -2: 1 / h2}),
    ]
    return _assemble(grid, axis, plan)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid2D
    values: np.ndarray

    @property
    def vec(self) -> np.ndarray:
        return self.values[self.grid.active]

    def __add__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values + o)

    def __sub__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values - o)

    def __mul__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.grid, self.values * o)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def max_abs(self, where: np.ndarray | None = None) -> float:
        where = self.grid.active if where is None else where & self.grid.active
        v = self.values[where]
        v = v[np.isfinite(v)]
        return float(np.max(np.abs(v))) if v.size else 0.0


@dataclass(frozen=True, eq=False)
class SymMatrixField:
    grid: Grid2D
    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray

    @classmethod
    def constant(cls, grid: Grid2D, a11: float, a12: float, a22: float) -> "SymMatrixField":
        nan = np.where(grid.active, 1.0, np.nan)
        return cls(grid, a11 * nan, a12 * nan, a22 * nan)

    def __add__(self, other: "SymMatrixField") -> "SymMatrixField":
        return SymMatrixField(self.grid, self.a11 + other.a11, self.a12 + other.a12, self.a22 + other.a22)

    def __sub__(self, other: "SymMatrixField") -> "SymMatrixField":
        return SymMatrixField(self.grid, self.a11 - other.a11, self.a12 - other.a12, self.a22 - other.a22)

    def scale(self, c) -> "SymMatrixField":
        c = c.values if isinstance(c, ScalarField) else c
        return SymMatrixField(self.grid, c * self.a11, c * self.a12, c * self.a22)

    def frob2(self) -> ScalarField:
        return ScalarField(self.grid, self.a11 ** 2 + 2 * self.a12 ** 2 + self.a22 ** 2)

    def trace(self) -> ScalarField:
        return ScalarField(self.grid, self.a11 + self.a22)

    def contract(self, other: "SymMatrixField") -> ScalarField:
        return ScalarField(
            self.grid, self.a11 * other.a11 + 2 * self.a12 * other.a12 + self.a22 * other.a22
        )


def _apply(op: sp.csr_matrix, values: np.ndarray, grid: Grid2D) -> np.ndarray:
    return grid.from_vector(op @ values[grid.active])


def gradient(v: ScalarField) -> tuple[ScalarField, ScalarField]:
    g = v.grid
    return ScalarField(g, _apply(g.D1, v.values, g)), ScalarField(g, _apply(g.D2, v.values, g))


def hessian(v: ScalarField) -> SymMatrixField:
    g = v.grid
    return SymMatrixField(
        g, _apply(g.D11, v.values, g), _apply(g.D12, v.values, g), _apply(g.D22, v.values, g)
    )


def curlT_curl(F: SymMatrixField) -> ScalarField:
    """d11 F22 - 2 d12 F12 + d22 F11 (F symmetric)."""
    g = F.grid
    out = _apply(g.D11, F.a22, g) - 2 * _apply(g.D12, F.a12, g) + _apply(g.D22, F.a11, g)
    return ScalarField(g, out)


def row_curls(F: SymMatrixField) -> tuple[ScalarField, ScalarField]:
    """Curl of each row (d1 F_i2 - d2 F_i1) for i = 1, 2."""
    g = F.grid
    c1 = _apply(g.D1, F.a12, g) - _apply(g.D2, F.a11, g)
    c2 = _apply(g.D1, F.a22, g) - _apply(g.D2, F.a12, g)
    return ScalarField(g, c1), ScalarField(g, c2)


def det2(F: SymMatrixField) -> ScalarField:
    return ScalarField(F.grid, F.a11 * F.a22 - F.a12 ** 2)


def cof2(F: SymMatrixField) -> SymMatrixField:
    return SymMatrixField(F.grid, F.a22, -F.a12, F.a11)


def self_outer(p1: ScalarField, p2: ScalarField) -> SymMatrixField:
    """p (x) p for the vector field p = (p1, p2)."""
    return SymMatrixField(p1.grid, p1.values ** 2, p1.values * p2.values, p2.values ** 2)


def laplacian5(values: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Centered 5-point Laplacian; NaN where the stencil leaves the mask."""
    h2 = grid.h ** 2
    out = np.full_like(values, np.nan, dtype=float)
    c = values[1:-1, 1:-1]
    out[1:-1, 1:-1] = (values[2:, 1:-1] + values[:-2, 1:-1] + values[1:-1, 2:] + values[1:-1, :-2] - 4 * c) / h2
    return out


def bilaplacian(v: ScalarField) -> ScalarField:
    """13-point biharmonic stencil (5-point Laplacian applied twice).

    Nodes whose stencil reaches the exterior come back as NaN; residual norms
    skip them.
    """
    g = v.grid
    vals = np.where(g.active, v.values, np.nan)
    return ScalarField(g, laplacian5(laplacian5(vals, g), g))


def integrate(q: ScalarField) -> float:
    g = q.grid
    w = g.quad_weights[g.active]
    return float(np.dot(w, q.values[g.active]))


def gauss_curvature_metric(P: SymMatrixField, v1: ScalarField, eps: float) -> ScalarField:
    """Gauss curvature of the metric ``P - eps^2 grad v1 (x) grad v1``.

    ``kappa(P)`` is evaluated by the Brioschi formula and combined with the
    Christoffel-corrected Hessian of ``v1``::

        kappa(P) / (1 - eps^2 q) - eps^2 det(D2 v1 - Gamma^k d_k v1) / ((1 - eps^2 q)^2 det P)

    with ``q = P^{ij} d_i v1 d_j v1``.  All derivatives use the grid operators,
    so for ``v1 = 0`` the leading term reproduces ``-curlT_curl`` of the
    perturbation exactly.
    """
    if eps < 0:
        raise ConfigurationError("eps must be >= 0")
    g = P.grid
    act = g.active
    E, F, G = P.a11, P.a12, P.a22
    detP = E * G - F * F
    bad = act & ~((E > 0) & (detP > 0))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DomainError(f"metric not positive definite at node ({i}, {j})")

    d = {name: (lambda a, op=op: _apply(op, a, g)) for name, op in g._ops.items()}
    Eu, Ev, Fu, Fv, Gu, Gv = d["D1"](E), d["D2"](E), d["D1"](F), d["D2"](F), d["D1"](G), d["D2"](G)
    lead = -0.5 * d["D22"](E) + d["D12"](F) - 0.5 * d["D11"](G)
    M1 = np.stack(
        [
            np.stack([lead, 0.5 * Eu, Fu - 0.5 * Ev], -1),
            np.stack([Fv - 0.5 * Gu, E, F], -1),
            np.stack([0.5 * Gv, F, G], -1),
        ],
        -2,
    )
    zero = np.zeros_like(E)
    M2 = np.stack(
        [
            np.stack([zero, 0.5 * Ev, 0.5 * Gu], -1),
            np.stack([0.5 * Ev, E, F], -1),
            np.stack([0.5 * Gu, F, G], -1),
        ],
        -2,
    )
    with np.errstate(invalid="ignore"):
        kP = (np.linalg.det(np.nan_to_num(M1)) - np.linalg.det(np.nan_to_num(M2))) / detP ** 2
    kP = np.where(act, kP, np.nan)
    if eps == 0:
        return ScalarField(g, kP)

    # inverse metric and Christoffel symbols Gamma^k_ij
    Pinv = np.stack([np.stack([G, -F], -1), np.stack([-F, E], -1)], -2) / detP[..., None, None]
    dP = [  # dP[l][i][j] = d_l P_ij
        [[Eu, Fu], [Fu, Gu]],
        [[Ev, Fv], [Fv, Gv]],
    ]

    def christoffel(k: int, i: int, j: int) -> np.ndarray:
        return 0.5 * sum(
            Pinv[..., k, l] * (dP[j][i][l] + dP[i][j][l] - dP[l][i][j]) for l in range(2)
        )

    p1, p2 = d["D1"](v1.values), d["D2"](v1.values)
    H = hessian(v1)
    Hv = [[H.a11, H.a12], [H.a12, H.a22]]
    M = [[Hv[i][j] - christoffel(0, i, j) * p1 - christoffel(1, i, j) * p2 for j in range(2)] for i in range(2)]
    detM = M[0][0] * M[1][1] - M[0][1] * M[1][0]
    q = Pinv[..., 0, 0] * p1 * p1 + 2 * Pinv[..., 0, 1] * p1 * p2 + Pinv[..., 1, 1] * p2 * p2
    s = 1.0 - eps ** 2 * q
    if (act & ~(s > 0)).any():
        i, j = np.argwhere(act & ~(s > 0))[0]
        raise DomainError(f"perturbed metric degenerate at node ({i}, {j})")
    kappa = kP / s - eps ** 2 * detM / (s ** 2 * detP)
    return ScalarField(g, np.where(act, kappa, np.nan))
