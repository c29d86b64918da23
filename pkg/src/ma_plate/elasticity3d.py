"""Prestrained 3D energy on thin slabs and its quadratic reductions.

Growth tensors and deformations are closed-form: the stretching and bending
tensors are sympy matrices in ``x1, x2`` and the recovery deformation is a
sympy expression in ``x1, x2, x3, h``.  Gradients are therefore exact and the
only error in ``energy_3d`` is quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Sequence

import numpy as np
import sympy as sy

from .discretization import ConfigurationError, DomainError, Grid2D, ScalarField, hessian, integrate, make_grid

X1, X2, X3, H = sy.symbols("x1 x2 x3 h", real=True)


def _lambdify_array(exprs, args: Sequence[sy.Symbol], shape: tuple[int, ...]) -> Callable[..., np.ndarray]:
    """Vectorised evaluator returning an array of shape ``(..., *shape)``.

    Entries that are constants (or independent of some arguments) are
    broadcast, which plain ``sympy.lambdify`` on a Matrix does not do.
    """
    flat = [sy.sympify(e) for e in exprs]
    fns = [sy.lambdify(args, e, "numpy") for e in flat]

    def evaluate(*vals):
        vals = [np.asarray(v, dtype=float) for v in vals]
        base = np.broadcast_shapes(*(v.shape for v in vals))
        out = np.empty(base + (len(fns),))
        for k, fn in enumerate(fns):
            out[..., k] = fn(*vals)
        return out.reshape(base + shape)

    return evaluate


# ----------------------------------------------------------------------------
# pointwise matrix functions

def dist_SO3(F: np.ndarray) -> np.ndarray:
    """Frobenius distance from ``F`` (shape (..., 3, 3)) to SO(3)."""
    F = np.asarray(F, dtype=float)
    s = np.linalg.svd(F, compute_uv=False)
    neg = np.linalg.det(F) < 0
    # nearest rotation flips the smallest singular direction when det F < 0
    s_last = np.where(neg, -s[..., 2], s[..., 2])
    d2 = (s[..., 0] - 1) ** 2 + (s[..., 1] - 1) ** 2 + (s_last - 1) ** 2
    return np.sqrt(d2)


def density_W(F: np.ndarray) -> np.ndarray:
    """W(F) = dist^2(F, SO(3)); its quadratic part at Id is |sym F|^2."""
    return dist_SO3(F) ** 2


def sym(F: np.ndarray) -> np.ndarray:
    return 0.5 * (F + np.swapaxes(F, -1, -2))


@dataclass(frozen=True)
class QuadraticForm3:
    """Q3(F) = 2 mu |sym F|^2 + lambda (tr F)^2."""

    lame_lambda: float = 0.0
    lame_mu: float = 0.5

    def __post_init__(self):
        if not self.lame_mu > 0 or self.lame_lambda < 0:
            raise ConfigurationError("need mu > 0 and lambda >= 0")

    def __call__(self, F: np.ndarray) -> np.ndarray:
        S = sym(np.asarray(F, dtype=float))
        tr = np.trace(S, axis1=-2, axis2=-1)
        return 2 * self.lame_mu * np.sum(S * S, axis=(-2, -1)) + self.lame_lambda * tr ** 2

    @property
    def c3_factor(self) -> float:
        """c(F) = (0, 0, c3_factor * tr F) for the Lame family."""
        return -self.lame_lambda / (2 * self.lame_mu + self.lame_lambda)


ISOTROPIC_DEFAULT = QuadraticForm3(0.0, 0.5)


def embed2(F: np.ndarray) -> np.ndarray:
    """F* : the 3x3 matrix with F in the top-left block and zeros elsewhere."""
    F = np.asarray(F, dtype=float)
    out = np.zeros(F.shape[:-2] + (3, 3))
    out[..., :2, :2] = F
    return out


def reduce_Q2(q: QuadraticForm3, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimise Q3 over 3x3 extensions of the 2x2 matrix ``F``.

    Returns ``(Q2(F), c(F))`` with ``Q2(F) = Q3(F* + sym(c (x) e3))``.  Only the
    symmetric part of ``F`` matters; the off-plane shear components of ``c``
    vanish and the normal component solves a scalar linear equation.
    """
    F = np.asarray(F, dtype=float)
    tr = F[..., 0, 0] + F[..., 1, 1]
    c = np.zeros(F.shape[:-2] + (3,))
    c[..., 2] = q.c3_factor * tr
    full = embed2(F)
    full[..., 2, 2] += c[..., 2]
    return q(full), c


def l_map(F: np.ndarray) -> np.ndarray:
    """The vector l with sym(F - (F_2x2)*) = sym(l (x) e3)."""
    F = np.asarray(F, dtype=float)
    return np.stack([F[..., 0, 2] + F[..., 2, 0], F[..., 1, 2] + F[..., 2, 1], F[..., 2, 2]], -1)


# ----------------------------------------------------------------------------
# growth tensors

def _as_matrix(M) -> sy.ImmutableMatrix:
    M = sy.ImmutableMatrix(M)
    if M.shape == (2, 2):
        M = sy.ImmutableMatrix(3, 3, lambda i, j: M[i, j] if i < 2 and j < 2 else 0)
    if M.shape != (3, 3):
        raise ConfigurationError(f"growth tensor must be 3x3 (or a 2x2 block), got {M.shape}")
    return M


@dataclass(frozen=True)
class GrowthSpec:
    """A^h = Id + h^gamma S_g(x') + h^(gamma/2) x3 B_g(x')."""

    S_g: sy.ImmutableMatrix
    B_g: sy.ImmutableMatrix
    gamma: float = 1.5
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "S_g", _as_matrix(self.S_g))
        object.__setattr__(self, "B_g", _as_matrix(self.B_g))

    @cached_property
    def _S_fn(self):
        return _lambdify_array(list(self.S_g), (X1, X2), (3, 3))

    @cached_property
    def _B_fn(self):
        return _lambdify_array(list(self.B_g), (X1, X2), (3, 3))

    def S(self, x1, x2) -> np.ndarray:
        return self._S_fn(x1, x2)

    def B(self, x1, x2) -> np.ndarray:
        return self._B_fn(x1, x2)

    @property
    def sym_S2(self) -> sy.ImmutableMatrix:
        S = self.S_g
        return sy.ImmutableMatrix(2, 2, lambda i, j: (S[i, j] + S[j, i]) / 2)

    @property
    def sym_B2(self) -> sy.ImmutableMatrix:
        B = self.B_g
        return sy.ImmutableMatrix(2, 2, lambda i, j: (B[i, j] + B[j, i]) / 2)

    def target_curvature(self) -> sy.Expr:
        """f = -curl^T curl (S_g)_2x2 as a closed form in x1, x2."""
        S = self.sym_S2
        return sy.expand(-(sy.diff(S[1, 1], X1, 2) - 2 * sy.diff(S[0, 1], X1, X2) + sy.diff(S[0, 0], X2, 2)))


def growth_tensor(spec: GrowthSpec, h: float, x1, x2, x3) -> tuple[np.ndarray, np.ndarray]:
    """A^h at the given points together with its inverse."""
    if not h > 0:
        raise ConfigurationError("h must be positive")
    x3 = np.asarray(x3, dtype=float)
    if np.any(np.abs(x3) > h / 2 * (1 + 1e-12)):
        raise ConfigurationError("|x3| must not exceed h/2")
    g = spec.gamma
    S = spec.S(x1, x2)
    B = spec.B(x1, x2)
    A = np.eye(3) + h ** g * S + h ** (g / 2) * np.asarray(x3)[..., None, None] * B
    det = np.linalg.det(A)
    if np.any(det <= 0):
        raise DomainError("det A^h <= 0 for the requested thickness")
    return A, np.linalg.inv(A)


# ----------------------------------------------------------------------------
# recovery deformations

def _c_sym(q: QuadraticForm3, F2: sy.Matrix) -> sy.Matrix:
    return sy.Matrix([0, 0, sy.nsimplify(q.c3_factor) * (F2[0, 0] + F2[1, 1])])


def _l_sym(F: sy.Matrix) -> sy.Matrix:
    return sy.Matrix([F[0, 2] + F[2, 0], F[1, 2] + F[2, 1], F[2, 2]])


def stretching_residual(spec: GrowthSpec, v: sy.Expr, w: Sequence[sy.Expr]) -> sy.Matrix:
    """sym grad w + 1/2 grad v (x) grad v - (sym S_g)_2x2, symbolically."""
    gv = sy.Matrix([sy.diff(v, X1), sy.diff(v, X2)])
    Dw = sy.Matrix([[sy.diff(w[0], X1), sy.diff(w[0], X2)], [sy.diff(w[1], X1), sy.diff(w[1], X2)]])
    return sy.simplify((Dw + Dw.T) / 2 + gv * gv.T / 2 - sy.Matrix(spec.sym_S2))


@dataclass(frozen=True, eq=False)
class Deformation3:
    """u(x', x3) for a fixed thickness h, with its exact gradient."""

    h: float
    _u: Callable[..., np.ndarray]
    _grad: Callable[..., np.ndarray]
    metadata: dict

    def __call__(self, x1, x2, x3) -> np.ndarray:
        return self._u(x1, x2, x3, self.h)

    def grad(self, x1, x2, x3) -> np.ndarray:
        return self._grad(x1, x2, x3, self.h)

    def compose_rotation(self, R: np.ndarray) -> "Deformation3":
        R = np.asarray(R, dtype=float)
        u, g = self._u, self._grad
        return Deformation3(
            self.h,
            lambda *a: np.einsum("ij,...j->...i", R, u(*a)),
            lambda *a: np.einsum("ij,...jk->...ik", R, g(*a)),
            dict(self.metadata, rotated=True),
        )


@lru_cache(maxsize=32)
def _recovery_family(spec: GrowthSpec, v: sy.Expr, w: tuple, q: QuadraticForm3):
    g = sy.nsimplify(spec.gamma)
    gv = sy.Matrix([sy.diff(v, X1), sy.diff(v, X2)])
    Hv = sy.hessian(v, (X1, X2))
    Dw = sy.Matrix([[sy.diff(w[0], X1), sy.diff(w[0], X2)], [sy.diff(w[1], X1), sy.diff(w[1], X2)]])
    S, B = sy.Matrix(spec.S_g), sy.Matrix(spec.B_g)
    s = (Dw + Dw.T) / 2 + gv * gv.T / 2 - sy.Matrix(spec.sym_S2)
    d0 = _l_sym(S) - (gv.dot(gv) / 2) * sy.Matrix([0, 0, 1]) + _c_sym(q, s)
    d1 = _l_sym(B) + _c_sym(q, -Hv - sy.Matrix(spec.sym_B2))
    u = (
        sy.Matrix([X1 + H ** g * w[0], X2 + H ** g * w[1], H ** (g / 2) * v])
        + X3 * sy.Matrix([-H ** (g / 2) * gv[0], -H ** (g / 2) * gv[1], 1])
        + H ** g * X3 * d0
        + H ** (g / 2) * X3 ** 2 / 2 * d1
    )
    J = u.jacobian([X1, X2, X3])
    args = (X1, X2, X3, H)
    return (
        _lambdify_array(list(u), args, (3,)),
        _lambdify_array(list(J), args, (3, 3)),
        {"d0": d0, "d1": d1},
    )


def build_recovery(
    spec: GrowthSpec,
    v: sy.Expr,
    w: Sequence[sy.Expr],
    q: QuadraticForm3 = ISOTROPIC_DEFAULT,
    h: float = 0.1,
    *,
    audit_grid: Grid2D | None = None,
    tol: float = 1e-9,
) -> Deformation3:
    """Recovery deformation for the smooth pair ``(v, w)``.

    The pair must solve ``sym grad w = (sym S_g)_2x2 - 1/2 grad v (x) grad v``;
    the residual is sampled on ``audit_grid`` and the input rejected above
    ``tol``.  The bending warp ``d1`` is taken equal to its h -> 0 limit.
    """
    v = sy.sympify(v)
    w = tuple(sy.sympify(c) for c in w)
    grid = audit_grid or make_grid("unit_disk", 33)
    res = stretching_residual(spec, v, w)
    fn = _lambdify_array(list(res), (X1, X2), (2, 2))
    a = grid.active
    err = float(np.max(np.abs(fn(grid.x1[a], grid.x2[a])))) if len(res.free_symbols) or any(res) else 0.0
    if err > tol:
        raise ValueError(f"stretching residual {err:.3e} exceeds {tol:.1e}; (v, w) does not match S_g")
    u_fn, grad_fn, meta = _recovery_family(spec, v, w, q)
    return Deformation3(float(h), u_fn, grad_fn, dict(meta, v=v, w=w))


def energy_3d(
    u: Deformation3,
    spec: GrowthSpec,
    h: float,
    quad: tuple[int, int] = (65, 3),
    domain_kind: str = "unit_disk",
) -> float:
    """(1/h) * integral over the slab of W(grad u (A^h)^-1).

    In-plane: masked grid quadrature; through the thickness: Gauss-Legendre.
    """
    n_plane, n_thick = quad
    if n_plane < 33 or n_thick < 3:
        raise ConfigurationError("quadrature resolution must be at least (33, 3)")
    grid = make_grid(domain_kind, n_plane)
    a = grid.active
    x1, x2 = grid.x1[a], grid.x2[a]
    wq = grid.quad_weights[a]
    t, wt = np.polynomial.legendre.leggauss(n_thick)
    total = 0.0
    for tk, wk in zip(t, wt):
        x3 = np.full_like(x1, 0.5 * h * tk)
        _, Ainv = growth_tensor(spec, h, x1, x2, x3)
        F = u.grad(x1, x2, x3) @ Ainv
        # (1/h) * (h/2) * wk from the change of variables x3 = h t / 2
        total += 0.5 * wk * float(np.dot(wq, density_W(F)))
    return total


def limit_energy(v: ScalarField, spec_or_B, q: QuadraticForm3 = ISOTROPIC_DEFAULT) -> float:
    """(1/12) * integral of Q2(D^2 v + (sym B_g)_2x2) with the grid Hessian."""
    grid = v.grid
    Hs = hessian(v)
    a = grid.active
    if isinstance(spec_or_B, GrowthSpec):
        B = spec_or_B.B(grid.x1[a], grid.x2[a])
    elif spec_or_B is None:
        B = np.zeros((grid.n_active, 3, 3))
    else:
        B = np.broadcast_to(spec_or_B(grid.x1[a], grid.x2[a]), (grid.n_active, 3, 3))
    M = np.empty((grid.n_active, 2, 2))
    M[:, 0, 0] = Hs.a11[a] + B[:, 0, 0]
    M[:, 1, 1] = Hs.a22[a] + B[:, 1, 1]
    M[:, 0, 1] = M[:, 1, 0] = Hs.a12[a] + 0.5 * (B[:, 0, 1] + B[:, 1, 0])
    val, _ = reduce_Q2(q, M)
    return float(np.dot(grid.quad_weights[a], val)) / 12.0


@dataclass(frozen=True)
class CompatReport:
    compatible: bool
    violated: tuple[str, ...]
    curl_residual: float
    gauss_residual: float

    def __str__(self) -> str:
        if self.compatible:
            return "compatible"
        return "violated(" + ",".join(self.violated) + ")"


def compat_check(spec: GrowthSpec, grid: Grid2D | None = None, tol: float = 1e-8) -> CompatReport:
    """Linearised Gauss-Codazzi-Mainardi test for (S_g, B_g).

    ``first``: row curls of (sym B_g)_2x2 vanish; ``second``:
    curl^T curl (S_g)_2x2 + det (sym B_g)_2x2 vanishes.  Both are computed in
    closed form and sampled in max norm on ``grid``.
    """
    grid = grid or make_grid("unit_disk", 65)
    B = spec.sym_B2
    curls = [sy.diff(B[i, 1], X1) - sy.diff(B[i, 0], X2) for i in range(2)]
    gauss = -spec.target_curvature() + B.det()
    fn = _lambdify_array(curls + [gauss], (X1, X2), (3,))
    a = grid.active
    vals = np.abs(fn(grid.x1[a], grid.x2[a]))
    c_res = float(vals[:, :2].max())
    g_res = float(vals[:, 2].max())
    violated = tuple(name for name, r in (("first", c_res), ("second", g_res)) if r > tol)
    return CompatReport(not violated, violated, c_res, g_res)
