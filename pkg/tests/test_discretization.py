import numpy as np
import pytest
import sympy as sy
from hypothesis import given, settings, strategies as st

from ma_plate.discretization import (
    BOUNDARY,
    INTERIOR,
    ConfigurationError,
    DomainError,
    ScalarField,
    SymMatrixField,
    bilaplacian,
    cof2,
    curlT_curl,
    det2,
    gauss_curvature_metric,
    gradient,
    hessian,
    integrate,
    make_grid,
    row_curls,
    self_outer,
)
from ma_plate.families import saddle_family


@pytest.fixture(scope="module")
def disk65():
    return make_grid("unit_disk", 65)


@pytest.fixture(scope="module")
def square33():
    return make_grid("unit_square", 33)


def test_square_weights_exact():
    g = make_grid("unit_square", 65)
    assert abs(g.quad_weights[g.active].sum() - 1.0) < 1e-12
    assert np.all(g.mask != 0)


def test_disk_weights_converge():
    errs = [abs(make_grid("unit_disk", n).quad_weights.sum() - np.pi) for n in (33, 65, 129)]
    assert errs[-1] < 0.03
    assert errs[0] > errs[1] > errs[2]
    for n in (33, 65, 129):
        g = make_grid("unit_disk", n)
        assert abs(g.quad_weights.sum() - np.pi) / np.pi < 4 / n


def test_small_grid_rejected():
    with pytest.raises(ConfigurationError):
        make_grid("unit_disk", 5)
    with pytest.raises(ConfigurationError):
        make_grid("annulus", 33)


def test_disk_mask_geometry(disk65):
    g = disk65
    r = np.hypot(g.x1, g.x2)
    assert np.array_equal(g.active, r < 1)
    assert np.all(g.mask[g.active] >= BOUNDARY)
    n1, n2 = g.boundary_normals()
    b = g.mask == BOUNDARY
    assert np.allclose(n1[b] ** 2 + n2[b] ** 2, 1.0)
    assert np.all(n1[b] * g.x1[b] + n2[b] * g.x2[b] > 0)


def test_vector_roundtrip(disk65):
    g = disk65
    v = g.sample(lambda x, y: x + 2 * y)
    assert np.array_equal(g.from_vector(g.to_vector(v.values))[g.active], v.values[g.active])


@pytest.mark.parametrize("kind", ["unit_disk", "unit_square"])
def test_gradient_exact_on_quadratics(kind):
    g = make_grid(kind, 33)
    p1, p2 = gradient(g.sample(lambda x, y: x * y))
    assert p1.max_abs() == pytest.approx(np.abs(g.x2[g.active]).max())
    assert np.allclose(p1.vec, g.x2[g.active], atol=1e-12)
    assert np.allclose(p2.vec, g.x1[g.active], atol=1e-12)
    q1, q2 = gradient(g.sample(lambda x, y: x + 0 * y))
    assert np.allclose(q1.vec, 1.0) and np.allclose(q2.vec, 0.0, atol=1e-12)


def test_gradient_second_order():
    errs = []
    for n in (33, 65, 129):
        g = make_grid("unit_disk", n)
        p1, _ = gradient(g.sample(lambda x, y: np.sin(x) + 0 * y))
        errs.append(np.abs(p1.vec - np.cos(g.x1[g.active])).max() / g.h ** 2)
    assert max(errs) < 1.0
    assert errs[-1] == pytest.approx(errs[-2], rel=0.2)


@pytest.mark.parametrize("kind", ["unit_disk", "unit_square"])
def test_hessian_exact_on_quadratics(kind):
    g = make_grid(kind, 33)
    H = hessian(g.sample(lambda x, y: (x * x + y * y) / 2))
    a = g.active
    assert np.allclose(H.a11[a], 1, atol=1e-10) and np.allclose(H.a22[a], 1, atol=1e-10)
    assert np.allclose(H.a12[a], 0, atol=1e-10)
    Hx = hessian(g.sample(lambda x, y: x * y))
    assert np.allclose(Hx.a12[a], 1, atol=1e-10) and np.allclose(Hx.a11[a], 0, atol=1e-10)
    Ha = hessian(g.sample(lambda x, y: 3 - x + 2 * y))
    assert Ha.frob2().max_abs() < 1e-16


def test_curlT_curl_examples(disk65):
    g = disk65
    x, y = g.x1, g.x2
    F = SymMatrixField(g, y * y, 0 * x, x * x)
    assert np.allclose(curlT_curl(F).values[g.core], 4.0, atol=1e-9)
    # sym grad w for w = (x1^2 x2, x1 x2^2)
    sg = SymMatrixField(g, 2 * x * y, 0.5 * (x * x + y * y), 2 * x * y)
    assert curlT_curl(sg).max_abs(g.core) < 1e-9
    v = g.sample(lambda x, y: (x * x + y * y) / 2)
    assert np.allclose(curlT_curl(self_outer(*gradient(v)).scale(0.5)).values[g.core], -1.0, atol=1e-9)


def test_det_cof_examples(disk65):
    g = disk65
    I = SymMatrixField.constant(g, 1.0, 0.0, 1.0)
    assert np.allclose(det2(I).vec, 1.0)
    D = SymMatrixField.constant(g, 2.0, 0.0, 5.0)
    C = cof2(D)
    assert np.allclose(det2(D).vec, 10.0)
    assert np.allclose(C.a11[g.active], 5.0) and np.allclose(C.a22[g.active], 2.0)
    for th in (0.0, 0.3, 2.1):
        d = det2(hessian(saddle_family(th, g)))
        assert np.allclose(d.vec, -1.0, atol=1e-10)


def test_bilaplacian_examples(disk65):
    g = disk65
    b = bilaplacian(g.sample(lambda x, y: x ** 4 + 0 * y))
    assert np.allclose(b.values[g.core], 24.0, atol=1e-6)
    assert bilaplacian(g.sample(lambda x, y: (x * x - y * y) / 2)).max_abs(g.core) < 1e-8
    assert bilaplacian(g.sample(lambda x, y: (x * x + y * y) / 2)).max_abs(g.core) < 1e-8
    # fringe nodes carry NaN rather than a wrong value
    assert np.all(np.isnan(b.values[g.mask == BOUNDARY]))


def test_integrate_examples():
    g = make_grid("unit_disk", 129)
    one = g.sample(lambda x, y: 1 + 0 * x)
    assert abs(integrate(one) - np.pi) < 0.03
    assert integrate(one * 2.0) == pytest.approx(2 * integrate(one), rel=1e-15)
    v = g.sample(lambda x, y: (x * x + y * y) / 2)
    assert integrate(hessian(v).frob2()) == pytest.approx(2 * integrate(one), rel=1e-12)


def test_determinant_identity_order():
    """det D^2 v + 1/2 curl^T curl(grad v x grad v) -> 0 at second order."""
    errs = []
    for n in (33, 65, 129):
        g = make_grid("unit_disk", n)
        v = g.sample(lambda x, y: np.sin(x + 0.5 * y) + x ** 3 * y)
        d = det2(hessian(v)).values + 0.5 * curlT_curl(self_outer(*gradient(v))).values
        errs.append(np.nanmax(np.abs(d[g.core])))
    order = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
    assert min(order) > 1.6 and order[1] > 1.8


def test_gauss_curvature_flat_and_paraboloid(disk65):
    g = disk65
    I = SymMatrixField.constant(g, 1.0, 0.0, 1.0)
    zero = g.sample(lambda x, y: 0 * x)
    assert gauss_curvature_metric(I, zero, 0.0).max_abs() < 1e-14
    v = g.sample(lambda x, y: (x * x + y * y) / 2)
    r2 = (g.x1 ** 2 + g.x2 ** 2)
    for eps in (0.1, 0.3):
        k = gauss_curvature_metric(I, v, eps)
        exact = -eps ** 2 / (1 - eps ** 2 * r2) ** 2
        assert np.allclose(k.values[g.core], exact[g.core], atol=1e-10)


def test_gauss_curvature_rejects_indefinite(disk65):
    g = disk65
    P = SymMatrixField.constant(g, 1.0, 2.0, 1.0)
    with pytest.raises(DomainError):
        gauss_curvature_metric(P, g.sample(lambda x, y: 0 * x), 0.0)


def test_curvature_expansion_order():
    """kappa(Id + 2 eps^2 sym S)/eps^2 + curl^T curl S = O(eps^2)."""
    g = make_grid("unit_disk", 65)
    x, y = g.x1, g.x2
    S = SymMatrixField(g, np.sin(x) * y * y, 0.3 * x * y, np.cos(y) + x ** 2)
    target = curlT_curl(S)
    zero = g.sample(lambda x, y: 0 * x)
    errs = []
    for eps in (0.1, 0.05, 0.025):
        P = SymMatrixField(g, 1 + 2 * eps ** 2 * S.a11, 2 * eps ** 2 * S.a12, 1 + 2 * eps ** 2 * S.a22)
        k = gauss_curvature_metric(P, zero, 0.0)
        errs.append(np.nanmax(np.abs(k.values / eps ** 2 + target.values)[g.core]))
    assert np.log2(errs[0] / errs[1]) > 1.8 and np.log2(errs[1] / errs[2]) > 1.8


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-2, 2), b=st.floats(-2, 2), c=st.floats(-2, 2),
    d=st.floats(-2, 2), e=st.floats(-2, 2), k=st.floats(-2, 2),
)
def test_quadratic_exactness_property(a, b, c, d, e, k):
    g = make_grid("unit_disk", 17)
    v = g.sample(lambda x, y: a * x * x + b * x * y + c * y * y + d * x + e * y + k)
    H = hessian(v)
    act = g.active
    assert np.allclose(H.a11[act], 2 * a, atol=1e-9)
    assert np.allclose(H.a12[act], b, atol=1e-9)
    assert np.allclose(H.a22[act], 2 * c, atol=1e-9)
    assert np.allclose(det2(H).vec, 4 * a * c - b * b, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(p=st.floats(-1, 1), q=st.floats(-1, 1), s=st.floats(-1, 1))
def test_annihilation_property(p, q, s):
    """curl^T curl(sym grad w) vanishes for polynomial w of degree <= 3."""
    g = make_grid("unit_disk", 33)
    x, y = g.x1, g.x2
    # w = (p x^3 + q x y^2, s x^2 y)
    F = SymMatrixField(g, 3 * p * x * x + q * y * y, 0.5 * (2 * q * x * y + 2 * s * x * y), s * x * x)
    assert curlT_curl(F).max_abs(g.core) < 1e-8


def test_symbolic_curl_oracle(disk65):
    x1, x2 = sy.symbols("x1 x2")
    F = [sy.sin(x1) * x2, x1 * x2 ** 2, sy.exp(x1 / 2)]
    expr = sy.diff(F[2], x1, 2) - 2 * sy.diff(F[1], x1, x2) + sy.diff(F[0], x2, 2)
    fn = sy.lambdify((x1, x2), expr, "numpy")
    g = disk65
    vals = [sy.lambdify((x1, x2), f, "numpy") for f in F]
    Fld = SymMatrixField(g, *[np.broadcast_to(fv(g.x1, g.x2), g.x1.shape) * 1.0 for fv in vals])
    err = np.abs(curlT_curl(Fld).values - fn(g.x1, g.x2))[g.core].max()
    assert err < 5 * g.h ** 2


def test_row_curls_of_hessian_vanish(disk65):
    g = disk65
    v = g.sample(lambda x, y: np.exp(x) * np.cos(y))
    c1, c2 = row_curls(hessian(v))
    assert max(c1.max_abs(g.core), c2.max_abs(g.core)) < 5 * g.h ** 2
    q1, q2 = row_curls(hessian(g.sample(lambda x, y: x ** 3 - 3 * x * y * y)))
    assert max(q1.max_abs(g.core), q2.max_abs(g.core)) < 1e-9


def test_scalar_field_arithmetic(disk65):
    g = disk65
    u = g.sample(lambda x, y: x)
    w = g.sample(lambda x, y: y)
    z = (u + w) * 2.0 - u
    assert isinstance(z, ScalarField)
    assert np.allclose(z.vec, (g.x1 + 2 * g.x2)[g.active])
    assert (-u).max_abs() == u.max_abs()
    assert g.mask[g.center_index] == INTERIOR
