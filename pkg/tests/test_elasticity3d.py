import numpy as np
import pytest
import sympy as sy
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from ma_plate.discretization import ConfigurationError, DomainError, make_grid
from ma_plate.elasticity3d import (
    ISOTROPIC_DEFAULT,
    X1,
    X2,
    GrowthSpec,
    QuadraticForm3,
    build_recovery,
    compat_check,
    density_W,
    dist_SO3,
    embed2,
    energy_3d,
    growth_tensor,
    l_map,
    limit_energy,
    reduce_Q2,
    sym,
)
from ma_plate.families import saddle_family

ZERO = sy.zeros(3, 3)


def _brute_dist(F, samples=4000, seed=1):
    R = Rotation.random(samples, random_state=seed).as_matrix()
    d = np.linalg.norm(F[None] - R, axis=(1, 2))
    # polish the best sample with a local search on the rotation vector
    from scipy.optimize import minimize

    r0 = Rotation.from_matrix(R[np.argmin(d)]).as_rotvec()
    res = minimize(lambda r: np.linalg.norm(F - Rotation.from_rotvec(r).as_matrix()), r0, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    return res.fun


def test_dist_examples():
    assert dist_SO3(np.eye(3)) == pytest.approx(0, abs=1e-14)
    R = Rotation.random(20, random_state=0).as_matrix()
    assert np.allclose(dist_SO3(R), 0, atol=1e-12)
    assert dist_SO3(2 * np.eye(3)) == pytest.approx(np.sqrt(3), rel=1e-14)
    assert _brute_dist(2 * np.eye(3)) == pytest.approx(np.sqrt(3), rel=1e-6)


def test_dist_negative_determinant():
    F = np.diag([1.0, 1.0, -1.0])
    assert dist_SO3(F) == pytest.approx(2.0)
    assert _brute_dist(F) == pytest.approx(2.0, rel=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_dist_matches_brute_force(entries):
    F = np.array(entries).reshape(3, 3)
    assert dist_SO3(F) == pytest.approx(_brute_dist(F), rel=1e-5, abs=1e-6)


def test_density_expansions():
    A = np.array([[0, 1, -2], [-1, 0, 0.5], [2, -0.5, 0]])
    S = np.array([[1, 0.3, 0], [0.3, -2, 1], [0, 1, 0.5]])
    skew = [density_W(np.eye(3) + eps * A) / eps ** 4 for eps in (1e-2, 1e-3)]
    assert skew[1] == pytest.approx(skew[0], rel=0.05)
    for eps in (1e-2, 1e-3):
        w = density_W(np.eye(3) + eps * S)
        assert w == pytest.approx(eps ** 2 * np.sum(S * S), rel=5 * eps)
    assert density_W(np.eye(3)) == 0


def test_quadratic_form_is_limit_of_W():
    G = np.random.default_rng(3).normal(size=(3, 3))
    eps = 1e-4
    assert density_W(np.eye(3) + eps * G) / eps ** 2 == pytest.approx(ISOTROPIC_DEFAULT(G), rel=1e-3)


def test_quadratic_form_validation():
    with pytest.raises(ConfigurationError):
        QuadraticForm3(0.0, 0.0)
    with pytest.raises(ConfigurationError):
        QuadraticForm3(-1.0, 1.0)
    q = QuadraticForm3(1.0, 1.0)
    F = np.random.default_rng(0).normal(size=(3, 3))
    assert q(F) == pytest.approx(q(sym(F)))


def test_reduce_Q2_examples():
    F = np.array([[1.0, 2.0], [0.0, -1.0]])
    val, c = reduce_Q2(ISOTROPIC_DEFAULT, F)
    assert val == pytest.approx(np.sum(sym(F) ** 2))
    assert np.allclose(c, 0)
    val, c = reduce_Q2(QuadraticForm3(1.0, 1.0), np.eye(2))
    assert val == pytest.approx(20 / 3)
    assert np.allclose(c, [0, 0, -2 / 3])
    val, c = reduce_Q2(QuadraticForm3(1.0, 1.0), np.zeros((2, 2)))
    assert val == 0 and np.all(c == 0)


def test_reduce_Q2_grid_search_oracle():
    q = QuadraticForm3(1.0, 1.0)
    F = np.array([[0.7, -0.2], [0.4, 1.3]])

    def q3(t):
        G = embed2(F)
        G[2, 2] = t
        return q(G)

    best = minimize_scalar(q3, bounds=(-5, 5), method="bounded", options={"xatol": 1e-12})
    val, c = reduce_Q2(q, F)
    assert val == pytest.approx(best.fun, rel=1e-9)
    assert c[2] == pytest.approx(best.x, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(
    lam=st.floats(0, 5), mu=st.floats(0.1, 5),
    F=st.lists(st.floats(-3, 3), min_size=4, max_size=4),
    l=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
)
def test_reduce_Q2_minimality(lam, mu, F, l):
    q = QuadraticForm3(lam, mu)
    F = np.array(F).reshape(2, 2)
    val, c = reduce_Q2(q, F)
    assert val <= q(embed2(F)) + 1e-10
    G = embed2(F)
    G[:, 2] += np.array(l)
    assert val <= q(G) + 1e-9
    # c is linear in F
    _, c2 = reduce_Q2(q, 2 * F)
    assert np.allclose(c2, 2 * c)


def test_l_map_examples():
    e = np.eye(3)
    assert np.allclose(l_map(np.outer(e[2], e[2])), [0, 0, 1])
    assert np.allclose(l_map(embed2(np.array([[1.0, 2.0], [3.0, 4.0]]))), 0)
    assert np.allclose(l_map(np.outer(e[0], e[2])), [1, 0, 0])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_l_map_defining_identity(entries):
    F = np.array(entries).reshape(3, 3)
    lhs = sym(F - embed2(F[:2, :2]))
    rhs = sym(np.outer(l_map(F), np.eye(3)[2]))
    assert np.allclose(lhs, rhs)


def _spec(gamma=1.5):
    S = sy.Matrix([[X1 ** 2, X1 * X2, 0], [0, sy.sin(X2), X1], [X2, 0, 1]])
    B = sy.Matrix([[1, X2, 0], [X2, -1, 0], [0, X1, 0]])
    return GrowthSpec(S, B, gamma, "test")


def test_growth_tensor_examples():
    spec = _spec()
    x1, x2 = np.array([0.3, -0.1]), np.array([0.2, 0.5])
    A, Ainv = growth_tensor(spec, 1e-8, x1, x2, np.zeros(2))
    assert np.allclose(A, np.eye(3), atol=1e-10)
    h = 0.1
    A, Ainv = growth_tensor(spec, h, x1, x2, np.zeros(2))
    assert np.allclose(A, np.eye(3) + h ** 1.5 * spec.S(x1, x2))
    assert np.allclose(A @ Ainv, np.eye(3))
    with pytest.raises(ConfigurationError):
        growth_tensor(spec, h, x1, x2, np.array([h, 0.0]))
    with pytest.raises(ConfigurationError):
        growth_tensor(spec, 0.0, x1, x2, np.zeros(2))


def test_growth_tensor_rejects_degenerate():
    spec = GrowthSpec(-2 * sy.eye(3), ZERO, 1.5)
    with pytest.raises(DomainError):
        growth_tensor(spec, 1.0, np.zeros(1), np.zeros(1), np.zeros(1))


def test_growth_inverse_expansion_order():
    spec = _spec()
    x1, x2 = np.array([0.3, -0.6]), np.array([0.2, 0.1])
    hs = 2.0 ** -np.arange(3, 9)
    errs = []
    for h in hs:
        x3 = np.full(2, 0.4 * h)
        _, Ainv = growth_tensor(spec, h, x1, x2, x3)
        approx = np.eye(3) - h ** 1.5 * spec.S(x1, x2) - h ** 0.75 * x3[:, None, None] * spec.B(x1, x2)
        errs.append(np.abs(Ainv - approx).max())
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope == pytest.approx(3.0, abs=0.1)


def test_recovery_trivial():
    spec = GrowthSpec(ZERO, ZERO, 1.5)
    u = build_recovery(spec, 0, (0, 0), h=0.1)
    x = np.array([0.2, -0.4]), np.array([0.1, 0.3]), np.array([0.01, -0.03])
    assert np.allclose(u(*x), np.stack(x, -1))
    assert energy_3d(u, spec, 0.1, (33, 3)) == pytest.approx(0, abs=1e-20)


def test_recovery_isotropic_warp():
    v = (X1 ** 2 + X2 ** 2) / 2
    w = (-X1 * (X1 ** 2 + X2 ** 2) / 8, -X2 * (X1 ** 2 + X2 ** 2) / 8)
    from ma_plate.harness import manufacture

    spec = manufacture(v, w)
    u = build_recovery(spec, v, w)
    d0, d1 = u.metadata["d0"], u.metadata["d1"]
    assert sy.simplify(d1) == sy.zeros(3, 1)
    expect = sy.Matrix([0, 0, -(X1 ** 2 + X2 ** 2) / 2])
    assert sy.simplify(d0 - expect) == sy.zeros(3, 1)


def test_recovery_rejects_mismatched_pair():
    spec = GrowthSpec(ZERO, ZERO, 1.5)
    with pytest.raises(ValueError):
        build_recovery(spec, (X1 ** 2 + X2 ** 2) / 2, (0, 0))


def test_zero_energy_rigid_motion():
    spec = GrowthSpec(ZERO, ZERO, 1.5)
    R = Rotation.from_rotvec([0.3, -1.1, 0.4]).as_matrix()
    u = build_recovery(spec, 0, (0, 0), h=0.05).compose_rotation(R)
    assert energy_3d(u, spec, 0.05, (33, 3)) < 1e-25


def test_frame_indifference():
    v = (X1 ** 2 + X2 ** 2) / 2
    w = (-X1 * (X1 ** 2 + X2 ** 2) / 8, -X2 * (X1 ** 2 + X2 ** 2) / 8)
    from ma_plate.harness import manufacture

    spec = manufacture(v, w, B_g=sy.Matrix([[0.5, 0, 0], [0, 0, 0], [0, 0, 0]]))
    h = 0.1
    u = build_recovery(spec, v, w, h=h)
    e0 = energy_3d(u, spec, h, (33, 3))
    for seed in range(3):
        R = Rotation.random(random_state=seed).as_matrix()
        e1 = energy_3d(u.compose_rotation(R), spec, h, (33, 3))
        assert e1 == pytest.approx(e0, rel=1e-10)


def test_energy_quadrature_validation():
    spec = GrowthSpec(ZERO, ZERO, 1.5)
    u = build_recovery(spec, 0, (0, 0))
    with pytest.raises(ConfigurationError):
        energy_3d(u, spec, 0.1, (17, 3))


def test_limit_energy_examples():
    g = make_grid("unit_disk", 129)
    w = g.quad_weights.sum()
    v = g.sample(lambda x, y: (x * x + y * y) / 2)
    assert limit_energy(v, None) == pytest.approx(2 * w / 12, rel=1e-12)
    assert abs(2 * w / 12 - 2 * np.pi / 12) < 0.01
    assert limit_energy(g.sample(lambda x, y: 0 * x), None) == 0
    vals = [limit_energy(saddle_family(th, g), None) for th in (0.0, 0.7, 2.1)]
    assert np.allclose(vals, 2 * w / 12, rtol=1e-12)


def test_compat_examples():
    assert compat_check(GrowthSpec(ZERO, ZERO)).compatible
    B = sy.Matrix([[0, X1], [X1, 0]])
    rep = compat_check(GrowthSpec(ZERO, B))
    # det B = -x1^2 also breaks the second condition when S = 0
    assert rep.violated == ("first", "second")
    S_bal = sy.Matrix([[0, 0], [0, X1 ** 4 / 12]])
    rep = compat_check(GrowthSpec(S_bal, B))
    assert rep.violated == ("first",) and str(rep) == "violated(first)"
    phi = -(X1 ** 2 + X2 ** 2) / 4
    S = phi * sy.eye(2)
    # the second condition reads curl^T curl (S) + det B = Delta phi + 1
    rep = compat_check(GrowthSpec(S, sy.eye(2)))
    assert rep.compatible and str(rep) == "compatible"
    rep = compat_check(GrowthSpec(S, ZERO))
    assert rep.violated == ("second",)
