import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import xlogy

from hfo2ps import _kernels as kern
from hfo2ps import projection as proj

from oracles import kl

ENT = proj.EntropyPotential()
EUC = proj.EuclideanPotential()


# ---------------------------------------------------------------- closed forms


def test_hyperplane_examples():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(proj.euclid_project_hyperplane(x, [[1.0, 1.0]], [3.0]), x)
    np.testing.assert_allclose(proj.euclid_project_hyperplane([1.0, 1.0], [[1.0, 1.0]], [0.0]), [0.0, 0.0], atol=1e-15)


def test_hyperplane_rank_deficient():
    with pytest.raises(np.linalg.LinAlgError):
        proj.euclid_project_hyperplane(np.ones(3), np.ones((2, 3)), np.ones(2))


@pytest.mark.parametrize("seed", range(20))
def test_hyperplane_matches_kkt(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 4))
    A, b, x = rng.normal(size=(m, 5)), rng.normal(size=m), rng.normal(size=5)
    # min ||y - x||^2 / 2 s.t. A y = b  <=>  [I A^T; A 0][y; mu] = [x; b]
    K = np.block([[np.eye(5), A.T], [A, np.zeros((m, m))]])
    want = np.linalg.solve(K, np.concatenate([x, b]))[:5]
    got = proj.euclid_project_hyperplane(x, A, b)
    np.testing.assert_allclose(got, want, atol=1e-9)
    np.testing.assert_allclose(A @ got, b, atol=1e-12)


def test_halfspace_examples():
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(proj.euclid_project_halfspace(x, [1.0, 0.0], 1.0), x)
    np.testing.assert_allclose(proj.euclid_project_halfspace([2.0, 0.0], [1.0, 0.0], 1.0), [1.0, 0.0])
    with pytest.raises(ValueError):
        proj.euclid_project_halfspace(x, [0.0, 0.0], 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_halfspace_matches_clipped_kkt(seed):
    rng = np.random.default_rng(seed)
    c, x, d = rng.normal(size=4), rng.normal(size=4), float(rng.normal())
    # multiplier mu >= 0 with y = x - mu c on the boundary, clipped at zero
    mu = max(0.0, (c @ x - d) / (c @ c))
    np.testing.assert_allclose(proj.euclid_project_halfspace(x, c, d), x - mu * c, atol=1e-12)


def test_lin_opt_examples():
    np.testing.assert_allclose(proj.lin_opt_ellipsoid(np.eye(2), np.zeros(2), np.array([3.0, 4.0])), [0.6, 0.8])
    with pytest.raises(ValueError):
        proj.lin_opt_ellipsoid(np.eye(2), np.zeros(2), np.zeros(2))
    with pytest.raises(np.linalg.LinAlgError):
        proj.lin_opt_ellipsoid(-np.eye(2), np.zeros(2), np.ones(2))


@given(st.integers(0, 2**31))
def test_lin_opt_formula_and_boundary(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(3, 3))
    A = L @ L.T + 0.1 * np.eye(3)
    x, c = rng.normal(size=3), rng.normal(size=3)
    y = proj.lin_opt_ellipsoid(A, x, c)
    np.testing.assert_allclose(y, x + A @ c / np.sqrt(c @ A @ c), rtol=1e-12, atol=1e-12)
    dy = y - x
    assert abs(dy @ np.linalg.solve(A, dy) - 1.0) <= 1e-12


def test_lin_opt_beats_sampled_points(rng):
    L = rng.normal(size=(4, 4))
    A = L @ L.T + 0.1 * np.eye(4)
    x, c = rng.normal(size=4), rng.normal(size=4)
    best = c @ proj.lin_opt_ellipsoid(A, x, c)
    # random points of the ellipsoid x + A^{1/2} u with ||u|| <= 1
    u = rng.normal(size=(1000, 4))
    u *= (rng.random(1000) ** 0.25 / np.linalg.norm(u, axis=1))[:, None]
    pts = x + u @ np.linalg.cholesky(A).T
    assert np.all(pts @ c <= best + 1e-12)


def test_frank_wolfe_oracle_is_the_public_formula(rng):
    L = rng.normal(size=(3, 3))
    A = L @ L.T + np.eye(3)
    c = rng.normal(size=3)
    np.testing.assert_array_equal(kern.lin_opt_ellipsoid(A, np.zeros(3), c), proj.lin_opt_ellipsoid(A, np.zeros(3), c))


# ---------------------------------------------------------------- pieces


def test_piece_validation():
    with pytest.raises(ValueError):
        proj.Hyperplane(np.ones((2, 3)), [1.0, 2.0])
    with pytest.raises(ValueError):
        proj.Halfspace(np.zeros(3), 1.0)


def test_pseudo_inverse_threshold():
    W = np.diag([1.0, 1e-12, 0.0])
    np.testing.assert_allclose(proj.pseudo_inverse(W), np.diag([1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(proj.pseudo_inverse(np.zeros((2, 2))), np.zeros((2, 2)))


def _ellipsoid(rng, n=3, d=2, beta=0.3, spread=40.0):
    B = rng.dirichlet(np.ones(n), size=d).T
    return proj.OccupancyEllipsoid(B, np.ones(d) / d, spread * np.eye(d), beta, np.arange(n))


def test_ellipsoid_residual_zero_row_vacuous(rng):
    ell = _ellipsoid(rng)
    assert ell.residual(np.zeros(3)) == 0.0
    assert ell.residual(5.0 * ell.geometry.pc) <= 1e-12


# ---------------------------------------------------------------- single-piece KL projections


def test_satisfied_target_unchanged(rng):
    y = rng.random(4) + 0.1
    hs = proj.Halfspace(np.ones(4), y.sum() + 1.0)
    np.testing.assert_array_equal(proj.kl_project_piece(hs, y).point, y)
    hp = proj.Hyperplane(np.ones((1, 4)), [y.sum()])
    np.testing.assert_allclose(proj.kl_project_piece(hp, y).point, y, atol=1e-14)
    ell = _ellipsoid(rng)
    x = 2.0 * ell.geometry.pc
    np.testing.assert_allclose(proj.kl_project_piece(ell, x).point, x, atol=1e-12)


@given(st.integers(0, 2**31))
def test_simplex_projection_is_scaling(seed):
    rng = np.random.default_rng(seed)
    y = rng.random(6) * 3 + 1e-3
    got = proj.kl_project_piece(proj.Hyperplane(np.ones((1, 6)), [1.0]), y).point
    np.testing.assert_allclose(got, y / y.sum(), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_ellipsoid_projection_matches_grid(seed):
    rng = np.random.default_rng(seed)
    ell = _ellipsoid(rng)
    y = rng.random(3) + 0.05
    got = proj.kl_project_piece(ell, y).point
    assert ell.residual(got) <= 1e-12
    # normalized rows B theta on the line a^T theta = 1 inside the ellipsoid, times a mass
    B, c, S, beta = ell.B, ell.theta_hat, ell.Sigma, ell.beta
    a = B.sum(axis=0)
    th0, v = a / (a @ a), np.array([-a[1], a[0]])
    e = th0 - c
    qa, qb, qc = v @ S @ v, 2 * v @ S @ e, e @ S @ e - beta**2
    r = np.sqrt(qb * qb - 4 * qa * qc)
    t = np.linspace((-qb - r) / (2 * qa), (-qb + r) / (2 * qa), 20001)
    P = (th0[:, None] + v[:, None] * t[None]).T @ B.T
    P = P[np.all(P >= 0, axis=1)]
    n = np.linspace(0.2, 3.0, 2801)
    Z = n[:, None, None] * P[None]
    obj = np.sum(xlogy(Z, Z) - xlogy(Z, y), axis=2) - Z.sum(axis=2) + y.sum()
    assert kl(got, y) <= obj.min() + 1e-12
    assert kl(got, y) >= obj.min() - 1e-4


@given(st.integers(0, 2**31))
def test_feasibility_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    n = 5
    pieces = [
        proj.Hyperplane(np.ones((1, n)), [1.0]),
        proj.Halfspace(rng.normal(size=n), 0.0),
        _ellipsoid(rng, n=n, d=3, beta=0.5, spread=30.0),
    ]
    tol = 1e-12
    for piece in pieces:
        y = rng.random(n) + 0.01
        x = proj.kl_project_piece(piece, y, inner_tol=tol).point
        assert piece.residual(x) <= tol
        x2 = proj.kl_project_piece(piece, x, inner_tol=tol).point
        # the inner tolerance bounds the objective, so compare in divergence
        assert ENT.divergence(x2, x) <= tol


def test_euclidean_potential_rejects_ellipsoid(rng):
    with pytest.raises(TypeError):
        proj.kl_project_piece(_ellipsoid(rng), np.ones(3), EUC)


# ---------------------------------------------------------------- Dykstra


def test_dykstra_single_piece(rng):
    y = rng.random(5) + 0.1
    hp = proj.Hyperplane(np.ones((1, 5)), [1.0])
    one = proj.dykstra([hp], y, max_sweeps=1)
    np.testing.assert_allclose(one.point, y / y.sum(), atol=1e-12)
    full = proj.dykstra([hp], y)
    # the second sweep only confirms the first
    assert full.converged and full.sweeps <= 2
    np.testing.assert_allclose(full.point, one.point, atol=1e-12)


def test_dykstra_two_lines_euclidean(rng):
    a1, a2 = rng.normal(size=2), rng.normal(size=2)
    b = rng.normal(size=2)
    pieces = [proj.Hyperplane(a1[None], [b[0]]), proj.Hyperplane(a2[None], [b[1]])]
    res = proj.dykstra(pieces, rng.normal(size=2), EUC, eps=1e-14, max_sweeps=100000)
    np.testing.assert_allclose(res.point, np.linalg.solve(np.stack([a1, a2]), b), atol=1e-8)


def test_dykstra_euclidean_is_nearest_point(rng):
    # hyperplane plus halfspace in R^3: compare with the KKT solution
    A = np.ones((1, 3))
    c = np.array([1.0, -1.0, 0.0])
    x = np.array([2.0, -1.0, 0.5])
    res = proj.dykstra([proj.Hyperplane(A, [1.0]), proj.Halfspace(c, 0.0)], x, EUC, eps=1e-15, max_sweeps=100000)
    K = np.block([[np.eye(3), A.T, c[:, None]], [A, np.zeros((1, 2))], [c[None], np.zeros((1, 2))]])
    want = np.linalg.solve(K, np.concatenate([x, [1.0, 0.0]]))[:3]
    np.testing.assert_allclose(res.point, want, atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_dykstra_simplex_halfspace_grid(seed):
    rng = np.random.default_rng(seed)
    y = rng.random(3) + 0.1
    c = np.array([1.0, 0.0, 0.0])
    d = 0.5 * y[0] / y.sum()  # binding: the scaled target violates it
    res = proj.dykstra([proj.Hyperplane(np.ones((1, 3)), [1.0]), proj.Halfspace(c, d)], y, eps=1e-13)
    g = np.linspace(0.0, 1.0, 2001)
    X0, X1 = np.meshgrid(g, g, indexing="ij")
    X2 = 1.0 - X0 - X1
    ok = (X2 >= 0) & (X0 <= d)
    Z = np.stack([X0, X1, X2], axis=-1)
    obj = np.sum(xlogy(Z, Z) - xlogy(Z, y), axis=-1) - 1.0 + y.sum()
    best = obj[ok].min()
    assert abs(kl(res.point, y) - best) <= 1e-3
    assert res.point @ c <= d + 1e-10


def test_dykstra_distance_to_feasible_point_can_rise():
    # exact Euclidean Dykstra on a line, a halfspace and a disk: ||x_n - u||^2 is not monotone
    rng = np.random.default_rng(21)
    a, c, ctr = rng.normal(size=2), rng.normal(size=2), 0.3 * rng.normal(size=2)
    u = ctr + 0.5 * rng.normal() * np.array([-a[1], a[0]]) / np.linalg.norm(a)
    assert c @ u <= 0 and np.linalg.norm(u - ctr) <= 1.0

    def disk(x):
        v = x - ctr
        nv = np.linalg.norm(v)
        return x if nv <= 1.0 else ctr + v / nv

    projs = [
        lambda x: proj.euclid_project_hyperplane(x, a[None], [a @ ctr]),
        lambda x: proj.euclid_project_halfspace(x, c, 0.0),
        disk,
    ]
    x, q, vals = 4 * rng.normal(size=2), [np.zeros(2)] * 3, []
    for _ in range(10):
        for i, P in enumerate(projs):
            y = x + q[i]
            x = P(y)
            q[i] = y - x
        vals.append(float(np.sum((x - u) ** 2)))
    assert vals[1] > vals[0] + 1e-2
    assert vals[-1] < vals[0]


@pytest.mark.parametrize("potential", [ENT, EUC])
def test_dykstra_dual_ascent(rng, potential):
    n = 6
    B = rng.dirichlet(np.ones(n), size=3).T
    ell = proj.OccupancyEllipsoid(B, np.ones(3) / 3, 30 * np.eye(3), 0.5, np.arange(n))
    u = ell.geometry.pc
    pieces = [proj.Hyperplane(np.ones((1, n)), [1.0]), proj.Halfspace(np.eye(n)[0], u[0] + 0.01)]
    if potential is ENT:
        pieces.append(ell)
    else:
        pieces.append(proj.Halfspace(np.eye(n)[1], u[1]))
    y = rng.random(n) + 0.1
    trace = []
    res = proj.dykstra(pieces, y, potential, eps=1e-13, max_sweeps=5000, trace=trace)
    dual = np.array([t[3] for t in trace])
    assert np.all(np.diff(dual) >= -1e-12)
    assert res.converged
    assert abs(potential.divergence(res.point, y) - dual[-1]) <= 1e-8


def test_dykstra_reports_nonconvergence(rng):
    a1 = np.array([1.0, 1.0])
    a2 = np.array([1.0, 1.001])
    pieces = [proj.Hyperplane(a1[None], [1.0]), proj.Hyperplane(a2[None], [1.2])]
    res = proj.dykstra(pieces, np.zeros(2), EUC, eps=1e-15, max_sweeps=3)
    assert not res.converged and res.sweeps == 3
    assert max(res.residuals) > 0


def test_dykstra_needs_positive_start():
    with pytest.raises(ValueError):
        proj.dykstra([proj.Hyperplane(np.ones((1, 2)), [1.0])], np.array([1.0, 0.0]))


def test_dykstra_trace(rng):
    trace = []
    hp = proj.Hyperplane(np.ones((1, 3)), [1.0])
    proj.dykstra([hp], rng.random(3) + 0.1, trace=trace)
    assert trace and trace[-1][0] == len(trace)
