import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epiflow.errors import DegenerateGeometry, InputError
from epiflow.geometry import (CameraIntrinsics, EssentialParams, NormalizedCorrespondenceSet, params_from_pose,
                              residual_derivatives, so3_exp)
from epiflow.implicit import (ImplicitGradient, dtheta_dflow, hessian_theta, implicit_derivative, mixed_hessian,
                              total_gradient)
from epiflow.losses import epipolar_loss
from epiflow.robust import RobustConfig, irls_refine

from conftest import random_correspondences, random_pose, scene

CFG = RobustConfig()


@pytest.fixture(scope="module")
def solved():
    sc = scene(noise_sigma=0.5, outlier_fraction=0.3, num_points=400, rng_seed=4,
               translation_mode="uniform", width=640, height=480, fx=1600.0, fy=1600.0,
               depth_min=3.0, depth_max=30.0)
    corr = sc.correspondences()
    res = irls_refine(corr, EssentialParams.at_pose(sc.R, sc.t), CFG)
    return sc, corr, res


def grad_l(corr, params, mask):
    z, dz = residual_derivatives(corr.subset(mask), params)
    return dz.T @ z


def resolve(corr, res, i, c, h):
    out = []
    for s in (h, -h):
        r = irls_refine(corr.with_flow_offset(i, c, s), res.params, CFG)
        assert np.array_equal(r.inlier_mask, res.inlier_mask), "inlier flip"
        out.append(r.params.theta)
    return (out[0] - out[1]) / (2 * h)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_scalar_instance():
    # f(x, y) = (y - 3x)^2 has argmin g(x) = 3x
    assert implicit_derivative(2.0, -6.0) == 3.0


def test_hessian_noise_free_is_gauss_newton(clean_scene):
    corr = clean_scene.correspondences(noisy=False)
    p = clean_scene.params
    H = hessian_theta(corr, p)
    _, dz = residual_derivatives(corr, p)
    assert np.abs(H - dz.T @ dz).max() < 1e-12 * np.abs(H).max()
    assert np.linalg.eigvalsh(H).min() > -1e-12 * np.abs(H).max()


def test_hessian_matches_fd(solved):
    _, corr, res = solved
    m = res.inlier_mask
    H = hessian_theta(corr, res.params, inlier_mask=m)
    assert np.abs(H - H.T).max() < 1e-12
    h = 1e-6
    cols = []
    for e in np.eye(5):
        gp = grad_l(corr, res.params.with_theta(res.params.theta + h * e), m)
        gm = grad_l(corr, res.params.with_theta(res.params.theta - h * e), m)
        cols.append((gp - gm) / (2 * h))
    fd = np.column_stack(cols)
    assert np.abs(fd - H).max() / np.abs(H).max() < 1e-4


def test_mixed_hessian_matches_fd(solved):
    _, corr, res = solved
    m = res.inlier_mask
    M = mixed_hessian(corr, res.params, inlier_mask=m)
    outl = np.flatnonzero(~m)
    assert np.all(M[:, 2 * outl] == 0) and np.all(M[:, 2 * outl + 1] == 0)
    h = 1e-6
    for i in np.flatnonzero(m)[:10]:
        for c in (0, 1):
            fd = (grad_l(corr.with_flow_offset(i, c, h), res.params, m)
                  - grad_l(corr.with_flow_offset(i, c, -h), res.params, m)) / (2 * h)
            assert rel_err(M[:, 2 * i + c], fd) < 1e-4


def test_reparametrization_consistent(rng):
    # scaling the second camera's pixel units rescales flow, so dtheta/dV scales inversely
    R, t = random_pose(rng)
    base = random_correspondences(rng, R, t, 40)
    K2 = CameraIntrinsics(700.0, 650.0, 300.0, 200.0)
    s = 2.5
    K2s = CameraIntrinsics(700.0 * s, 650.0 * s, 300.0 * s, 200.0 * s)
    a = NormalizedCorrespondenceSet(base.x1, base.x2, None, K2.inverse)
    b = NormalizedCorrespondenceSet(base.x1, base.x2, None, K2s.inverse)
    p = EssentialParams.at_pose(R, t)
    ga = dtheta_dflow(a, p)
    gb = dtheta_dflow(b, p)
    assert np.abs(gb.matrix * s - ga.matrix).max() < 1e-6 * np.abs(ga.matrix).max()


def test_dtheta_dflow_resolve(solved):
    _, corr, res = solved
    g = dtheta_dflow(corr, res.params, inlier_mask=res.inlier_mask)
    assert np.all(np.isfinite(g.matrix))
    assert g.condition < 1e12
    rng = np.random.default_rng(7)
    for i in rng.choice(np.flatnonzero(res.inlier_mask), 5, replace=False):
        c = int(rng.integers(2))
        assert rel_err(g.column(i, c), resolve(corr, res, i, c, 1e-5)) < 1e-3
    j = np.flatnonzero(~res.inlier_mask)[0]
    assert np.all(g.column(j, 0) == 0) and np.all(g.column(j, 1) == 0)
    # an outlier stays an outlier under a tiny push, and theta does not move
    assert np.abs(resolve(corr, res, j, 0, 1e-5)).max() < 1e-6


def test_dtheta_dflow_minimal(rng):
    R, t = random_pose(rng)
    base = random_correspondences(rng, R, t, 5)
    corr = NormalizedCorrespondenceSet(base.x1, base.x2, None, CameraIntrinsics(500.0, 500.0, 0.0, 0.0).inverse)
    res = irls_refine(corr, EssentialParams.at_pose(R, t), CFG)
    g = dtheta_dflow(corr, res.params, inlier_mask=res.inlier_mask)
    for i in range(5):
        for c in (0, 1):
            assert rel_err(g.column(i, c), resolve(corr, res, i, c, 1e-5)) < 1e-3


def test_total_gradient_properties(rng):
    g_mat = rng.normal(size=(5, 8))
    g = ImplicitGradient(g_mat, np.ones(4, bool), 1.0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    ta, tb = rng.normal(size=5), rng.normal(size=5)
    assert np.array_equal(total_gradient(a, np.zeros(5), g), a)
    assert np.allclose(total_gradient(a + b, ta + tb, g), total_gradient(a, ta, g) + total_gradient(b, tb, g))
    with pytest.raises(InputError):
        total_gradient(a[:3], ta, g)


def test_total_gradient_epipolar(solved):
    _, corr, res = solved
    m = res.inlier_mask
    g = dtheta_dflow(corr, res.params, inlier_mask=m)
    inl = corr.subset(m)
    L = epipolar_loss(inl, res.params)
    dV = np.zeros(2 * len(corr))
    dV[np.repeat(m, 2)] = L.d_flow(inl)
    tot = total_gradient(dV, L.d_theta, g)

    def upper(c):
        r = irls_refine(c, res.params, CFG)
        assert np.array_equal(r.inlier_mask, m)
        return epipolar_loss(c.subset(m), r.params).value

    rng = np.random.default_rng(3)
    h = 1e-5
    for i in rng.choice(np.flatnonzero(m), 4, replace=False):
        c = int(rng.integers(2))
        fd = (upper(corr.with_flow_offset(i, c, h)) - upper(corr.with_flow_offset(i, c, -h))) / (2 * h)
        assert abs(fd - tot[2 * i + c]) / abs(tot[2 * i + c]) < 1e-3


def test_initialisation_independent(solved):
    sc, corr, res = solved
    other = irls_refine(corr, EssentialParams(np.zeros(5), so3_exp([1e-4, -2e-4, 1e-4]) @ sc.R, sc.t), CFG)
    assert np.array_equal(other.inlier_mask, res.inlier_mask)
    # report the second solve in the first chart
    p2 = params_from_pose(*other.params.pose(), (res.params.R0, res.params.t0))
    ga = dtheta_dflow(corr, res.params, inlier_mask=res.inlier_mask)
    gb = dtheta_dflow(corr, p2, inlier_mask=other.inlier_mask)
    assert np.abs(ga.matrix - gb.matrix).max() <= 1e-9 * max(1.0, np.abs(ga.matrix).max())


def test_degenerate_hessian():
    with pytest.raises(DegenerateGeometry):
        implicit_derivative(np.zeros((2, 2)), np.ones((2, 3)))
    with pytest.raises(DegenerateGeometry):
        implicit_derivative(np.diag([1.0, 1e-14]), np.ones((2, 1)))


def test_mask_shape_checked(solved):
    _, corr, res = solved
    with pytest.raises(InputError):
        dtheta_dflow(corr, res.params, inlier_mask=np.ones(3, bool))


@given(st.floats(0.5, 10.0), st.floats(-10.0, 10.0))
def test_quadratic_family(a, k):
    # f(x, y) = a (y - k x)^2: f_yy = 2a, f_xy = -2ak, dg/dx = k
    assert implicit_derivative(2 * a, -2 * a * k) == pytest.approx(k, rel=1e-12, abs=1e-12)
