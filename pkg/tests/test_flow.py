"""Control-point velocity fields and RK4 flows: closed-form checks,
refined-integrator oracles, invertibility, and sensitivity."""

import numpy as np
import pytest

from conftest import grid_patch
from diffshape import autodiff as ad
from diffshape.errors import NumericalError, ValidationError
from diffshape.flow import (MomentumPath, SpatialKernelParams, Template,
                            default_velocity_bandwidth, deform_mesh,
                            integrate_states, inverse_flow_check, shoot,
                            uniform_grid, velocity_at)
from diffshape.meshes import bbox_diagonal, face_geometry

K1 = SpatialKernelParams(1.0)


def constant_path(alpha, t_steps=10):
    grid = uniform_grid(t_steps)
    alphas = np.broadcast_to(np.asarray(alpha, dtype=float),
                             (t_steps + 1,) + np.shape(alpha)).copy()
    return MomentumPath(grid, alphas)


# ---------------------------------------------------------------------------
# velocity field


def test_velocity_zero_momenta():
    pts = np.random.default_rng(0).standard_normal((4, 3))
    v = velocity_at([0.2, 0.1, -0.3], pts, np.zeros((4, 3)), K1)
    assert np.array_equal(v, np.zeros(3))


def test_velocity_self_kernel_is_one():
    v = velocity_at([0.0, 0, 0], np.zeros((1, 3)), [[1.0, 0, 0]], K1)
    assert np.allclose(v, [1.0, 0, 0], atol=1e-15)


def test_velocity_at_one_bandwidth():
    k = SpatialKernelParams(0.7)
    alpha = np.array([[0.4, -1.1, 2.0]])
    v = velocity_at([0.7, 0.0, 0.0], np.zeros((1, 3)), alpha, k)
    assert np.abs(v - np.exp(-1.0) * alpha[0]).max() < 1e-12


def test_velocity_superposition():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((6, 3))
    alphas = rng.standard_normal((6, 3))
    x = rng.standard_normal(3)
    expected = sum(np.exp(-((x - pts[i]) ** 2).sum()) * alphas[i]
                   for i in range(6))
    assert np.allclose(velocity_at(x, pts, alphas, K1), expected, atol=1e-13)


# ---------------------------------------------------------------------------
# shooting


def test_path_validation():
    with pytest.raises(ValidationError):
        MomentumPath(np.array([0.0, 0.5, 0.9]), np.zeros((3, 2, 3)))
    with pytest.raises(ValidationError):
        MomentumPath(np.array([0.0, 0.5, 0.5, 1.0]), np.zeros((4, 2, 3)))
    with pytest.raises(ValidationError):
        MomentumPath(uniform_grid(3), np.zeros((3, 2, 3)))


def test_shoot_zero_momenta_is_identity():
    pts = np.random.default_rng(2).standard_normal((5, 3))
    traj, end = shoot(pts, constant_path(np.zeros((5, 3))), K1)
    assert np.array_equal(end, pts)
    assert np.array_equal(traj[0], pts) and traj.shape == (11, 5, 3)


def test_single_particle_moves_on_a_straight_line():
    start = np.array([[0.3, -0.2, 1.1]])
    a = np.array([[0.8, 0.1, -0.5]])
    traj, end = shoot(start, constant_path(a), K1)
    assert np.abs(end - (start + a)).max() < 1e-10
    for t, state in zip(uniform_grid(10), traj):
        assert np.abs(state - (start + t * a)).max() < 1e-10


def test_two_particles_match_refined_integrator():
    pts = np.array([[1.0, 0.5, 0.2], [2.1, 0.3, -0.4]])
    path = constant_path(np.broadcast_to([0.8, 0.2, -0.3], (2, 3)))
    _, coarse = shoot(pts, path, K1)
    _, fine = shoot(pts, path, K1, substeps=100)
    assert np.abs(coarse - fine).max() < 1e-6 * np.abs(fine).max()


def test_shoot_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        shoot(np.zeros((3, 3)), constant_path(np.zeros((2, 3))), K1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_reports_interval():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    path = constant_path(np.full((2, 3), 1e200))
    with pytest.raises(NumericalError, match="interval"):
        shoot(pts, path, K1)


# ---------------------------------------------------------------------------
# mesh deformation


def test_deform_zero_momenta_identity():
    mesh = grid_patch(np.random.default_rng(3), scale=4.0)
    tpl = Template(mesh, mesh.vertices[::5].copy())
    out = deform_mesh(tpl, constant_path(np.zeros((tpl.control_points.shape[0], 3))), K1)
    assert np.array_equal(out.vertices, mesh.vertices)
    assert np.array_equal(out.faces, mesh.faces)


def test_coincident_vertices_follow_control_points():
    mesh = grid_patch(np.random.default_rng(4), scale=4.0)
    ctrl = mesh.vertices[[0, 3, 7]].copy()
    tpl = Template(mesh, ctrl)
    rng = np.random.default_rng(5)
    path = MomentumPath(uniform_grid(8), 0.4 * rng.standard_normal((9, 3, 3)))
    k = SpatialKernelParams(2.0)
    _, ctrl_end = shoot(ctrl, path, k)
    out = deform_mesh(tpl, path, k)
    assert np.abs(out.vertices[[0, 3, 7]] - ctrl_end).max() < 1e-12


def test_template_control_points_must_be_near_mesh():
    mesh = grid_patch(np.random.default_rng(6), scale=4.0)
    with pytest.raises(ValidationError):
        Template(mesh, np.array([[100.0, 0, 0]]))


def test_small_flows_never_fold_faces():
    mesh = grid_patch(np.random.default_rng(7), nx=4, ny=4, scale=6.0)
    sigma_v = default_velocity_bandwidth(mesh)
    k = SpatialKernelParams(sigma_v)
    ctrl = mesh.vertices[::3].copy()
    tpl = Template(mesh, ctrl)
    _, normals0, areas0 = face_geometry(mesh)
    rng = np.random.default_rng(8)
    for _ in range(50):
        raw = rng.standard_normal((11, ctrl.shape[0], 3))
        norms = np.linalg.norm(raw, axis=2, keepdims=True)
        alphas = raw / np.maximum(norms, 1e-12) * (0.1 * sigma_v
                                                   * rng.uniform(size=norms.shape))
        out = deform_mesh(tpl, MomentumPath(uniform_grid(10), alphas), k)
        _, normals, areas = face_geometry(out)
        assert (areas > 0).all()
        assert ((normals * normals0).sum(axis=1) > 0).all()


# ---------------------------------------------------------------------------
# invertibility and convergence order


def moderate_path(rng, n_pts, sigma_v, t_steps=10):
    raw = rng.standard_normal((t_steps + 1, n_pts, 3))
    raw *= 0.5 * sigma_v / np.linalg.norm(raw, axis=2, keepdims=True)
    return MomentumPath(uniform_grid(t_steps), raw)


def test_round_trip_zero_momenta():
    pts = np.random.default_rng(9).standard_normal((4, 3))
    err = inverse_flow_check(pts, constant_path(np.zeros((4, 3))), K1)
    assert err == 0.0


def test_round_trip_error_small():
    rng = np.random.default_rng(10)
    pts = rng.standard_normal((6, 3)) * 2.0
    k = SpatialKernelParams(1.5)
    err = inverse_flow_check(pts, moderate_path(rng, 6, 1.5), k)
    assert err < 1e-3 * bbox_diagonal(pts)


def test_rk4_endpoint_convergence_order_is_four():
    rng = np.random.default_rng(11)
    pts = rng.standard_normal((5, 3)) * 2.0
    k = SpatialKernelParams(1.2)
    path = moderate_path(rng, 5, 1.2)
    _, ref = shoot(pts, path, k, substeps=256)
    steps = np.array([1, 2, 4, 8])
    errs = np.array([np.abs(shoot(pts, path, k, substeps=s)[1] - ref).max()
                     for s in steps])
    slope = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert 3.5 <= slope <= 4.5


def test_round_trip_error_shrinks_fast_under_refinement():
    # The reversed pass cancels the leading truncation term, so the round
    # trip tightens at least as fast as the integrator's own order.
    rng = np.random.default_rng(11)
    pts = rng.standard_normal((5, 3)) * 2.0
    k = SpatialKernelParams(1.2)
    path = moderate_path(rng, 5, 1.2)
    errs = [inverse_flow_check(pts, path, k, substeps=s) for s in (1, 2, 4)]
    assert errs[0] > 10 * errs[1] > 100 * errs[2]


# ---------------------------------------------------------------------------
# sensitivity and composition


def test_endpoint_momenta_sensitivity_matches_finite_differences():
    rng = np.random.default_rng(12)
    pts = rng.standard_normal((3, 3))
    grid = uniform_grid(5)
    alphas0 = 0.4 * rng.standard_normal((6, 3, 3))
    w = rng.standard_normal((3, 3))

    def endpoint_functional(alphas):
        a = ad.leaf(alphas)
        states = integrate_states(pts, 3, grid, a, 1.0)
        out = ad.sum_(states[-1] * w)
        return out, a

    out, leaf = endpoint_functional(alphas0)
    grad = ad.gradients(out, {"alphas": leaf})["alphas"]

    h = 1e-5
    flat_ix = rng.choice(alphas0.size, size=20, replace=False)
    fd = np.empty(20)
    for m, ix in enumerate(flat_ix):
        hi, lo = alphas0.copy(), alphas0.copy()
        hi.flat[ix] += h
        lo.flat[ix] -= h
        fd[m] = (endpoint_functional(hi)[0].value
                 - endpoint_functional(lo)[0].value) / (2 * h)
    scale = max(np.abs(fd).max(), 1e-12)
    assert np.abs(grad.flat[flat_ix] - fd).max() < 1e-4 * scale


def test_flow_composition():
    rng = np.random.default_rng(13)
    pts = rng.standard_normal((4, 3))
    t_steps = 10
    path = moderate_path(rng, 4, 1.0, t_steps)
    _, one_shot = shoot(pts, path, K1)

    half = t_steps // 2
    first = MomentumPath(2.0 * path.grid[:half + 1],
                         0.5 * path.alphas[:half + 1])
    second = MomentumPath(2.0 * (path.grid[half:] - 0.5),
                          0.5 * path.alphas[half:])
    _, mid = shoot(pts, first, K1)
    _, composed = shoot(mid, second, K1)
    rel = np.abs(composed - one_shot).max() / np.abs(one_shot).max()
    assert rel < 5e-6


def test_default_bandwidth_is_a_third_of_the_diagonal():
    mesh = grid_patch(np.random.default_rng(14), scale=3.0)
    assert default_velocity_bandwidth(mesh) == pytest.approx(
        0.3 * bbox_diagonal(mesh), rel=1e-12)
