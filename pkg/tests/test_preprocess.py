"""Quaternion rotations, the minimal enclosing ball, cup extraction,
and rigid+scale alignment."""

import numpy as np
import pytest

from conftest import grid_patch, random_rotation
from diffshape.errors import DivergenceError, ValidationError
from diffshape.meshes import (CupParams, Landmarks, TriMesh,
                              connected_components, generate_cup,
                              generate_cup_with_landmarks)
from diffshape.preprocess import (AlignmentConfig, SimilarityTransform,
                                  extract_cup, make_alignment_config,
                                  minimal_enclosing_ball, quat_to_rotation,
                                  rigid_align)
from diffshape.varifold import VarifoldKernelParams


# ---------------------------------------------------------------------------
# quaternions and similarity transforms


def test_quat_identity():
    assert np.allclose(quat_to_rotation([1, 0, 0, 0]), np.eye(3), atol=1e-15)


def test_quat_90_degrees_about_x():
    c = np.cos(np.pi / 4)
    r = quat_to_rotation([c, np.sin(np.pi / 4), 0, 0])
    assert np.abs(r @ [0.0, 1.0, 0.0] - [0.0, 0.0, 1.0]).max() < 1e-9


def test_quat_double_cover():
    q = np.array([0.3, -0.5, 0.7, 0.4])
    assert np.allclose(quat_to_rotation(q), quat_to_rotation(-q), atol=1e-14)


def test_quat_zero_rejected():
    with pytest.raises(ValidationError):
        quat_to_rotation([0.0, 0.0, 0.0, 0.0])


def test_quat_rotations_are_orthogonal():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q = rng.standard_normal(4)
        r = quat_to_rotation(q)
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_similarity_transform_validation():
    with pytest.raises(ValidationError):
        SimilarityTransform(np.array([1.0, 1.0, 0, 0]), 1.0, np.zeros(3))
    with pytest.raises(ValidationError):
        SimilarityTransform(np.array([1.0, 0, 0, 0]), -2.0, np.zeros(3))


def test_similarity_compose_and_inverse():
    rng = np.random.default_rng(1)
    q = rng.standard_normal(4)
    a = SimilarityTransform.from_unnormalised(q, 1.7, rng.standard_normal(3))
    b = SimilarityTransform.from_unnormalised(rng.standard_normal(4), 0.6,
                                              rng.standard_normal(3))
    pts = rng.standard_normal((10, 3))
    assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)),
                       atol=1e-12)
    round_trip = a.inverse().apply(a.apply(pts))
    assert np.abs(round_trip - pts).max() < 1e-12


# ---------------------------------------------------------------------------
# minimal enclosing ball


def test_ball_of_two_points():
    c, r = minimal_enclosing_ball(np.array([[0.0, 0, 0], [2, 0, 0]]))
    assert np.allclose(c, [1, 0, 0]) and r == pytest.approx(1.0)


def test_ball_encloses_all_points():
    rng = np.random.default_rng(2)
    for _ in range(100):
        pts = rng.standard_normal((int(rng.integers(1, 120)), 3)) * 10
        c, r = minimal_enclosing_ball(pts)
        d = np.linalg.norm(pts - c, axis=1)
        assert d.max() <= r * (1 + 1e-9) + 1e-9


def test_ball_is_tight_on_sphere_samples():
    rng = np.random.default_rng(3)
    for _ in range(30):
        dirs = rng.standard_normal((40, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radius = rng.uniform(1, 20)
        center = rng.standard_normal(3) * 5
        c, r = minimal_enclosing_ball(center + radius * dirs)
        assert r <= radius * (1 + 1e-9)
        assert np.linalg.norm(c - center) < 1e-6 * radius + 1e-9


def test_ball_deterministic():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((50, 3))
    c1, r1 = minimal_enclosing_ball(pts)
    c2, r2 = minimal_enclosing_ball(pts)
    assert np.array_equal(c1, c2) and r1 == r2


# ---------------------------------------------------------------------------
# cup extraction


def welded_hemisphere_plate(sectors=14, rings=6, plate_rings=3):
    """Hemisphere dome (apex up, equator at z=0) welded to a flat annular
    plate extending outward in the z=0 plane; returns (mesh, rim marks,
    dome face count)."""
    dome = generate_cup(CupParams(depth_scale=1.0, rim_retraction=0.0,
                                  radial_noise_sd=0.0, rings=rings,
                                  sectors=sectors, seed=0))
    radius = np.linalg.norm(dome.vertices[:, :2], axis=1).max()
    theta = 2 * np.pi * np.arange(sectors) / sectors
    plate_verts = []
    for k in range(1, plate_rings + 1):
        rho = radius * (1.0 + 0.2 * k)
        ring = np.column_stack([rho * np.cos(theta), rho * np.sin(theta),
                                np.zeros(sectors)])
        plate_verts.append(ring)
    verts = np.concatenate([dome.vertices] + plate_verts)

    first_rim = 1 + (rings - 1) * sectors  # outermost dome ring
    n_dome = dome.n_vertices

    def plate_index(k, j):
        return n_dome + k * sectors + (j % sectors)

    faces = [tuple(f) for f in dome.faces]
    for j in range(sectors):
        a = first_rim + j
        b = first_rim + (j + 1) % sectors
        faces.append((a, b, plate_index(0, j + 1)))
        faces.append((a, plate_index(0, j + 1), plate_index(0, j)))
    for k in range(plate_rings - 1):
        for j in range(sectors):
            a, b = plate_index(k, j), plate_index(k, j + 1)
            c, d = plate_index(k + 1, j + 1), plate_index(k + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))

    mesh = TriMesh(verts, np.asarray(faces, dtype=np.int64))
    sel = (np.arange(6) * sectors) // 6
    marks = Landmarks(mesh.vertices[first_rim + sel])
    return mesh, marks, dome.n_faces


def test_extract_cup_from_welded_plate():
    mesh, marks, dome_faces = welded_hemisphere_plate()
    out = extract_cup(mesh, marks)
    assert abs(out.n_faces - dome_faces) <= 2


def test_extract_clean_cup_keeps_nearly_all_vertices():
    for seed in range(5):
        p = CupParams(depth_scale=0.8, rim_retraction=0.05,
                      radial_noise_sd=0.15, rings=7, sectors=14, seed=seed)
        mesh, marks = generate_cup_with_landmarks(p)
        out = extract_cup(mesh, marks)
        assert out.n_vertices >= 0.99 * mesh.n_vertices


def test_extract_removes_floating_blob():
    p = CupParams(depth_scale=1.0, rim_retraction=0.0, radial_noise_sd=0.0,
                  rings=6, sectors=12, seed=0)
    mesh, marks = generate_cup_with_landmarks(p)
    blob = grid_patch(None, nx=2, ny=2, scale=2.0)
    blob_verts = blob.vertices + np.array([0.0, 0.0, 12.0])  # inside ball
    verts = np.concatenate([mesh.vertices, blob_verts])
    faces = np.concatenate([mesh.faces, blob.faces + mesh.n_vertices])
    welded = TriMesh(verts, faces)
    out = extract_cup(welded, marks)
    assert out.n_faces == mesh.n_faces
    assert len(connected_components(out)) == 1


def test_extract_output_is_single_component():
    p = CupParams(0.6, 0.1, 0.2, 6, 12, 7)
    mesh, marks = generate_cup_with_landmarks(p)
    out = extract_cup(mesh, marks)
    assert len(connected_components(out)) == 1


def test_extract_rejects_far_landmarks():
    p = CupParams(1.0, 0.0, 0.0, 6, 12, 0)
    mesh, _ = generate_cup_with_landmarks(p)
    far = Landmarks(np.array([[200.0, 0, 0], [0, 200, 0], [0, 0, 200]]))
    with pytest.raises(ValidationError):
        extract_cup(mesh, far)


# ---------------------------------------------------------------------------
# rigid + scale alignment

TRUTH = SimilarityTransform(
    np.concatenate([[np.cos(np.deg2rad(12.5))],
                    np.sin(np.deg2rad(12.5)) * np.array([1.0, 1.0, 0.0])
                    / np.sqrt(2)]),
    1.2, np.array([3.0, -1.0, 2.0]))


def test_alignment_config_validation():
    k = VarifoldKernelParams(1.0)
    with pytest.raises(ValidationError):
        AlignmentConfig(tolerance=-1.0, max_iters=10, step_size=0.1, kernel=k)
    with pytest.raises(ValidationError):
        AlignmentConfig(tolerance=1.0, max_iters=0, step_size=0.1, kernel=k)


def test_self_alignment_is_identity():
    mesh = grid_patch(np.random.default_rng(5), scale=5.0)
    cfg = make_alignment_config(mesh, max_iters=50)
    transform, aligned, energy = rigid_align(mesh, mesh, cfg)
    assert energy < 1e-8
    assert np.abs(np.abs(transform.quaternion) - [1, 0, 0, 0]).max() < 1e-3
    assert abs(transform.scale - 1.0) < 1e-3
    assert np.abs(transform.translation).max() < 1e-3
    assert np.abs(aligned.vertices - mesh.vertices).max() < 1e-6


def test_known_transform_recovery():
    rng = np.random.default_rng(6)
    for _ in range(3):
        mesh = grid_patch(rng, nx=4, ny=4, scale=8.0, noise=0.35)
        target = mesh.with_vertices(TRUTH.apply(mesh.vertices))
        cfg = make_alignment_config(target, max_iters=700,
                                    tolerance_factor=1e-10)
        recovered, _, _ = rigid_align(mesh, target, cfg)
        err = recovered.compose(TRUTH.inverse())
        qdev = min(np.abs(err.quaternion - [1, 0, 0, 0]).max(),
                   np.abs(err.quaternion + [1, 0, 0, 0]).max())
        assert qdev < 1e-2
        assert abs(err.scale - 1.0) < 1e-2
        assert np.abs(err.translation).max() < 1e-2


def test_shallow_to_deep_cup_energy_strictly_positive():
    shallow = generate_cup(CupParams(0.5, 0.15, 0.0, 5, 10, 0))
    deep = generate_cup(CupParams(1.0, 0.0, 0.0, 5, 10, 0))
    cfg = make_alignment_config(deep, max_iters=150)
    _, _, energy = rigid_align(shallow, deep, cfg)
    assert energy > 1e-2 * cfg.tolerance / 1e-6  # far above the tolerance


def test_round_trip_alignment_near_identity():
    rng = np.random.default_rng(7)
    mesh_a = grid_patch(rng, nx=4, ny=4, scale=8.0, noise=0.35)
    mesh_b = mesh_a.with_vertices(TRUTH.apply(mesh_a.vertices))
    cfg_b = make_alignment_config(mesh_b, max_iters=400,
                                  tolerance_factor=1e-10)
    cfg_a = make_alignment_config(mesh_a, max_iters=400,
                                  tolerance_factor=1e-10)
    t_ab, _, _ = rigid_align(mesh_a, mesh_b, cfg_b)
    t_ba, _, _ = rigid_align(mesh_b, mesh_a, cfg_a)
    err = t_ab.compose(t_ba)
    qdev = min(np.abs(err.quaternion - [1, 0, 0, 0]).max(),
               np.abs(err.quaternion + [1, 0, 0, 0]).max())
    assert qdev < 5e-2
    assert abs(err.scale - 1.0) < 5e-2
    assert np.abs(err.translation).max() < 5e-2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_alignment_diverges_with_absurd_step():
    mesh = grid_patch(np.random.default_rng(8), scale=5.0)
    target = mesh.with_vertices(mesh.vertices + 1.0)
    cfg = AlignmentConfig(tolerance=1e-12, max_iters=60, step_size=1e9,
                          kernel=VarifoldKernelParams(2.0))
    with pytest.raises(DivergenceError):
        rigid_align(mesh, target, cfg)


def test_best_seen_energy_non_increasing_with_budget():
    rng = np.random.default_rng(9)
    mesh = grid_patch(rng, nx=4, ny=4, scale=8.0, noise=0.35)
    target = mesh.with_vertices(TRUTH.apply(mesh.vertices))
    energies = []
    for iters in (30, 120, 400):
        cfg = make_alignment_config(target, max_iters=iters,
                                    tolerance_factor=1e-12)
        energies.append(rigid_align(mesh, target, cfg)[2])
    assert energies[0] >= energies[1] >= energies[2]
