"""Mesh types, geometry primitives, the synthetic cup generator, and
ascii OBJ/PLY round trips."""

import numpy as np
import pytest

from conftest import grid_patch, random_rotation, small_cup
from diffshape.errors import (EmptyInputError, MeshFormatError,
                              ValidationError)
from diffshape.meshes import (CUP_RADIUS_MM, CupParams, Landmarks, TriMesh,
                              bbox_diagonal, connected_components,
                              face_geometry, fit_plane, generate_cup,
                              generate_cup_with_landmarks, load_landmarks,
                              load_mesh, save_landmarks, save_mesh)

RIGHT_TRI = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                    np.array([[0, 1, 2]]))


# ---------------------------------------------------------------------------
# TriMesh validation


def test_trimesh_rejects_out_of_range_indices():
    with pytest.raises(ValidationError):
        TriMesh(np.zeros((3, 3)) + np.eye(3), np.array([[0, 1, 3]]))


def test_trimesh_rejects_repeated_vertex_face():
    with pytest.raises(ValidationError):
        TriMesh(np.eye(3), np.array([[0, 1, 1]]))


def test_trimesh_rejects_zero_area_face():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(ValidationError):
        TriMesh(verts, np.array([[0, 1, 2]]))


def test_trimesh_arrays_are_read_only():
    mesh = RIGHT_TRI
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 5.0
    with pytest.raises(ValueError):
        mesh.faces[0, 0] = 2


def test_trimesh_scalar_must_match_vertex_count():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    TriMesh(verts, np.array([[0, 1, 2]]), np.zeros(3))
    with pytest.raises(ValidationError):
        TriMesh(verts, np.array([[0, 1, 2]]), np.zeros(2))


def test_landmarks_require_three_non_collinear_points():
    with pytest.raises(ValidationError):
        Landmarks(np.array([[0.0, 0, 0], [1, 0, 0]]))
    with pytest.raises(ValidationError):
        Landmarks(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]))


# ---------------------------------------------------------------------------
# face geometry


def test_face_geometry_unit_right_triangle():
    centers, normals, areas = face_geometry(RIGHT_TRI)
    assert areas[0] == pytest.approx(0.5, abs=1e-12)
    direction = normals[0] / np.linalg.norm(normals[0])
    assert abs(abs(direction[2]) - 1.0) < 1e-12
    assert np.allclose(centers[0], [1 / 3, 1 / 3, 0.0])


def test_face_geometry_equilateral_side_two():
    verts = np.array([[0.0, 0, 0], [2, 0, 0], [1, np.sqrt(3), 0]])
    mesh = TriMesh(verts, np.array([[0, 1, 2]]))
    _, _, areas = face_geometry(mesh)
    assert areas[0] == pytest.approx(np.sqrt(3), rel=1e-12)


def test_face_geometry_translation_equivariance():
    mesh = grid_patch(np.random.default_rng(0))
    t = np.array([3.0, -1.0, 2.0])
    c0, n0, a0 = face_geometry(mesh)
    c1, n1, a1 = face_geometry(mesh.with_vertices(mesh.vertices + t))
    assert np.allclose(c1, c0 + t)
    assert np.abs(n1 - n0).max() < 1e-12
    assert np.abs(a1 - a0).max() < 1e-12


def test_face_areas_rigid_invariant():
    rng = np.random.default_rng(1)
    mesh = grid_patch(rng)
    _, _, a0 = face_geometry(mesh)
    for _ in range(5):
        r = random_rotation(rng)
        moved = mesh.with_vertices(mesh.vertices @ r.T + rng.standard_normal(3))
        _, _, a1 = face_geometry(moved)
        assert np.abs(a1 - a0).max() < 1e-9 * a0.max()


# ---------------------------------------------------------------------------
# synthetic cup generator


def test_cup_full_hemisphere_depth():
    mesh = generate_cup(CupParams(depth_scale=1.0, rim_retraction=0.0,
                                  radial_noise_sd=0.0, rings=6, sectors=12,
                                  seed=0))
    assert mesh.vertices[:, 2].max() / CUP_RADIUS_MM == pytest.approx(1.0,
                                                                      abs=1e-6)


def test_cup_depth_scaling():
    mesh = generate_cup(CupParams(depth_scale=0.55, rim_retraction=0.0,
                                  radial_noise_sd=0.0, rings=6, sectors=12,
                                  seed=0))
    assert mesh.vertices[:, 2].max() / CUP_RADIUS_MM == pytest.approx(0.55,
                                                                      abs=1e-6)


def test_cup_same_seed_is_bitwise_identical():
    p = CupParams(depth_scale=0.8, rim_retraction=0.1, radial_noise_sd=0.5,
                  rings=7, sectors=9, seed=42)
    a, b = generate_cup(p), generate_cup(p)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.faces, b.faces)


def test_cup_rim_retraction_shrinks_polar_extent():
    full = generate_cup(CupParams(1.0, 0.0, 0.0, 6, 12, 0))
    retracted = generate_cup(CupParams(1.0, 0.3, 0.0, 6, 12, 0))
    # radial footprint shrinks when the cap stops short of the equator
    r_full = np.linalg.norm(full.vertices[:, :2], axis=1).max()
    r_ret = np.linalg.norm(retracted.vertices[:, :2], axis=1).max()
    assert r_ret < 0.9 * r_full


def test_cup_params_validation():
    with pytest.raises(ValidationError):
        CupParams(depth_scale=0.0, rim_retraction=0.0, radial_noise_sd=0.0,
                  rings=6, sectors=12, seed=0)
    with pytest.raises(ValidationError):
        CupParams(1.0, 1.0, 0.0, 6, 12, 0)
    with pytest.raises(ValidationError):
        CupParams(1.0, 0.0, 0.0, 1, 3, 0)  # too few faces


def test_cup_landmarks_lie_on_rim_vertices():
    p = CupParams(0.9, 0.05, 0.2, 6, 12, 3)
    mesh, marks = generate_cup_with_landmarks(p, landmark_count=5)
    d = np.linalg.norm(mesh.vertices[None] - marks.points[:, None], axis=2)
    assert d.min(axis=1).max() == 0.0


# ---------------------------------------------------------------------------
# plane fit


def test_fit_plane_exact_z_plane():
    marks = Landmarks(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0],
                                [1, 1, 0]]))
    normal, offset = fit_plane(marks)
    assert np.allclose(normal, [0, 0, 1], atol=1e-12)
    assert offset == pytest.approx(0.0, abs=1e-12)


def test_fit_plane_tilted_analytic():
    # plane z = 2 + x + y has normal proportional to (-1, -1, 1)
    xy = np.array([[0.0, 0], [1, 0], [0, 1], [2, 1], [1, 3]])
    pts = np.column_stack([xy, 2 + xy.sum(axis=1)])
    normal, offset = fit_plane(Landmarks(pts))
    expected = np.array([-1.0, -1.0, 1.0]) / np.sqrt(3)
    assert np.allclose(normal, expected, atol=1e-9)
    assert offset == pytest.approx(float(normal @ pts[0]), abs=1e-9)


def test_fit_plane_symmetric_noise_keeps_normal():
    base = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    delta = 0.05
    pts = np.concatenate([base + [0, 0, delta], base - [0, 0, delta]])
    normal, _ = fit_plane(Landmarks(pts))
    assert np.allclose(normal, [0, 0, 1], atol=1e-12)


def test_fit_plane_sign_prefers_positive_z_then_x():
    marks = Landmarks(np.array([[0.0, 0, 5], [1, 0, 5], [0, 1, 5]]))
    normal, offset = fit_plane(marks)
    assert normal[2] > 0 and offset == pytest.approx(5.0)
    vertical = Landmarks(np.array([[0.0, 0, 0], [0, 1, 0], [0, 0, 1],
                                   [0, 1, 1]]))
    n2, _ = fit_plane(vertical)
    assert n2[0] > 0  # z-component is zero, tie broken toward +x


def test_fit_plane_beats_random_planes_through_centroid():
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((40, 3)) * np.array([4.0, 3.0, 0.3])
    marks = Landmarks(pts)
    normal, offset = fit_plane(marks)
    best = ((pts @ normal - offset) ** 2).sum()
    centroid = pts.mean(axis=0)
    for _ in range(100):
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        resid = ((pts @ n - n @ centroid) ** 2).sum()
        assert best <= resid + 1e-12


# ---------------------------------------------------------------------------
# connected components


def test_components_single_tetrahedron():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    parts = connected_components(TriMesh(verts, faces))
    assert len(parts) == 1 and parts[0].n_faces == 4


def test_components_two_disjoint_triangles():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [5.0, 0, 0], [6, 0, 0], [5, 1, 0]])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    parts = connected_components(TriMesh(verts, faces))
    assert len(parts) == 2
    assert [p.n_faces for p in parts] == [1, 1]


def test_components_vertex_touch_is_not_adjacency():
    # two triangles sharing one vertex but no edge stay separate parts
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [-1.0, 0, 0], [0, -1, 0]])
    faces = np.array([[0, 1, 2], [0, 3, 4]])
    parts = connected_components(TriMesh(verts, faces))
    assert len(parts) == 2


def test_components_partition_faces():
    rng = np.random.default_rng(3)
    for trial in range(5):
        a = grid_patch(rng)
        b = grid_patch(rng)
        verts = np.concatenate([a.vertices, b.vertices + 50.0])
        faces = np.concatenate([a.faces, b.faces + a.n_vertices])
        mesh = TriMesh(verts, faces)
        parts = connected_components(mesh)
        assert sum(p.n_faces for p in parts) == mesh.n_faces
        assert sorted(p.n_faces for p in parts) == sorted(
            [a.n_faces, b.n_faces])


def test_components_ordered_by_descending_face_count():
    a = grid_patch(None, nx=4, ny=4)
    b = grid_patch(None, nx=2, ny=2)
    verts = np.concatenate([b.vertices + 90.0, a.vertices])
    faces = np.concatenate([b.faces, a.faces + b.n_vertices])
    parts = connected_components(TriMesh(verts, faces))
    counts = [p.n_faces for p in parts]
    assert counts == sorted(counts, reverse=True)


# ---------------------------------------------------------------------------
# file I/O


def test_load_minimal_obj(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    mesh = load_mesh(path)
    assert mesh.n_faces == 1 and mesh.n_vertices == 3


def test_load_obj_drops_repeated_vertex_face_with_warning(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 2\nf 1 2 3\n")
    with pytest.warns(UserWarning, match="dropped 1"):
        mesh = load_mesh(path)
    assert mesh.n_faces == 1


def test_obj_parse_error_reports_line_number(tmp_path):
    path = tmp_path / "broken.obj"
    path.write_text("v 0 0 0\nv 1 0 x\n")
    with pytest.raises(MeshFormatError, match=r"broken\.obj:2:"):
        load_mesh(path)


def test_empty_mesh_raises(tmp_path):
    path = tmp_path / "empty.obj"
    path.write_text("# nothing\n")
    with pytest.raises(EmptyInputError):
        load_mesh(path)


def test_save_load_round_trip_obj_vertices(tmp_path):
    mesh = small_cup(seed=5)
    path = tmp_path / "cup.ply"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert back.n_faces == mesh.n_faces
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-6


def test_save_mesh_scalar_header_contract(tmp_path):
    mesh = RIGHT_TRI
    plain = tmp_path / "plain.ply"
    save_mesh(mesh, plain, with_scalar=False)
    text = plain.read_text()
    assert "property float x" in text and "quality" not in text

    withq = tmp_path / "withq.ply"
    save_mesh(mesh.with_scalar(np.array([0.1, 0.2, 0.3])), withq,
              with_scalar=True)
    qtext = withq.read_text()
    assert "property float quality" in qtext
    back = load_mesh(withq)
    assert back.scalar is not None
    assert np.abs(back.scalar - [0.1, 0.2, 0.3]).max() < 1e-6


def test_ply_round_trip_is_exact_for_repr_floats(tmp_path):
    mesh = small_cup(seed=6)
    path = tmp_path / "exact.ply"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_ply_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                    "property float x\nproperty float y\nproperty float z\n"
                    "element face 0\nproperty list uchar int vertex_indices\n"
                    "end_header\noops oops oops\n")
    with pytest.raises(MeshFormatError, match=r":10:"):
        load_mesh(path)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        load_mesh(tmp_path / "nope.obj")


def test_landmarks_csv_round_trip(tmp_path):
    marks = Landmarks(np.array([[0.5, 1.5, 2.5], [1, 0, 0], [0, 1, 0]]))
    path = tmp_path / "marks.csv"
    save_landmarks(marks, path)
    back = load_landmarks(path)
    assert np.abs(back.points - marks.points).max() < 1e-9


def test_landmarks_csv_tolerates_header(tmp_path):
    path = tmp_path / "marks.csv"
    path.write_text("x,y,z\n0,0,0\n1,0,0\n0,1,0\n")
    back = load_landmarks(path)
    assert back.points.shape == (3, 3)


def test_bbox_diagonal_simple():
    mesh = TriMesh(np.array([[0.0, 0, 0], [3, 4, 0], [0, 4, 0]]),
                   np.array([[0, 1, 2]]))
    assert bbox_diagonal(mesh) == pytest.approx(5.0)
