"""Triangulated surface meshes: types, ascii OBJ/PLY I/O, face geometry,
plane fitting, connectivity, and a synthetic acetabular-cup generator.

Coordinates are millimetres throughout. Meshes are immutable after
construction (vertex/face arrays are marked read-only) so they can be
shared freely across threads and cached representations.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, MeshFormatError, ValidationError

#: Base radius (mm) of the synthetic hemispherical cups.
CUP_RADIUS_MM = 30.0

_MIN_FACE_AREA = 1e-12


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TriMesh:
    """Triangulated surface: vertices (V,3) float64, faces (F,3) int64
    indexing vertices, optionally one scalar per vertex.

    Construction validates that face indices are in range, no face repeats
    a vertex, and every face has strictly positive area (> 1e-12 mm^2).
    """

    vertices: np.ndarray
    faces: np.ndarray
    scalar: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (V,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be (F,3), got {f.shape}")
        if v.shape[0] < 3 or f.shape[0] < 1:
            raise EmptyInputError("mesh needs at least 3 vertices and 1 face")
        if not np.isfinite(v).all():
            raise ValidationError("vertices contain non-finite values")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise ValidationError("face indices out of range")
        if (np.diff(np.sort(f, axis=1), axis=1) == 0).any():
            raise ValidationError("a face repeats a vertex index")
        areas = _face_areas(v, f)
        if (areas <= _MIN_FACE_AREA).any():
            bad = int(np.argmax(areas <= _MIN_FACE_AREA))
            raise ValidationError(f"face {bad} has area {areas[bad]:.3g} <= {_MIN_FACE_AREA}")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))
        if self.scalar is not None:
            s = np.asarray(self.scalar, dtype=float)
            if s.shape != (v.shape[0],):
                raise ValidationError(f"scalar must be (V,), got {s.shape}")
            object.__setattr__(self, "scalar", _readonly(s))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def with_vertices(self, vertices):
        """Same topology with replaced vertex positions."""
        return TriMesh(vertices, self.faces, self.scalar)

    def with_scalar(self, scalar):
        return TriMesh(self.vertices, self.faces, scalar)


@dataclass(frozen=True)
class Landmarks:
    """At least 3 non-collinear annotated points (L,3)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 3:
            raise ValidationError(f"landmarks must be (L>=3,3), got {p.shape}")
        if not np.isfinite(p).all():
            raise ValidationError("landmarks contain non-finite values")
        centered = p - p.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[1] <= 1e-9 * max(s[0], 1e-30):
            raise ValidationError("landmarks are collinear; plane fit ill-posed")
        object.__setattr__(self, "points", _readonly(p))


@dataclass(frozen=True)
class CupParams:
    """Parameters of the synthetic hemispherical cup generator.

    depth_scale scales z (1 = full hemisphere), rim_retraction in [0,1)
    shrinks the polar extent of the cap (dysplasia-like boundary loss),
    radial_noise_sd perturbs each vertex radially, resolution is
    rings x sectors, and seed fixes the noise draw.
    """

    depth_scale: float = 1.0
    rim_retraction: float = 0.0
    radial_noise_sd: float = 0.0
    rings: int = 20
    sectors: int = 40
    seed: int = 0

    def __post_init__(self):
        if not self.depth_scale > 0:
            raise ValidationError("depth_scale must be positive")
        if not 0.0 <= self.rim_retraction < 1.0:
            raise ValidationError("rim_retraction must be in [0,1)")
        if self.radial_noise_sd < 0:
            raise ValidationError("radial_noise_sd must be non-negative")
        if self.rings < 1 or self.sectors < 3:
            raise ValidationError("resolution needs rings >= 1 and sectors >= 3")
        if self.sectors * (2 * self.rings - 1) < 8:
            raise ValidationError("resolution yields fewer than 8 faces")


# ---------------------------------------------------------------------------
# geometry


def _face_corners(vertices, faces):
    return vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]


def _face_areas(vertices, faces):
    v0, v1, v2 = _face_corners(vertices, faces)
    n = 0.5 * np.cross(v1 - v0, v2 - v0)
    return np.linalg.norm(n, axis=1)


def face_geometry(mesh):
    """Per-face centers, unnormalised normals (half cross product of the
    edge vectors), and areas (norms of those normals).

    Returns
    -------
    centers : (F,3), normals : (F,3), areas : (F,)
    """
    v0, v1, v2 = _face_corners(mesh.vertices, mesh.faces)
    centers = (v0 + v1 + v2) / 3.0
    normals = 0.5 * np.cross(v1 - v0, v2 - v0)
    areas = np.linalg.norm(normals, axis=1)
    return centers, normals, areas


def bbox_diagonal(points):
    """Length of the axis-aligned bounding-box diagonal of a point set
    (or of a mesh's vertices)."""
    if isinstance(points, TriMesh):
        points = points.vertices
    points = np.asarray(points, dtype=float)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def fit_plane(landmarks):
    """Least-squares plane through landmarks.

    Returns (normal, offset) with ``normal . x = offset`` on the plane.
    The unit normal is the principal direction of smallest variance,
    sign-fixed so its z component is non-negative (on a z-tie, the x
    component is made non-negative, then y).
    """
    if isinstance(landmarks, Landmarks):
        pts = landmarks.points
    else:
        pts = Landmarks(np.asarray(landmarks, dtype=float)).points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    for axis in (2, 0, 1):
        if abs(normal[axis]) > 1e-12:
            if normal[axis] < 0:
                normal = -normal
            break
    offset = float(normal @ centroid)
    return normal, offset


def connected_components(mesh):
    """Split a mesh into face-connected components (shared-edge
    adjacency). Returns sub-meshes sorted by descending face count
    (stable on ties), with vertices re-indexed and unused ones dropped.
    """
    faces = mesh.faces
    n_faces = faces.shape[0]
    parent = np.arange(n_faces)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    edge_owner = {}
    for fi in range(n_faces):
        a, b, c = faces[fi]
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            other = edge_owner.get(key)
            if other is None:
                edge_owner[key] = fi
            else:
                union(other, fi)

    roots = np.array([find(i) for i in range(n_faces)])
    groups = {}
    for fi, root in enumerate(roots):
        groups.setdefault(root, []).append(fi)
    ordered = sorted(groups.values(), key=lambda idxs: (-len(idxs), idxs[0]))

    out = []
    for idxs in ordered:
        sub_faces = faces[np.asarray(idxs)]
        used = np.unique(sub_faces)
        remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        scalar = mesh.scalar[used] if mesh.scalar is not None else None
        out.append(TriMesh(mesh.vertices[used], remap[sub_faces], scalar))
    return out


# ---------------------------------------------------------------------------
# synthetic cups


def _cup_arrays(params):
    rng = np.random.default_rng(params.seed)
    rings, sectors = params.rings, params.sectors
    n_vertices = 1 + rings * sectors
    phi_max = 0.5 * np.pi * (1.0 - params.rim_retraction)
    phi = phi_max * np.arange(1, rings + 1) / rings
    theta = 2.0 * np.pi * np.arange(sectors) / sectors

    rho = CUP_RADIUS_MM + params.radial_noise_sd * rng.standard_normal(n_vertices)
    verts = np.empty((n_vertices, 3))
    verts[0] = (0.0, 0.0, params.depth_scale * rho[0])  # apex
    pp, tt = np.meshgrid(phi, theta, indexing="ij")
    ring_rho = rho[1:].reshape(rings, sectors)
    verts[1:, 0] = (ring_rho * np.sin(pp) * np.cos(tt)).ravel()
    verts[1:, 1] = (ring_rho * np.sin(pp) * np.sin(tt)).ravel()
    verts[1:, 2] = (params.depth_scale * ring_rho * np.cos(pp)).ravel()

    def ring_index(i, j):
        return 1 + i * sectors + (j % sectors)

    faces = []
    for j in range(sectors):
        faces.append((0, ring_index(0, j), ring_index(0, j + 1)))
    for i in range(rings - 1):
        for j in range(sectors):
            a = ring_index(i, j)
            b = ring_index(i, j + 1)
            c = ring_index(i + 1, j + 1)
            d = ring_index(i + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
    return verts, np.asarray(faces, dtype=np.int64)


def generate_cup(params):
    """Deterministic hemispherical cap mesh for the given parameters.

    The cap spans polar angles [0, (pi/2)(1 - rim_retraction)] of a sphere
    of radius ``CUP_RADIUS_MM``; z is scaled by depth_scale and each vertex
    is perturbed radially by N(0, radial_noise_sd).
    """
    verts, faces = _cup_arrays(params)
    return TriMesh(verts, faces)


def generate_cup_with_landmarks(params, landmark_count=6):
    """Cup mesh plus rim landmarks taken at evenly spaced sectors of the
    outermost vertex ring (so the landmarks lie exactly on the mesh)."""
    if landmark_count < 3:
        raise ValidationError("need at least 3 rim landmarks")
    verts, faces = _cup_arrays(params)
    first_rim = 1 + (params.rings - 1) * params.sectors
    sel = (np.arange(landmark_count) * params.sectors) // landmark_count
    points = verts[first_rim + sel]
    return TriMesh(verts, faces), Landmarks(points)


# ---------------------------------------------------------------------------
# file I/O


def _clean_faces(vertices, faces, origin):
    """Drop degenerate faces (repeated vertex or area <= 1e-12); warn with
    the dropped count."""
    if faces.shape[0] == 0:
        return faces, 0
    keep = (np.diff(np.sort(faces, axis=1), axis=1) != 0).all(axis=1)
    keep &= _face_areas(vertices, faces) > _MIN_FACE_AREA
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"{origin}: dropped {dropped} degenerate face(s)")
    return faces[keep], dropped


def load_mesh(path):
    """Read an ascii OBJ or PLY mesh. Degenerate faces are dropped with a
    warning; an empty result raises EmptyInputError."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if first.strip().lower() == "ply" or str(path).lower().endswith(".ply"):
        verts, faces, quality = _parse_ply(path)
    else:
        verts, faces = _parse_obj(path)
        quality = None
    if verts.shape[0] == 0 or faces.shape[0] == 0:
        raise EmptyInputError(f"{path}: no usable vertices or faces")
    if faces.min() < 0 or faces.max() >= verts.shape[0]:
        raise MeshFormatError(f"{path}: face index out of range")
    faces, _ = _clean_faces(verts, faces, str(path))
    if faces.shape[0] == 0:
        raise EmptyInputError(f"{path}: all faces degenerate")
    return TriMesh(verts, faces, quality)


def _parse_obj(path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tokens[1:4]])
                except ValueError as e:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex: {e}") from e
            elif tokens[0] == "f":
                if len(tokens) != 4:
                    raise MeshFormatError(f"{path}:{lineno}: only triangular faces supported")
                try:
                    idx = [int(t.split("/")[0]) for t in tokens[1:4]]
                except ValueError as e:
                    raise MeshFormatError(f"{path}:{lineno}: bad face: {e}") from e
                if any(i < 1 for i in idx):
                    raise MeshFormatError(f"{path}:{lineno}: OBJ indices are 1-based positive")
                faces.append([i - 1 for i in idx])
            # all other line types are ignored
    return np.asarray(verts, dtype=float).reshape(-1, 3), \
        np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ply(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip().lower() != "ply":
        raise MeshFormatError(f"{path}:1: not a PLY file")
    n_vertex = n_face = None
    vertex_props = []
    current = None
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise MeshFormatError(f"{path}:{lineno}: only ascii PLY supported")
        elif tokens[0] == "element":
            current = tokens[1]
            if current == "vertex":
                n_vertex = int(tokens[2])
            elif current == "face":
                n_face = int(tokens[2])
            else:
                raise MeshFormatError(f"{path}:{lineno}: unsupported element {current!r}")
        elif tokens[0] == "property":
            if current == "vertex":
                if tokens[1] == "list":
                    raise MeshFormatError(f"{path}:{lineno}: list property on vertices")
                vertex_props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or n_vertex is None or n_face is None:
        raise MeshFormatError(f"{path}: incomplete PLY header")
    for needed in ("x", "y", "z"):
        if needed not in vertex_props:
            raise MeshFormatError(f"{path}: vertex property {needed!r} missing")

    body = lines[body_start:]
    if len(body) < n_vertex + n_face:
        raise MeshFormatError(f"{path}: truncated PLY body")
    verts = np.empty((n_vertex, 3))
    quality = np.empty(n_vertex) if "quality" in vertex_props else None
    ix = vertex_props.index("x")
    iy = vertex_props.index("y")
    iz = vertex_props.index("z")
    iq = vertex_props.index("quality") if quality is not None else -1
    for i in range(n_vertex):
        tokens = body[i].split()
        if len(tokens) < len(vertex_props):
            raise MeshFormatError(f"{path}:{body_start + 1 + i}: short vertex row")
        try:
            verts[i] = (float(tokens[ix]), float(tokens[iy]), float(tokens[iz]))
            if quality is not None:
                quality[i] = float(tokens[iq])
        except ValueError as e:
            raise MeshFormatError(f"{path}:{body_start + 1 + i}: bad vertex row: {e}") from e
    faces = np.empty((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        tokens = body[n_vertex + i].split()
        if not tokens or tokens[0] != "3" or len(tokens) < 4:
            raise MeshFormatError(
                f"{path}:{body_start + 1 + n_vertex + i}: only triangular faces supported")
        faces[i] = (int(tokens[1]), int(tokens[2]), int(tokens[3]))
    return verts, faces, quality


def save_mesh(mesh, path, with_scalar=False):
    """Write an ascii PLY file (atomically: temp file then rename).

    With ``with_scalar`` the per-vertex scalar is written as a float
    property named ``quality``; the mesh must then carry a scalar field.
    """
    if with_scalar and mesh.scalar is None:
        raise ValidationError("with_scalar=True but the mesh has no scalar field")
    lines = ["ply", "format ascii 1.0",
             f"element vertex {mesh.n_vertices}",
             "property float x", "property float y", "property float z"]
    if with_scalar:
        lines.append("property float quality")
    lines += [f"element face {mesh.n_faces}",
              "property list uchar int vertex_indices", "end_header"]
    for i in range(mesh.n_vertices):
        x, y, z = mesh.vertices[i]
        row = f"{float(x)!r} {float(y)!r} {float(z)!r}"
        if with_scalar:
            row += f" {float(mesh.scalar[i])!r}"
        lines.append(row)
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_landmarks(path):
    """Read landmarks from CSV rows ``x,y,z`` (an optional non-numeric
    header row is skipped)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise MeshFormatError(f"{path}:{lineno}: expected 3 comma-separated values")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise MeshFormatError(f"{path}:{lineno}: bad landmark row") from None
    if not rows:
        raise EmptyInputError(f"{path}: no landmarks")
    return Landmarks(np.asarray(rows, dtype=float))


def save_landmarks(landmarks, path):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("x,y,z\n")
        for p in landmarks.points:
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
    os.replace(tmp, path)
