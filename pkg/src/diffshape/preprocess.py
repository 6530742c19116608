"""Cup extraction from a larger surface and rigid+scale alignment.

Extraction rotates the fitted rim plane to +z, keeps the surface inside
the minimal enclosing ball of the rim region above that plane, and
returns the largest connected component. Alignment minimises the
varifold distance between the transformed moving mesh and a fixed
target over a similarity transform (unit quaternion, positive scale,
translation) with Adam, four rotation starts, and best-seen tracking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (DivergenceError, ExtractionFailedError, ValidationError)
from .meshes import Landmarks, TriMesh, bbox_diagonal, connected_components, fit_plane
from .optim import Adam
from .varifold import (VarifoldKernelParams, default_position_bandwidth,
                       embed, make_target, sq_dist_to_target, varifold_inner)

_FLIP_STARTS = np.array([[1.0, 0.0, 0.0, 0.0],
                         [0.0, 1.0, 0.0, 0.0],
                         [0.0, 0.0, 1.0, 0.0],
                         [0.0, 0.0, 0.0, 1.0]])
_TRIAGE_ITERS = 40


def quat_to_rotation(q):
    """Rotation matrix of a quaternion (w,x,y,z); normalised internally."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValidationError("quaternion must have 4 components")
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValidationError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R(quaternion) x + translation."""

    quaternion: np.ndarray
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValidationError("quaternion must be unit length (within 1e-9)")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        if t.shape != (3,):
            raise ValidationError("translation must have 3 components")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), 1.0, np.zeros(3))

    @classmethod
    def from_unnormalised(cls, q, scale, t):
        q = np.asarray(q, dtype=float)
        return cls(q / np.linalg.norm(q), float(scale), np.asarray(t, dtype=float))

    def apply(self, points):
        r = quat_to_rotation(self.quaternion)
        return self.scale * (np.asarray(points, dtype=float) @ r.T) + self.translation

    def compose(self, other):
        """self after other: (self o other)(x) = self(other(x))."""
        q = _quat_mul(self.quaternion, other.quaternion)
        scale = self.scale * other.scale
        r = quat_to_rotation(self.quaternion)
        t = self.scale * (r @ other.translation) + self.translation
        return SimilarityTransform.from_unnormalised(q, scale, t)

    def inverse(self):
        q = self.quaternion * np.array([1.0, -1.0, -1.0, -1.0])
        r = quat_to_rotation(self.quaternion)
        scale = 1.0 / self.scale
        t = -scale * (r.T @ self.translation)
        return SimilarityTransform.from_unnormalised(q, scale, t)


@dataclass(frozen=True)
class AlignmentConfig:
    """Stopping tolerance on the varifold energy, iteration budget,
    Adam step size, and the varifold kernel used by the energy."""

    tolerance: float
    max_iters: int
    step_size: float
    kernel: VarifoldKernelParams

    def __post_init__(self):
        if not (self.tolerance > 0 and self.max_iters > 0 and self.step_size > 0):
            raise ValidationError("alignment config values must be positive")


def make_alignment_config(target, kernel=None, max_iters=500, step_size=1e-2,
                          tolerance_factor=1e-6):
    """Config with scale-aware defaults: tolerance 1e-6 x |mu_target|^2 and
    sigma_pos = 0.25 x the target's bounding-box diagonal."""
    if kernel is None:
        kernel = VarifoldKernelParams(default_position_bandwidth(target))
    atoms = embed(target)
    norm_sq = varifold_inner(atoms, atoms, kernel)
    return AlignmentConfig(tolerance_factor * norm_sq, max_iters, step_size, kernel)


# ---------------------------------------------------------------------------
# minimal enclosing ball (Welzl)


def _ball_2(a, b):
    c = (a + b) / 2.0
    return c, np.linalg.norm(a - c)


def _ball_3(a, b, c):
    u, v = b - a, c - a
    uu, vv, uv = u @ u, v @ v, u @ v
    det = uu * vv - uv * uv
    if det <= 1e-14 * max(uu * vv, 1e-300):
        pts = np.array([a, b, c])
        i, j = np.unravel_index(
            np.argmax(((pts[:, None] - pts[None]) ** 2).sum(axis=2)), (3, 3))
        return _ball_2(pts[i], pts[j])
    alpha = 0.5 * (uu * vv - vv * uv) / det
    beta = 0.5 * (uu * vv - uu * uv) / det
    center = a + alpha * u + beta * v
    return center, np.linalg.norm(a - center)


def _ball_4(a, b, c, d):
    m = np.array([b - a, c - a, d - a])
    rhs = 0.5 * (m * m).sum(axis=1)
    det = np.linalg.det(m)
    if abs(det) <= 1e-12 * max(np.abs(m).max() ** 3, 1e-300):
        best = None
        for trio in ((a, b, c), (a, b, d), (a, c, d), (b, c, d)):
            ctr, r = _ball_3(*trio)
            pts = np.array([a, b, c, d])
            if (np.linalg.norm(pts - ctr, axis=1) <= r * (1 + 1e-9) + 1e-12).all():
                if best is None or r < best[1]:
                    best = (ctr, r)
        if best is not None:
            return best
        return _ball_3(a, b, c)
    center = a + np.linalg.solve(m, rhs)
    return center, np.linalg.norm(a - center)


def _ball_of_support(support):
    if len(support) == 0:
        return np.zeros(3), -1.0
    if len(support) == 1:
        return support[0].copy(), 0.0
    if len(support) == 2:
        return _ball_2(*support)
    if len(support) == 3:
        return _ball_3(*support)
    return _ball_4(*support)


def _inside(center, radius, p):
    return np.linalg.norm(p - center) <= radius * (1 + 1e-10) + 1e-12


def minimal_enclosing_ball(points):
    """Exact smallest enclosing ball of a 3-D point set (Welzl's algorithm,
    iterative move-to-front form with a fixed shuffle for determinism)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ValidationError("points must be a non-empty (N,3) array")
    rng = np.random.default_rng(0x5EED)
    pts = pts[rng.permutation(pts.shape[0])]

    def mb(limit, support):
        center, radius = _ball_of_support(support)
        if len(support) == 4:
            return center, radius
        i = 0
        while i < limit:
            p = pts[i].copy()  # detach from the buffer before move-to-front
            if not _inside(center, radius, p):
                center, radius = mb(i, support + [p])
                # move-to-front keeps hard points early on later passes
                pts[1:i + 1] = pts[:i].copy()
                pts[0] = p
            i += 1
        return center, radius

    center, radius = mb(pts.shape[0], [])
    return center, float(radius)


# ---------------------------------------------------------------------------
# cup extraction


def _rotation_to_z(normal):
    """Rotation matrix mapping ``normal`` onto +z (identity when aligned)."""
    n = normal / np.linalg.norm(normal)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(n, z)
    s = np.linalg.norm(axis)
    c = float(n @ z)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    axis = axis / s
    kx, ky, kz = axis
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    angle = np.arctan2(s, c)
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def extract_cup(mesh, rim_landmarks, z_tolerance_factor=5e-3, ball_slack=2e-2):
    """Isolate the cup: fit the rim plane, rotate its normal to +z, keep
    vertices above the plane and inside the minimal enclosing ball of the
    rim region, and return the largest connected component.

    The ball is computed from the rotated landmarks plus all surface
    points strictly above the plane. Retention is tolerant in both tests:
    vertices may dip z_tolerance_factor x bbox diagonal below the plane
    and sit a relative ball_slack outside the ball, so a noisy rim ring
    (which straddles its own fitted plane and pokes past the ball built
    from the landmark subset) survives intact.
    """
    if not isinstance(rim_landmarks, Landmarks):
        rim_landmarks = Landmarks(rim_landmarks)
    diag = bbox_diagonal(mesh)
    dists = np.linalg.norm(
        mesh.vertices[None, :, :] - rim_landmarks.points[:, None, :], axis=2).min(axis=1)
    if (dists > 0.05 * diag).any():
        raise ValidationError("rim landmarks lie farther than 5% of the bounding-box "
                              "diagonal from the surface")

    normal, offset = fit_plane(rim_landmarks)
    rot = _rotation_to_z(normal)
    verts = mesh.vertices @ rot.T
    marks = rim_landmarks.points @ rot.T
    level = offset  # the plane n.x = offset becomes z = offset after rotation

    above = verts[:, 2] > level
    ball_points = np.concatenate([marks, verts[above]], axis=0)
    center, radius = minimal_enclosing_ball(ball_points)

    keep = (verts[:, 2] >= level - z_tolerance_factor * diag) \
        & (np.linalg.norm(verts - center, axis=1) <= radius * (1 + ball_slack) + 1e-12)
    face_keep = keep[mesh.faces].all(axis=1)
    if not face_keep.any():
        raise ExtractionFailedError("no faces survive the rim-plane/ball filter")
    faces = mesh.faces[face_keep]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    scalar = mesh.scalar[used] if mesh.scalar is not None else None
    filtered = TriMesh(verts[used], remap[faces], scalar)
    return connected_components(filtered)[0]


# ---------------------------------------------------------------------------
# rigid + scale alignment


def _quat_rotation_var(q):
    qn = q * (1.0 / ad.sqrt(ad.sum_(ad.square(q))))
    w, x, y, z = qn[0], qn[1], qn[2], qn[3]
    one = ad.wrap(1.0)
    row0 = ad.concat([ad.reshape(one - 2.0 * (y * y + z * z), (1,)),
                      ad.reshape(2.0 * (x * y - w * z), (1,)),
                      ad.reshape(2.0 * (x * z + w * y), (1,))])
    row1 = ad.concat([ad.reshape(2.0 * (x * y + w * z), (1,)),
                      ad.reshape(one - 2.0 * (x * x + z * z), (1,)),
                      ad.reshape(2.0 * (y * z - w * x), (1,))])
    row2 = ad.concat([ad.reshape(2.0 * (x * z - w * y), (1,)),
                      ad.reshape(2.0 * (y * z + w * x), (1,)),
                      ad.reshape(one - 2.0 * (x * x + y * y), (1,))])
    return ad.concat([ad.reshape(row0, (1, 3)), ad.reshape(row1, (1, 3)),
                      ad.reshape(row2, (1, 3))], axis=0)


def _energy_graph(moving, target, params, trans_scale, pivot):
    # rotation and scale act about the moving centroid (decouples them from
    # translation) and translation is optimized in bounding-box units so a
    # unit Adam step moves every parameter block commensurately
    q = ad.leaf(params["quaternion"])
    log_scale = ad.leaf(params["log_scale"])
    translation = ad.leaf(params["translation"])
    rot = _quat_rotation_var(q)
    centered = moving.vertices - pivot
    verts = ad.exp(log_scale) * ad.matmul(ad.wrap(centered), ad.swap_last2(rot)) \
        + (trans_scale * ad.reshape(translation, (1, 3)) + pivot)
    energy = sq_dist_to_target(verts, moving.faces, target)
    leaves = {"quaternion": q, "log_scale": log_scale, "translation": translation}
    return energy, leaves


def _run_alignment(moving, target, params, iters, step_size, tolerance,
                   trans_scale, pivot):
    # beta2 well below the Adam default: the second-moment estimate must
    # relax quickly once the large initial translation travel is done,
    # otherwise the tail iterations barely move
    opt = Adam(params, lr=step_size, beta2=0.95)
    best = None
    for it in range(iters):
        energy, leaves = _energy_graph(moving, target, params, trans_scale,
                                       pivot)
        e = float(energy.value)
        if not np.isfinite(e):
            raise DivergenceError("alignment energy is non-finite; reduce step_size")
        if best is None or e < best[0]:
            best = (e, {k: v.copy() for k, v in params.items()})
        if e < tolerance:
            break
        # cosine annealing to ~0.1% of the base step for a tight tail
        opt.lr = step_size * (0.001 + 0.999 * 0.5 *
                              (1.0 + np.cos(np.pi * it / max(iters - 1, 1))))
        grads = ad.gradients(energy, leaves)
        opt.step(grads)
        q = params["quaternion"]
        params["quaternion"] = q / np.linalg.norm(q)
    return best


def rigid_align(moving, target, config):
    """Align ``moving`` to ``target`` over similarity transforms.

    Four quaternion starts (identity plus the three axis flips) get a
    short triage run; the best continues to the full budget. Returns
    (transform, aligned mesh, final energy); the reported energy is the
    best seen, which is monotone under extra iterations.
    """
    target_rep = make_target(target, config.kernel)
    trans_scale = 0.1 * max(bbox_diagonal(moving), 1e-9)
    pivot = moving.vertices.mean(axis=0)
    triage = []
    for q0 in _FLIP_STARTS:
        params = {"quaternion": q0.copy(), "log_scale": np.zeros(()),
                  "translation": np.zeros(3)}
        budget = min(_TRIAGE_ITERS, config.max_iters)
        triage.append(_run_alignment(moving, target_rep, params, budget,
                                     config.step_size, config.tolerance,
                                     trans_scale, pivot))
    best_energy, best_params = min(triage, key=lambda t: t[0])
    final = _run_alignment(moving, target_rep, dict(best_params),
                           config.max_iters, config.step_size,
                           config.tolerance, trans_scale, pivot)
    if final[0] > best_energy:
        final = (best_energy, best_params)
    energy, params = final
    scale = float(np.exp(params["log_scale"]))
    rot = quat_to_rotation(params["quaternion"] /
                           np.linalg.norm(params["quaternion"]))
    translation = trans_scale * params["translation"] + pivot - scale * (rot @ pivot)
    transform = SimilarityTransform.from_unnormalised(
        params["quaternion"], scale, translation)
    aligned = moving.with_vertices(transform.apply(moving.vertices))
    return transform, aligned, energy
