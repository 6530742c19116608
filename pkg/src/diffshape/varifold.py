"""Varifold representation of triangulated surfaces and the kernel metric
between them.

A surface is embedded as a set of weighted oriented atoms, one per face:
center, unit normal, and area. The squared distance between two surfaces
is ``|mu_a|^2 - 2<mu_a, mu_b> + |mu_b|^2`` with the inner product

    <mu_a, mu_b> = sum_f sum_g exp(-|c_f - c_g|^2 / sigma_pos^2)
                              * (n_f . n_g)^2 * A_f * A_g,

a Gaussian kernel on centers times the squared cosine of the normal
angle times the areas. The squared cosine makes the metric independent
of face orientation (winding flips leave it unchanged) and of the
triangulation's correspondence, which is what lets shapes be compared
without landmarks. The double sum is computed densely; gradients with
respect to the first mesh's vertices come from the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyInputError, ValidationError
from .meshes import TriMesh, bbox_diagonal, face_geometry


@dataclass(frozen=True)
class VarifoldKernelParams:
    """Position bandwidth of the varifold kernel (mm)."""

    sigma_pos: float

    def __post_init__(self):
        if not self.sigma_pos > 0:
            raise ValidationError("sigma_pos must be positive")


@dataclass(frozen=True)
class VarifoldRepr:
    """Per-face atoms: centers (F,3), unit normals (F,3), areas (F,)."""

    centers: np.ndarray
    unit_normals: np.ndarray
    areas: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        n = np.asarray(self.unit_normals, dtype=float)
        a = np.asarray(self.areas, dtype=float)
        if c.shape != n.shape or c.ndim != 2 or c.shape[1] != 3 or a.shape != (c.shape[0],):
            raise ValidationError("inconsistent varifold atom shapes")
        if c.shape[0] == 0:
            raise EmptyInputError("varifold representation needs at least one atom")
        if (a <= 0).any():
            raise ValidationError("atom areas must be positive")
        norms = np.linalg.norm(n, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-8):
            raise ValidationError("atom normals must be unit length")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "unit_normals", n)
        object.__setattr__(self, "areas", a)


def default_position_bandwidth(template):
    """Default bandwidth: 0.25 x the template's bounding-box diagonal."""
    return 0.25 * bbox_diagonal(template)


def embed(mesh):
    """Varifold atoms of a mesh (one per face)."""
    centers, normals, areas = face_geometry(mesh)
    return VarifoldRepr(centers, normals / areas[:, None], areas)


def varifold_inner(a, b, kernel):
    """Inner product <mu_a, mu_b> between two atom sets."""
    d2 = ((a.centers[:, None, :] - b.centers[None, :, :]) ** 2).sum(axis=2)
    spatial = np.exp(-d2 / kernel.sigma_pos**2)
    angular = (a.unit_normals @ b.unit_normals.T) ** 2
    return float((spatial * angular * np.outer(a.areas, b.areas)).sum())


def varifold_sq_dist(a, b, kernel):
    """Squared varifold distance between two atom sets (non-negative)."""
    val = (varifold_inner(a, a, kernel) - 2.0 * varifold_inner(a, b, kernel)
           + varifold_inner(b, b, kernel))
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# differentiable path


@dataclass(frozen=True)
class VarifoldTarget:
    """A fixed comparison surface: atoms plus its precomputed squared norm,
    so repeated distance evaluations against it skip the self term."""

    atoms: VarifoldRepr
    norm_sq: float
    kernel: VarifoldKernelParams


def make_target(mesh_or_atoms, kernel):
    atoms = embed(mesh_or_atoms) if isinstance(mesh_or_atoms, TriMesh) else mesh_or_atoms
    return VarifoldTarget(atoms, varifold_inner(atoms, atoms, kernel), kernel)


def _atoms_var(verts, faces):
    """Tape-level atoms from a vertex Var and a constant face array."""
    v0 = verts[faces[:, 0]]
    v1 = verts[faces[:, 1]]
    v2 = verts[faces[:, 2]]
    centers = (v0 + v1 + v2) * (1.0 / 3.0)
    normals = ad.cross3(v1 - v0, v2 - v0) * 0.5
    areas = ad.sqrt(ad.sum_(ad.square(normals), axis=1))
    return centers, normals, areas


def _inner_var(ca, na, aa, cb, nb, ab, sigma_pos):
    # |c_f - c_g|^2 expanded via a matmul so the (F,F) block stays cheap
    a2 = ad.sum_(ad.square(ca), axis=1, keepdims=True)
    b2 = ad.sum_(ad.square(cb), axis=1, keepdims=True)
    d2 = a2 + ad.swap_last2(b2) - 2.0 * ad.matmul(ca, ad.swap_last2(cb))
    spatial = ad.exp(d2 * (-1.0 / sigma_pos**2))
    # (n_f . n_g)^2 A_f A_g with unnormalised normals: the areas cancel one
    # power of the normal norms, i.e. (nhat.nhat')^2 A A' = (n.n')^2 / (A A')
    dots = ad.square(ad.matmul(na, ad.swap_last2(nb)))
    inv_areas = ad.matmul(ad.reshape(1.0 / aa, (-1, 1)), ad.reshape(1.0 / ab, (1, -1)))
    return ad.sum_(spatial * dots * inv_areas)


def sq_dist_to_target(verts, faces, target):
    """Differentiable squared varifold distance from the mesh given by
    (verts, faces) to a fixed target. ``verts`` may be a tape Var."""
    verts = ad.wrap(verts)
    ca, na, aa = _atoms_var(verts, faces)
    k = target.kernel.sigma_pos
    self_term = _inner_var(ca, na, aa, ca, na, aa, k)
    cb = target.atoms.centers
    nb = target.atoms.unit_normals * target.atoms.areas[:, None]
    cross_term = _inner_var(ca, na, aa, cb, nb, target.atoms.areas, k)
    return self_term - 2.0 * cross_term + target.norm_sq


def varifold_sq_dist_grad(mesh, b, kernel):
    """Exact (V,3) gradient of the squared distance to atoms ``b`` with
    respect to every vertex of ``mesh``."""
    target = b if isinstance(b, VarifoldTarget) else make_target(b, kernel)
    verts = ad.leaf(mesh.vertices)
    dist = sq_dist_to_target(verts, mesh.faces, target)
    ad.backward(dist)
    if verts.grad is None:
        return np.zeros_like(mesh.vertices)
    return verts.grad
