"""Per-shape geodesic atlas baseline.

Every training surface gets its own initial momenta on the shared
control points; positions and momenta then follow the Hamiltonian flow
of the velocity kernel,

    xdot_i = sum_j K(x_i, x_j) alpha_j
    adot_i = (2 / sigma_v^2) sum_j K(x_i, x_j) (alpha_i . alpha_j) (x_i - x_j),

which keeps H = 0.5 sum_ij K(x_i, x_j) alpha_i . alpha_j constant along
exact trajectories. Fitting minimises beta * d^2(target, deformed
template) + lambda * H per shape; initial momenta are the per-shape
features (flattened, summarised by PCA downstream).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .archive import load_archive, save_archive
from .errors import (DivergenceError, EmptyInputError, NumericalError,
                     ValidationError)
from .flow import SpatialKernelParams, Template, uniform_grid
from .meshes import TriMesh
from .optim import Adam
from .varifold import VarifoldKernelParams, make_target, sq_dist_to_target

logger = logging.getLogger(__name__)

ARCHIVE_KIND = "lddmm_state"
DEFAULT_LAMBDA_FACTOR = 1e-3
_DIVERGENCE_FACTOR = 10.0
_DIVERGENCE_PATIENCE = 50


def _kernel_var(a, b, inv_sig2):
    """Gaussian matrix exp(-|a_i - b_j|^2 / sigma^2) on the tape."""
    a2 = ad.sum_(ad.square(a), axis=-1, keepdims=True)
    b2 = ad.swap_last2(ad.sum_(ad.square(b), axis=-1, keepdims=True))
    d2 = a2 + b2 - 2.0 * ad.matmul(a, ad.swap_last2(b))
    return ad.exp(d2 * (-inv_sig2))


def _hamiltonian_rhs(pos, mom, n_ctrl, inv_sig2):
    """Time derivatives of all positions and of the control momenta.

    pos: (..., P, 3) with the control points in the first n_ctrl rows
    (any further rows are passively advected mesh vertices),
    mom: (..., n_ctrl, 3).
    """
    ctrl = pos[..., :n_ctrl, :]
    k_all = _kernel_var(pos, ctrl, inv_sig2)
    dpos = ad.matmul(k_all, mom)
    k_cc = k_all[..., :n_ctrl, :]
    gram = k_cc * ad.matmul(mom, ad.swap_last2(mom))
    row = ad.sum_(gram, axis=-1, keepdims=True)
    dmom = (2.0 * inv_sig2) * (ctrl * row - ad.matmul(gram, ctrl))
    return dpos, dmom


def integrate_hamiltonian(pos0, mom0, n_ctrl, grid, sigma_v, substeps=1):
    """RK4 integration of the coupled system over the grid.

    Returns (positions, momenta): lists of Vars at every knot. Leading
    batch dims of pos0/mom0 must agree.
    """
    if substeps < 1:
        raise ValidationError("substeps must be >= 1")
    pos = ad.wrap(pos0)
    mom = ad.wrap(mom0)
    inv_sig2 = 1.0 / float(sigma_v) ** 2
    grid = np.asarray(grid, dtype=float)
    positions, momenta = [pos], [mom]
    for j in range(grid.size - 1):
        h = (grid[j + 1] - grid[j]) / substeps
        for _ in range(substeps):
            d1p, d1m = _hamiltonian_rhs(pos, mom, n_ctrl, inv_sig2)
            d2p, d2m = _hamiltonian_rhs(pos + (0.5 * h) * d1p,
                                        mom + (0.5 * h) * d1m, n_ctrl, inv_sig2)
            d3p, d3m = _hamiltonian_rhs(pos + (0.5 * h) * d2p,
                                        mom + (0.5 * h) * d2m, n_ctrl, inv_sig2)
            d4p, d4m = _hamiltonian_rhs(pos + h * d3p, mom + h * d3m,
                                        n_ctrl, inv_sig2)
            pos = pos + (h / 6.0) * (d1p + 2.0 * d2p + 2.0 * d3p + d4p)
            mom = mom + (h / 6.0) * (d1m + 2.0 * d2m + 2.0 * d3m + d4m)
        if not (np.isfinite(pos.value).all() and np.isfinite(mom.value).all()):
            raise NumericalError(f"geodesic blew up in grid interval {j}")
        positions.append(pos)
        momenta.append(mom)
    return positions, momenta


def hamiltonian(points, momenta, kernel):
    """H = 0.5 sum_ij K(x_i, x_j) alpha_i . alpha_j."""
    x = np.asarray(points, dtype=float)
    a = np.asarray(momenta, dtype=float)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    k = np.exp(-d2 / kernel.sigma_v**2)
    return 0.5 * float(np.sum(k * (a @ a.T)))


def geodesic_shoot(points, momenta, kernel, grid=None, substeps=1):
    """Shoot the control points along the Hamiltonian flow.

    Returns (positions (T+1, n, 3), momenta (T+1, n, 3)) at the knots.
    """
    x = np.asarray(points, dtype=float)
    a = np.asarray(momenta, dtype=float)
    if x.shape != a.shape:
        raise ValidationError("points and momenta shapes disagree")
    if grid is None:
        grid = uniform_grid()
    pos, mom = integrate_hamiltonian(x, a, x.shape[0], grid, kernel.sigma_v,
                                     substeps)
    return (np.stack([p.value for p in pos]), np.stack([m.value for m in mom]))


@dataclass
class AtlasState:
    """Trained baseline: template, kernels, tempering, and the per-shape
    initial momenta (N, n_ctrl, 3) in training order."""

    template: Template
    spatial: SpatialKernelParams
    varifold_kernel: VarifoldKernelParams
    beta: float
    lam: float
    grid: np.ndarray
    momenta: np.ndarray
    train_ids: tuple = ()

    def __post_init__(self):
        self.momenta = np.asarray(self.momenta, dtype=float)
        n_ctrl = self.template.control_points.shape[0]
        if self.momenta.ndim != 3 or self.momenta.shape[1:] != (n_ctrl, 3):
            raise ValidationError("momenta must be (N, n_ctrl, 3)")
        if not (self.beta > 0 and self.lam >= 0):
            raise ValidationError("beta must be positive and lambda non-negative")
        if self.train_ids and len(self.train_ids) != self.momenta.shape[0]:
            raise ValidationError("one momenta set per training shape required")


@dataclass(frozen=True)
class AtlasFitConfig:
    lr: float = 2e-2
    iters: int = 200
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.iters > 0):
            raise ValidationError("bad atlas fit config")


def _template_sq_dists(template, targets):
    out = [float(sq_dist_to_target(template.mesh.vertices,
                                   template.mesh.faces, t).value)
           for t in targets]
    return np.maximum(np.asarray(out), 0.0)


def tempering_from_template(template, targets):
    """beta = 1 / median squared varifold distance template -> targets."""
    d2 = _template_sq_dists(template, targets)
    med = float(np.median(d2)) if d2.size else 1.0
    return 1.0 / max(med, 1e-12)


def _kernel0(template, inv_sig2):
    c = template.control_points
    d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 * inv_sig2)


def _batched_loss(leaves_momenta, template, targets, indices, grid, spatial,
                  beta, lam, k0):
    n_ctrl = template.control_points.shape[0]
    idx = np.asarray(indices, dtype=np.int64)
    mom0 = leaves_momenta[idx]
    b = idx.size
    pos0 = np.broadcast_to(
        np.concatenate([template.control_points, template.mesh.vertices]),
        (b, n_ctrl + template.mesh.n_vertices, 3)).copy()
    positions, _ = integrate_hamiltonian(pos0, mom0, n_ctrl, grid,
                                         spatial.sigma_v)
    endpoint = positions[-1]

    data = ad.wrap(0.0)
    for row, target in enumerate(targets):
        verts = endpoint[row, n_ctrl:, :]
        data = data + sq_dist_to_target(verts, template.mesh.faces, target)

    ham = 0.5 * ad.sum_(k0 * ad.matmul(mom0, ad.swap_last2(mom0)))
    return beta * data + lam * ham


def fit_atlas(template, meshes, kernel, config=AtlasFitConfig(), *,
              spatial=None, grid=None, lam_factor=DEFAULT_LAMBDA_FACTOR,
              train_ids=()):
    """Fit per-shape initial momenta against all training meshes at once.

    beta is 1 / median squared varifold distance from the template,
    lambda = lam_factor * beta. Returns (AtlasState, loss trace).
    """
    meshes = list(meshes)
    if not meshes:
        raise EmptyInputError("no meshes to fit")
    from .flow import default_velocity_bandwidth
    spatial = spatial or SpatialKernelParams(default_velocity_bandwidth(template.mesh))
    grid = uniform_grid() if grid is None else np.asarray(grid, dtype=float)
    targets = [make_target(m, kernel) for m in meshes]
    beta = tempering_from_template(template, targets)
    lam = lam_factor * beta

    n = len(meshes)
    n_ctrl = template.control_points.shape[0]
    k0 = _kernel0(template, 1.0 / spatial.sigma_v**2)
    params = {"momenta": np.zeros((n, n_ctrl, 3))}
    opt = Adam(params, lr=config.lr)
    trace = []
    bad_streak = 0
    indices = np.arange(n)
    for it in range(config.iters):
        leaf = ad.leaf(params["momenta"])
        try:
            loss = _batched_loss(leaf, template, targets, indices, grid,
                                 spatial, beta, lam, k0)
        except NumericalError as exc:
            err = DivergenceError(f"atlas fit diverged at iteration {it}: {exc}")
            err.trace = trace
            raise err from exc
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            err = DivergenceError(f"non-finite atlas loss at iteration {it}")
            err.trace = trace
            raise err
        trace.append(loss_val)
        if loss_val > _DIVERGENCE_FACTOR * trace[0]:
            bad_streak += 1
            if bad_streak >= _DIVERGENCE_PATIENCE:
                err = DivergenceError(
                    f"atlas loss exceeded {_DIVERGENCE_FACTOR}x the initial "
                    f"value for {_DIVERGENCE_PATIENCE} consecutive iterations")
                err.trace = trace
                raise err
        else:
            bad_streak = 0
        grads = ad.gradients(loss, {"momenta": leaf})
        opt.step(grads)
        if (it + 1) % 50 == 0:
            logger.info("atlas iter %d/%d loss %.4f", it + 1, config.iters, loss_val)
    state = AtlasState(template=template, spatial=spatial, varifold_kernel=kernel,
                       beta=beta, lam=lam, grid=grid, momenta=params["momenta"],
                       train_ids=tuple(train_ids))
    return state, trace


def fit_shape_momenta(state, mesh, config=AtlasFitConfig()):
    """Embed one unseen mesh: optimise fresh initial momenta with the
    atlas frozen. Returns (momenta (n_ctrl, 3), final data term)."""
    target = make_target(mesh, state.varifold_kernel)
    n_ctrl = state.template.control_points.shape[0]
    k0 = _kernel0(state.template, 1.0 / state.spatial.sigma_v**2)
    params = {"momenta": np.zeros((1, n_ctrl, 3))}
    opt = Adam(params, lr=config.lr)
    for it in range(config.iters):
        leaf = ad.leaf(params["momenta"])
        try:
            loss = _batched_loss(leaf, state.template, [target], [0],
                                 state.grid, state.spatial, state.beta,
                                 state.lam, k0)
        except NumericalError as exc:
            raise DivergenceError(
                f"momenta fit diverged at iteration {it}: {exc}") from exc
        if not np.isfinite(float(loss.value)):
            raise DivergenceError(f"momenta fit diverged at iteration {it}")
        grads = ad.gradients(loss, {"momenta": leaf})
        opt.step(grads)
    momenta = params["momenta"][0]
    return momenta, reconstruction_energy(state, momenta, target)


def deform_with_momenta(state, momenta, substeps=1):
    """Deterministic template deformation under the given momenta."""
    momenta = np.asarray(momenta, dtype=float)
    n_ctrl = state.template.control_points.shape[0]
    if momenta.shape != (n_ctrl, 3):
        raise ValidationError("momenta must be (n_ctrl, 3)")
    pos0 = np.concatenate([state.template.control_points,
                           state.template.mesh.vertices])
    positions, _ = integrate_hamiltonian(pos0, momenta, n_ctrl, state.grid,
                                         state.spatial.sigma_v, substeps)
    return state.template.mesh.with_vertices(positions[-1].value[n_ctrl:])


def reconstruction_energy(state, momenta, target):
    """beta-weighted squared varifold distance of the deformed template."""
    mesh = deform_with_momenta(state, momenta)
    d2 = float(sq_dist_to_target(mesh.vertices, mesh.faces, target).value)
    return state.beta * max(d2, 0.0)


# ---------------------------------------------------------------------------
# momenta summaries


@dataclass(frozen=True)
class MomentaPca:
    """Centered PCA of flattened momenta: mean (n*3,), components
    (C, n*3) row-orthonormal, explained variance per component."""

    mean: np.ndarray
    components: np.ndarray
    explained_var: np.ndarray

    def project(self, momenta):
        arr = np.asarray(momenta, dtype=float)
        flat = arr.reshape(arr.shape[0] if arr.ndim == 3 else 1, -1)
        return (flat - self.mean) @ self.components.T

    def un_project(self, coords):
        """Map embedding coordinates back to (N, n_ctrl, 3) momenta."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        flat = coords @ self.components + self.mean
        return flat.reshape(flat.shape[0], -1, 3)


def momenta_pca(momenta, n_components):
    """PCA via the dual Gram matrix (numerically stable for n_shapes <<
    n_ctrl * 3). Accepts either a stacked momenta array or a fitted
    AtlasState. Components are sign-fixed so the largest-magnitude
    coefficient is positive. Returns (MomentaPca, coords (N, C))."""
    momenta = getattr(momenta, "momenta", momenta)
    if n_components <= 0:
        raise ValidationError("number of components must be positive")
    flat = np.asarray(momenta, dtype=float).reshape(len(momenta), -1)
    n = flat.shape[0]
    if n < 2:
        raise ValidationError("need at least two momenta sets for PCA")
    mean = flat.mean(axis=0)
    x = flat - mean
    gram = x @ x.T / (n - 1)
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1]
    n_components = min(n_components, n - 1, flat.shape[1])
    comps = []
    evs = []
    for r in order[:n_components]:
        lam = max(float(vals[r]), 0.0)
        if lam <= 1e-12:
            break
        direction = x.T @ vecs[:, r]
        direction = direction / np.linalg.norm(direction)
        if direction[np.argmax(np.abs(direction))] < 0:
            direction = -direction
        comps.append(direction)
        evs.append(lam)
    if not comps:
        # All momenta coincide: zero-width basis, every embedding is empty.
        pca = MomentaPca(mean, np.zeros((0, flat.shape[1])), np.zeros(0))
    else:
        pca = MomentaPca(mean, np.stack(comps), np.asarray(evs))
    return pca, pca.project(np.asarray(momenta, dtype=float))


# ---------------------------------------------------------------------------
# serialization


def save_atlas(state, path):
    arrays = {
        "template_vertices": state.template.mesh.vertices,
        "template_faces": state.template.mesh.faces,
        "control_points": state.template.control_points,
        "momenta": state.momenta,
        "grid": state.grid,
        "scalars": np.array([state.beta, state.lam, state.spatial.sigma_v,
                             state.varifold_kernel.sigma_pos]),
    }
    meta = {"train_ids": list(state.train_ids)}
    save_archive(path, ARCHIVE_KIND, arrays, meta)


def load_atlas(path):
    _, arrays, meta = load_archive(path, expected_kind=ARCHIVE_KIND)
    beta, lam, sigma_v, sigma_pos = arrays["scalars"]
    template = Template(TriMesh(arrays["template_vertices"], arrays["template_faces"]),
                        arrays["control_points"])
    return AtlasState(template=template, spatial=SpatialKernelParams(float(sigma_v)),
                      varifold_kernel=VarifoldKernelParams(float(sigma_pos)),
                      beta=float(beta), lam=float(lam), grid=arrays["grid"],
                      momenta=arrays["momenta"], train_ids=tuple(meta.get("train_ids", ())))
