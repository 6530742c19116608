"""Latent-variable diffeomorphic shape model.

Each training surface S_i gets a diagonal-Gaussian latent posterior
q(z_i); momenta over (time, latent) follow sparse GPs with a shared
whitened inducing posterior q(U). A sampled (z_i, U) determines momenta
on the time grid, the control-point flow deforms the template, and the
fit is scored by the tempered squared varifold distance. Training
maximises the evidence lower bound

    L = -E[ sum_i beta * d^2(S_i, deform(template; z_i, U)) ]
        - KL(q(Z) || p(Z)) - KL(q(U) || p(U))

with Adam on the reparameterised objective, one sample per shape per
step. Test shapes are embedded by freezing the model and optimising a
fresh q(z*) against the same objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .archive import load_archive, save_archive
from .errors import (DivergenceError, EmptyInputError, NumericalError,
                     ValidationError)
from .flow import (DEFAULT_N_CONTROL, DEFAULT_T_STEPS, MomentumPath,
                   SpatialKernelParams, Template, default_velocity_bandwidth,
                   integrate_states, uniform_grid)
from .gp import (GaussianDist, GpKernelParams, InducingState, assemble_chol,
                 chol_with_jitter, kernel_tz, kl_gaussian_diag_var,
                 kl_whitened_inducing_var, whitened_conditional_mean_var)
from .meshes import TriMesh
from .optim import Adam
from .varifold import (VarifoldKernelParams, VarifoldTarget,
                       default_position_bandwidth, embed, make_target,
                       sq_dist_to_target, varifold_inner)

logger = logging.getLogger(__name__)

ARCHIVE_KIND = "gpdssm_state"
DEFAULT_LATENT_DIM = 20
_DIVERGENCE_FACTOR = 10.0
_DIVERGENCE_PATIENCE = 50


@dataclass(frozen=True)
class ShapeEntry:
    """One dataset row: id, mesh, optional label/angles, and split tag."""

    id: str
    mesh: TriMesh
    label: str | None = None
    lcea: float | None = None
    ai: float | None = None
    split: str = "train"


@dataclass(frozen=True)
class ShapeDataset:
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise EmptyInputError("dataset is empty")
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("dataset ids must be unique")
        object.__setattr__(self, "entries", entries)

    def split(self, name):
        return [e for e in self.entries if e.split == name]


@dataclass
class GpdssmState:
    """Everything needed to deform the template and embed new shapes."""

    template: Template
    spatial: SpatialKernelParams
    gp: GpKernelParams
    inducing: InducingState
    latent_means: np.ndarray  # (N, k)
    latent_sds: np.ndarray  # (N, k)
    beta: float
    varifold_kernel: VarifoldKernelParams
    grid: np.ndarray
    train_ids: tuple = ()

    def __post_init__(self):
        self.latent_means = np.asarray(self.latent_means, dtype=float)
        self.latent_sds = np.asarray(self.latent_sds, dtype=float)
        if self.latent_means.shape != self.latent_sds.shape:
            raise ValidationError("latent means/sds shape mismatch")
        if (self.latent_sds <= 0).any():
            raise ValidationError("latent sds must be positive")
        if not self.beta > 0:
            raise ValidationError("beta must be positive")
        if self.inducing.locations.shape[1] != 1 + self.latent_dim:
            raise ValidationError("inducing locations do not match the latent dim")

    @property
    def latent_dim(self):
        return self.latent_means.shape[1]

    @property
    def n_train(self):
        return self.latent_means.shape[0]


@dataclass(frozen=True)
class FitConfig:
    lr: float = 1e-2  # 0 freezes the parameters (useful for tracing)
    iters: int = 300
    batch_size: int = 0  # 0 means full batch
    seed: int = 0

    def __post_init__(self):
        if not (self.lr >= 0 and self.iters > 0 and self.batch_size >= 0):
            raise ValidationError("bad fit config")


@dataclass(frozen=True)
class ElboResult:
    """Loss = data_term + kl_z + kl_u; grads cover every free parameter."""

    loss: float
    data_term: float
    kl_z: float
    kl_u: float
    grads: dict


# ---------------------------------------------------------------------------
# template selection and state initialisation


def pairwise_varifold_sq_dists(meshes, kernel):
    """Symmetric (N, N) matrix of squared varifold distances."""
    atoms = [embed(m) for m in meshes]
    n = len(atoms)
    norms = [varifold_inner(a, a, kernel) for a in atoms]
    d2 = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            cross = varifold_inner(atoms[i], atoms[j], kernel)
            d2[i, j] = d2[j, i] = max(norms[i] - 2.0 * cross + norms[j], 0.0)
    return d2


def farthest_point_sample(points, count):
    """Deterministic farthest-point subset, seeded at the point farthest
    from the centroid."""
    points = np.asarray(points, dtype=float)
    count = min(count, points.shape[0])
    start = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen].copy()


def select_template(meshes, kernel=None, n_control=DEFAULT_N_CONTROL, d2=None):
    """Varifold medoid of the meshes plus farthest-point control points.

    Returns (Template, medoid index). The medoid minimises the summed
    varifold distance to all other meshes, so it is invariant under
    re-ordering of the input list (up to tie order).
    """
    if len(meshes) == 0:
        raise EmptyInputError("no meshes to select a template from")
    if kernel is None:
        kernel = VarifoldKernelParams(default_position_bandwidth(meshes[0]))
    if d2 is None:
        d2 = pairwise_varifold_sq_dists(meshes, kernel)
    idx = int(np.argmin(np.sqrt(np.maximum(d2, 0.0)).sum(axis=1)))
    controls = farthest_point_sample(meshes[idx].vertices, n_control)
    return Template(meshes[idx], controls), idx


def classical_mds(d2, k):
    """Classical multidimensional scaling of a squared-distance matrix to
    k dimensions, each coordinate standardised to unit variance (dims
    with no spread are left untouched)."""
    n = d2.shape[0]
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ d2 @ j
    vals, vecs = np.linalg.eigh(b)
    order = np.argsort(vals)[::-1][:k]
    vals = np.maximum(vals[order], 0.0)
    coords = vecs[:, order] * np.sqrt(vals)[None, :]
    if coords.shape[1] < k:
        coords = np.pad(coords, ((0, 0), (0, k - coords.shape[1])))
    sd = coords.std(axis=0)
    safe = sd > 1e-8
    coords[:, safe] = coords[:, safe] / sd[safe]
    return coords


def initialize_state(train_meshes, *, latent_dim=DEFAULT_LATENT_DIM,
                     n_control=DEFAULT_N_CONTROL, m_inducing=32,
                     t_steps=DEFAULT_T_STEPS, sigma_pos=None, sigma_v=None,
                     length_t=0.5, length_z=1.0, seed=0, train_ids=()):
    """Initial model state: medoid template, beta = 1/median squared
    varifold distance to the template, MDS latent means with sd 0.1,
    uniformly drawn inducing times with standard-normal latent
    coordinates, zero whitened mean, identity covariance factor."""
    if len(train_meshes) == 0:
        raise EmptyInputError("no training meshes")
    kernel = VarifoldKernelParams(
        sigma_pos if sigma_pos is not None else default_position_bandwidth(train_meshes[0]))
    d2 = pairwise_varifold_sq_dists(train_meshes, kernel)
    template, medoid = select_template(train_meshes, kernel, n_control, d2)
    if sigma_pos is None and medoid != 0:
        # re-key the kernel on the selected template's extent
        kernel = VarifoldKernelParams(default_position_bandwidth(template.mesh))
        d2 = pairwise_varifold_sq_dists(train_meshes, kernel)

    others = np.delete(d2[medoid], medoid)
    med = float(np.median(others)) if others.size else 1.0
    beta = 1.0 / max(med, 1e-12)

    latent_means = classical_mds(d2, latent_dim)
    latent_sds = np.full_like(latent_means, 0.1)

    rng = np.random.default_rng(seed)
    loc = np.empty((m_inducing, 1 + latent_dim))
    loc[:, 0] = rng.uniform(0.0, 1.0, m_inducing)
    loc[:, 1:] = rng.standard_normal((m_inducing, latent_dim))
    n_ctrl = template.control_points.shape[0]
    inducing = InducingState(loc, np.zeros((m_inducing, n_ctrl * 3)), np.eye(m_inducing))

    sv = sigma_v if sigma_v is not None else default_velocity_bandwidth(template.mesh)
    return GpdssmState(template=template, spatial=SpatialKernelParams(sv),
                       gp=GpKernelParams(1.0, length_t, length_z),
                       inducing=inducing, latent_means=latent_means,
                       latent_sds=latent_sds, beta=beta, varifold_kernel=kernel,
                       grid=uniform_grid(t_steps), train_ids=tuple(train_ids))


# ---------------------------------------------------------------------------
# ELBO


def _state_params(state, optimize_spatial):
    chol = state.inducing.q_chol
    params = {
        "log_gp_variance": np.log(np.asarray(state.gp.variance, dtype=float)),
        "log_length_t": np.log(np.asarray(state.gp.length_t, dtype=float)),
        "log_length_z": np.log(np.asarray(state.gp.length_z, dtype=float)),
        "inducing_locations": state.inducing.locations.copy(),
        "q_mean": state.inducing.q_mean.copy(),
        "chol_logdiag": np.log(np.diag(chol).copy()),
        "chol_strict": np.tril(chol, -1),
        "latent_means": state.latent_means.copy(),
        "latent_logsds": np.log(state.latent_sds),
    }
    if optimize_spatial:
        params["log_sigma_v"] = np.log(np.asarray(state.spatial.sigma_v, dtype=float))
    return params


def _params_into_state(state, params):
    chol = np.tril(params["chol_strict"], -1) + np.diag(np.exp(params["chol_logdiag"]))
    loc = params["inducing_locations"].copy()
    loc[:, 0] = np.clip(loc[:, 0], 0.0, 1.0)
    inducing = InducingState(loc, params["q_mean"].copy(), chol)
    gp_params = GpKernelParams(float(np.exp(params["log_gp_variance"])),
                               float(np.exp(params["log_length_t"])),
                               float(np.exp(params["log_length_z"])))
    spatial = state.spatial
    if "log_sigma_v" in params:
        spatial = SpatialKernelParams(float(np.exp(params["log_sigma_v"])))
    return replace(state, gp=gp_params, inducing=inducing, spatial=spatial,
                   latent_means=params["latent_means"].copy(),
                   latent_sds=np.exp(params["latent_logsds"]))


def _as_target(obj, kernel):
    if isinstance(obj, VarifoldTarget):
        return obj
    return make_target(obj, kernel)


def _momenta_at_latents(leaves, z_batch, grid, n_ctrl, sample_u=True):
    """Conditional momenta at the sampled latents: (B, T+1, n_ctrl, 3).

    The inducing variables are the whitened sample q_mean + L eps_u (or
    the mean when eps_u is all zeros); the momenta are the sparse
    conditional mean given that sample.
    """
    b = ad.value_of(z_batch).shape[0]
    t_knots = grid.size
    times = np.tile(grid, b)[:, None]
    z_rep = ad.reshape(ad.reshape(z_batch, (b, 1, -1)) * np.ones((1, t_knots, 1)),
                       (b * t_knots, -1))
    query = ad.concat([ad.wrap(times), z_rep], axis=1)
    variance = ad.exp(leaves["log_gp_variance"])
    v_sample = leaves["q_mean"]
    if sample_u:
        l_s = assemble_chol(leaves["chol_logdiag"], leaves["chol_strict"])
        v_sample = v_sample + ad.matmul(l_s, ad.wrap(leaves["_eps_u"]))
    mean, _ = whitened_conditional_mean_var(
        query, leaves["inducing_locations"], v_sample, variance,
        leaves["log_length_t"], leaves["log_length_z"])
    return ad.reshape(mean, (b, t_knots, n_ctrl, 3))


def _elbo_terms(leaves, state, targets, indices, draws, scale):
    """Tape graph of the loss terms for one batch."""
    n_ctrl = state.template.control_points.shape[0]
    idx = np.asarray(indices, dtype=np.int64)
    means = leaves["latent_means"][idx]
    logsds = leaves["latent_logsds"][idx]
    z = means + ad.exp(logsds) * draws["eps_z"]

    leaves["_eps_u"] = draws["eps_u"]
    alphas = _momenta_at_latents(leaves, z, state.grid, n_ctrl,
                                 sample_u=True)
    del leaves["_eps_u"]

    sigma_v = ad.exp(leaves["log_sigma_v"]) if "log_sigma_v" in leaves \
        else state.spatial.sigma_v
    state0 = np.broadcast_to(
        np.concatenate([state.template.control_points, state.template.mesh.vertices]),
        (len(indices), n_ctrl + state.template.mesh.n_vertices, 3)).copy()
    states = integrate_states(state0, n_ctrl, state.grid, alphas, sigma_v)
    endpoint = states[-1]

    data = ad.wrap(0.0)
    faces = state.template.mesh.faces
    for b, target in enumerate(targets):
        verts = endpoint[b, n_ctrl:, :]
        data = data + sq_dist_to_target(verts, faces, target)
    data = (state.beta * scale) * data

    kl_rows = kl_gaussian_diag_var(means, logsds)
    kl_z = scale * ad.sum_(kl_rows)
    kl_u = kl_whitened_inducing_var(leaves["q_mean"], leaves["chol_logdiag"],
                                    leaves["chol_strict"])
    return data, kl_z, kl_u


def elbo(state, batch, draws, *, n_total=None, optimize_spatial=False):
    """Negative ELBO for a batch plus gradients for every parameter.

    ``batch`` is a sequence of (latent index, mesh or VarifoldTarget)
    pairs; ``draws`` maps ``eps_z`` to (B, k) per-shape latent draws and
    ``eps_u`` to an (m, D) whitened inducing draw (zeros give the
    plug-in objective at the variational means). Batch terms are
    rescaled by N/|batch| for unbiased stochastic estimates.
    """
    batch = list(batch)
    if not batch:
        raise EmptyInputError("empty batch")
    indices = [int(i) for i, _ in batch]
    targets = [_as_target(m, state.varifold_kernel) for _, m in batch]
    eps_z = np.asarray(draws["eps_z"], dtype=float)
    eps_u = np.asarray(draws["eps_u"], dtype=float)
    if eps_z.shape != (len(batch), state.latent_dim):
        raise ValidationError("eps_z must be (batch, latent_dim)")
    if eps_u.shape != state.inducing.q_mean.shape:
        raise ValidationError("eps_u must match q_mean's shape")
    n_total = state.n_train if n_total is None else n_total
    scale = n_total / len(batch)

    leaves = {k: ad.leaf(v) for k, v in _state_params(state, optimize_spatial).items()}
    data, kl_z, kl_u = _elbo_terms(leaves, state, targets, indices,
                                   {"eps_z": eps_z, "eps_u": eps_u}, scale)
    loss = data + kl_z + kl_u
    grads = ad.gradients(loss, leaves)
    return ElboResult(loss=float(loss.value), data_term=float(data.value),
                      kl_z=float(kl_z.value), kl_u=float(kl_u.value), grads=grads)


# ---------------------------------------------------------------------------
# fitting


def fit(state, meshes, config, *, optimize_spatial=False):
    """Stochastic variational fit of the model to its training meshes.

    ``meshes`` must align with the state's latent rows. Returns the
    trained state and the per-iteration loss trace. Deterministic for a
    fixed seed; aborts with the trace attached if the loss exceeds 10x
    the initial value for 50 consecutive iterations.
    """
    meshes = list(meshes)
    if len(meshes) != state.n_train:
        raise ValidationError("meshes must match the state's training rows")
    targets = [_as_target(m, state.varifold_kernel) for m in meshes]
    n = len(targets)
    k = state.latent_dim
    batch_size = config.batch_size if 0 < config.batch_size < n else n
    m_ind, d_out = state.inducing.q_mean.shape

    rng = np.random.default_rng(config.seed)
    params = _state_params(state, optimize_spatial)
    opt = Adam(params, lr=config.lr)
    trace = []
    bad_streak = 0
    work = replace(state)
    for it in range(config.iters):
        if batch_size < n:
            idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        else:
            idx = np.arange(n)
        draws = {"eps_z": rng.standard_normal((idx.size, k)),
                 "eps_u": rng.standard_normal((m_ind, d_out))}
        leaves = {key: ad.leaf(v) for key, v in params.items()}
        try:
            work = _params_into_state(work, params)
            data, kl_z, kl_u = _elbo_terms(leaves, work,
                                           [targets[i] for i in idx],
                                           idx, draws, n / idx.size)
        except (ValidationError, NumericalError) as exc:
            err = DivergenceError(f"parameters became invalid at iteration "
                                  f"{it}: {exc}")
            err.trace = trace
            raise err from exc
        loss = data + kl_z + kl_u
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            err = DivergenceError(f"non-finite loss at iteration {it}")
            err.trace = trace
            raise err
        trace.append(loss_val)
        if loss_val > _DIVERGENCE_FACTOR * trace[0]:
            bad_streak += 1
            if bad_streak >= _DIVERGENCE_PATIENCE:
                err = DivergenceError(
                    f"loss exceeded {_DIVERGENCE_FACTOR}x the initial value for "
                    f"{_DIVERGENCE_PATIENCE} consecutive iterations")
                err.trace = trace
                raise err
        else:
            bad_streak = 0
        grads = ad.gradients(loss, leaves)
        opt.step(grads)
        params["inducing_locations"][:, 0] = np.clip(
            params["inducing_locations"][:, 0], 0.0, 1.0)
        if (it + 1) % 50 == 0:
            logger.info("fit iter %d/%d loss %.4f", it + 1, config.iters, loss_val)
    return _params_into_state(state, params), trace


# ---------------------------------------------------------------------------
# prediction


def _conditional_momenta_mean(state, z):
    """Plain-numpy conditional mean momenta at latent z: (T+1, n, 3)."""
    grid = state.grid
    query = np.concatenate([grid[:, None],
                            np.broadcast_to(z, (grid.size, z.shape[0]))], axis=1)
    k_mm = kernel_tz(state.inducing.locations, state.inducing.locations, state.gp)
    l_m, _ = chol_with_jitter(k_mm, state.gp.variance)
    k_qm = kernel_tz(query, state.inducing.locations, state.gp)
    a = solve_triangular(l_m, k_qm.T, lower=True).T
    mean = a @ state.inducing.q_mean
    n_ctrl = state.template.control_points.shape[0]
    return mean.reshape(grid.size, n_ctrl, 3)


def momentum_path(state, z):
    """Posterior-mean momenta at latent ``z`` as a MomentumPath."""
    z = np.asarray(z, dtype=float)
    if z.shape != (state.latent_dim,):
        raise ValidationError("latent dimension mismatch")
    return MomentumPath(state.grid, _conditional_momenta_mean(state, z))


def reconstruct(state, z):
    """Deterministic template deformation at latent ``z`` (posterior-mean
    momenta, no sampling)."""
    from .flow import deform_mesh
    return deform_mesh(state.template, momentum_path(state, z), state.spatial)


def _data_term(state, target, z):
    """beta-weighted squared varifold distance of reconstruct(z) to the
    target (plain numpy)."""
    path = momentum_path(state, np.asarray(z, dtype=float))
    n_ctrl = state.template.control_points.shape[0]
    state0 = np.concatenate([state.template.control_points,
                             state.template.mesh.vertices])
    states = integrate_states(state0, n_ctrl, state.grid, path.alphas,
                              state.spatial.sigma_v)
    verts = states[-1].value[n_ctrl:]
    d2 = sq_dist_to_target(verts, state.template.mesh.faces, target)
    return state.beta * float(d2.value)


@dataclass(frozen=True)
class InferConfig:
    lr: float = 5e-2
    iters: int = 150
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.iters > 0):
            raise ValidationError("bad inference config")


def infer_latent(state, mesh, config=InferConfig()):
    """Posterior q(z*) for an unseen mesh with the model frozen.

    Initialises at the best of {0, each training latent mean, one point
    beyond the training cloud} by data term, then runs Adam on the
    per-shape objective beta * d^2 + KL(q(z*) || N(0,I)). Returns
    (GaussianDist, final beta-weighted data term at the posterior mean).
    """
    target = _as_target(mesh, state.varifold_kernel)
    k = state.latent_dim
    far = np.zeros(k)
    far[0] = float(np.abs(state.latent_means).max() + 4.0 * state.gp.length_z)
    candidates = [np.zeros(k), far] + [m.copy() for m in state.latent_means]
    energies = [_data_term(state, target, z) for z in candidates]
    z0 = candidates[int(np.argmin(energies))]

    params = {"mean": z0.copy(), "logsd": np.full(k, np.log(0.1))}
    frozen = _state_params(state, optimize_spatial=False)
    rng = np.random.default_rng(config.seed)
    m_ind, d_out = state.inducing.q_mean.shape
    opt = Adam(params, lr=config.lr)
    for it in range(config.iters):
        if it == int(0.7 * config.iters):
            opt.lr = 0.2 * config.lr
        leaves = {key: ad.leaf(v) for key, v in params.items()}
        consts = {key: ad.wrap(v) for key, v in frozen.items()}
        consts["mean"] = leaves["mean"]
        consts["logsd"] = leaves["logsd"]
        eps_z = rng.standard_normal((1, k))
        eps_u = rng.standard_normal((m_ind, d_out))
        z = ad.reshape(leaves["mean"], (1, k)) + ad.exp(ad.reshape(leaves["logsd"], (1, k))) * eps_z
        consts["_eps_u"] = eps_u
        n_ctrl = state.template.control_points.shape[0]
        alphas = _momenta_at_latents(consts, z, state.grid, n_ctrl, sample_u=True)
        state0 = np.concatenate([state.template.control_points,
                                 state.template.mesh.vertices])[None]
        states = integrate_states(state0, n_ctrl, state.grid, alphas,
                                  state.spatial.sigma_v)
        verts = states[-1][0, n_ctrl:, :]
        data = state.beta * sq_dist_to_target(verts, state.template.mesh.faces, target)
        kl = ad.sum_(kl_gaussian_diag_var(ad.reshape(leaves["mean"], (1, k)),
                                          ad.reshape(leaves["logsd"], (1, k))))
        loss = data + kl
        if not np.isfinite(float(loss.value)):
            raise DivergenceError(f"latent inference diverged at iteration {it}")
        grads = ad.gradients(loss, leaves)
        opt.step(grads)
    posterior = GaussianDist(params["mean"], np.exp(params["logsd"]))
    return posterior, _data_term(state, target, params["mean"])


# ---------------------------------------------------------------------------
# serialization


def save_state(state, path):
    arrays = {
        "template_vertices": state.template.mesh.vertices,
        "template_faces": state.template.mesh.faces,
        "control_points": state.template.control_points,
        "inducing_locations": state.inducing.locations,
        "q_mean": state.inducing.q_mean,
        "q_chol": state.inducing.q_chol,
        "latent_means": state.latent_means,
        "latent_sds": state.latent_sds,
        "grid": state.grid,
        "scalars": np.array([state.beta, state.spatial.sigma_v,
                             state.gp.variance, state.gp.length_t,
                             state.gp.length_z, state.varifold_kernel.sigma_pos]),
    }
    meta = {"train_ids": list(state.train_ids), "latent_dim": int(state.latent_dim)}
    save_archive(path, ARCHIVE_KIND, arrays, meta)


def load_state(path):
    _, arrays, meta = load_archive(path, expected_kind=ARCHIVE_KIND)
    beta, sigma_v, variance, length_t, length_z, sigma_pos = arrays["scalars"]
    template = Template(TriMesh(arrays["template_vertices"], arrays["template_faces"]),
                        arrays["control_points"])
    inducing = InducingState(arrays["inducing_locations"], arrays["q_mean"],
                             arrays["q_chol"])
    return GpdssmState(template=template, spatial=SpatialKernelParams(float(sigma_v)),
                       gp=GpKernelParams(float(variance), float(length_t), float(length_z)),
                       inducing=inducing, latent_means=arrays["latent_means"],
                       latent_sds=arrays["latent_sds"], beta=float(beta),
                       varifold_kernel=VarifoldKernelParams(float(sigma_pos)),
                       grid=arrays["grid"], train_ids=tuple(meta.get("train_ids", ())))
