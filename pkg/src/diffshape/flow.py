"""Control-point velocity fields and RK4 integration of the induced flow.

A time-dependent set of momenta attached to control points defines the
velocity field ``v(t, x) = sum_i exp(-|x - x_i(t)|^2 / sigma_v^2) a_i(t)``.
Control points move under their own field; mesh vertices are carried
along by co-integrating them in the same state vector. Momenta live on a
time grid and are interpolated linearly inside each interval, so the
right-hand side is smooth within a step and RK4 keeps fourth order when
steps subdivide grid intervals exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, ValidationError
from .meshes import TriMesh, bbox_diagonal

DEFAULT_T_STEPS = 10
DEFAULT_N_CONTROL = 64


@dataclass(frozen=True)
class SpatialKernelParams:
    """Bandwidth sigma_v (mm) of the Gaussian velocity kernel."""

    sigma_v: float

    def __post_init__(self):
        if not self.sigma_v > 0:
            raise ValidationError("sigma_v must be positive")


@dataclass(frozen=True)
class Template:
    """Reference mesh plus its control points (n,3)."""

    mesh: TriMesh
    control_points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.control_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValidationError("control points must be (n>=1,3)")
        lo = self.mesh.vertices.min(axis=0)
        hi = self.mesh.vertices.max(axis=0)
        center = (lo + hi) / 2.0
        half = np.maximum((hi - lo) / 2.0, 1e-9)
        if (np.abs(pts - center) > 1.5 * half).any():
            raise ValidationError("control points lie outside 1.5x the mesh bounding box")
        object.__setattr__(self, "control_points", pts)


@dataclass(frozen=True)
class MomentumPath:
    """Momenta on a time grid: grid (T+1,) increasing from 0 to 1,
    alphas (T+1, n, 3)."""

    grid: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        a = np.asarray(self.alphas, dtype=float)
        if g.ndim != 1 or g.size < 2 or abs(g[0]) > 1e-12 or abs(g[-1] - 1.0) > 1e-12:
            raise ValidationError("grid must run from 0 to 1")
        if (np.diff(g) <= 0).any():
            raise ValidationError("grid must be strictly increasing")
        if a.ndim != 3 or a.shape[0] != g.size or a.shape[2] != 3:
            raise ValidationError(f"alphas must be (T+1,n,3) matching the grid, got {a.shape}")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "alphas", a)


def default_velocity_bandwidth(template_mesh):
    """Default bandwidth: 0.3 x the template's bounding-box diagonal."""
    return 0.3 * bbox_diagonal(template_mesh)


def uniform_grid(t_steps=DEFAULT_T_STEPS):
    return np.linspace(0.0, 1.0, t_steps + 1)


def velocity_at(x, control_points, alphas, kernel):
    """Velocity field at point(s) ``x`` given control points (n,3) and
    per-point momenta (n,3)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    d2 = ((pts[:, None, :] - np.asarray(control_points)[None, :, :]) ** 2).sum(axis=2)
    v = np.exp(-d2 / kernel.sigma_v**2) @ np.asarray(alphas, dtype=float)
    return v[0] if single else v


# ---------------------------------------------------------------------------
# tape-level integration (shared by the public API and the model ELBO)


def _velocity_var(state, n_ctrl, alpha, inv_sig2):
    """Velocity of every state point under the control block's field.

    state: (..., P, 3) with the first n_ctrl rows the control points,
    alpha: (..., n_ctrl, 3), inv_sig2: 1/sigma_v^2 (Var or float).
    """
    ctrl = state[..., :n_ctrl, :]
    s2 = ad.sum_(ad.square(state), axis=-1, keepdims=True)
    c2 = ad.swap_last2(ad.sum_(ad.square(ctrl), axis=-1, keepdims=True))
    d2 = s2 + c2 - 2.0 * ad.matmul(state, ad.swap_last2(ctrl))
    k = ad.exp(d2 * (-1.0 * inv_sig2))
    return ad.matmul(k, alpha)


def integrate_states(state0, n_ctrl, grid, alphas, sigma_v, substeps=1):
    """RK4-integrate the flow; returns the list of states at every grid
    knot (autodiff Vars). ``alphas`` has shape (..., T+1, n_ctrl, 3) with
    leading dims matching ``state0``'s (..., P, 3)."""
    if substeps < 1:
        raise ValidationError("substeps must be >= 1")
    state0 = ad.wrap(state0)
    alphas = ad.wrap(alphas)
    inv_sig2 = 1.0 / float(sigma_v) ** 2 if not isinstance(sigma_v, ad.Var) \
        else 1.0 / ad.square(sigma_v)
    grid = np.asarray(grid, dtype=float)
    batched = state0.value.ndim == 3
    states = [state0]
    s = state0
    for j in range(grid.size - 1):
        if batched:
            a_lo, a_hi = alphas[:, j], alphas[:, j + 1]
        else:
            a_lo, a_hi = alphas[j], alphas[j + 1]
        h = (grid[j + 1] - grid[j]) / substeps
        for ss in range(substeps):
            f0 = ss / substeps
            fm = (ss + 0.5) / substeps
            f1 = (ss + 1.0) / substeps
            a0 = a_lo * (1.0 - f0) + a_hi * f0
            am = a_lo * (1.0 - fm) + a_hi * fm
            a1 = a_lo * (1.0 - f1) + a_hi * f1
            k1 = _velocity_var(s, n_ctrl, a0, inv_sig2)
            k2 = _velocity_var(s + (0.5 * h) * k1, n_ctrl, am, inv_sig2)
            k3 = _velocity_var(s + (0.5 * h) * k2, n_ctrl, am, inv_sig2)
            k4 = _velocity_var(s + h * k3, n_ctrl, a1, inv_sig2)
            s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(s.value).all():
            raise NumericalError(f"flow blew up in grid interval {j}")
        states.append(s)
    return states


def shoot(points, path, kernel, substeps=1):
    """Integrate the control points under their own field.

    Returns (trajectory (T+1, n, 3) at the grid knots, endpoint (n, 3)).
    """
    points = np.asarray(points, dtype=float)
    if points.shape != path.alphas.shape[1:]:
        raise ValidationError("points and momenta shapes disagree")
    states = integrate_states(points, points.shape[0], path.grid, path.alphas,
                              kernel.sigma_v, substeps)
    traj = np.stack([st.value for st in states], axis=0)
    return traj, traj[-1]


def deform_mesh(template, path, kernel, substeps=1):
    """Carry the template mesh through the flow of its control points."""
    n_ctrl = template.control_points.shape[0]
    if path.alphas.shape[1] != n_ctrl:
        raise ValidationError("momenta do not match the template's control points")
    state0 = np.concatenate([template.control_points, template.mesh.vertices], axis=0)
    states = integrate_states(state0, n_ctrl, path.grid, path.alphas,
                              kernel.sigma_v, substeps)
    final = states[-1].value
    return template.mesh.with_vertices(final[n_ctrl:])


def inverse_flow_check(points, path, kernel, substeps=1):
    """Round-trip invertibility: integrate forward, then integrate the
    time-reversed negated momenta from the endpoint; returns the maximum
    displacement from the start."""
    _, end = shoot(points, path, kernel, substeps)
    rev_grid = 1.0 - path.grid[::-1]
    rev_alphas = -path.alphas[::-1]
    rev = MomentumPath(rev_grid, rev_alphas)
    states = integrate_states(end, end.shape[0], rev.grid, rev.alphas,
                              kernel.sigma_v, substeps)
    back = states[-1].value
    return float(np.linalg.norm(back - points, axis=1).max())
