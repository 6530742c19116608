"""Shared fixtures: small deterministic mesh factories and the
acceptance-summary hook that prints one line per criterion at the end
of the run."""

import numpy as np
import pytest

from diffshape.meshes import CupParams, TriMesh, generate_cup

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_recorder():
    return ACCEPTANCE_LINES.append


def grid_patch(rng=None, nx=3, ny=3, scale=1.0, noise=0.3):
    """Triangulated rectangular patch with jittered vertices; always a
    valid mesh, cheap enough for metric property sweeps."""
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float),
                         indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1) * scale
    if rng is not None:
        verts = verts + noise * scale * rng.standard_normal(verts.shape)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = a + ny
            faces.append((a, b, b + 1))
            faces.append((a, b + 1, a + 1))
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def small_cup(seed=0, depth=0.9, rim=0.0, noise=0.1, rings=5, sectors=8):
    return generate_cup(CupParams(depth_scale=depth, rim_retraction=rim,
                                  radial_noise_sd=noise, rings=rings,
                                  sectors=sectors, seed=seed))


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
