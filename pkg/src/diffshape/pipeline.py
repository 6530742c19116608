"""Dataset manifest, configuration file, and the workflow commands.

The on-disk protocol is deliberately plain: a CSV manifest describes the
dataset, a key=value text file holds every tunable, and each command
reads/writes files under one output directory:

    meshes/, landmarks/   cmd_generate
    aligned/              cmd_preprocess
    models/               cmd_fit
    latents/              cmd_infer
    scores/               cmd_classify
    reports/              cmd_evaluate
    viz/                  cmd_visualize

Test-row labels are held behind an access gate: commands before
cmd_evaluate cannot read them (the accessor raises), and every test
label read is counted so the protocol can be audited.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from . import model as model_mod
from .classify import (AngleRecord, fit_angle_score, fit_gp_classifier,
                       predict_proba)
from .errors import EmptyInputError, ValidationError
from .evaluation import (class_average, dysplastic_mode_pca, make_report,
                         paired_bootstrap_diff, permutation_map, write_report,
                         write_roc_svg)
from .flow import SpatialKernelParams, default_velocity_bandwidth, uniform_grid
from .meshes import (CupParams, generate_cup_with_landmarks, load_landmarks,
                     load_mesh, save_landmarks, save_mesh)
from .preprocess import extract_cup, make_alignment_config, rigid_align
from .varifold import VarifoldKernelParams, default_position_bandwidth

logger = logging.getLogger(__name__)

LABELS = ("control", "dysplastic")
_MANIFEST_COLUMNS = ("id", "mesh_path", "landmarks_path", "label",
                     "lcea", "ai", "split")


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRow:
    """One dataset row; the class label lives in the manifest's gated
    store, not here."""

    id: str
    mesh_path: str | None
    landmarks_path: str | None
    lcea: float | None
    ai: float | None
    split: str


class Manifest:
    """Rows plus a gated label store.

    ``label(row_id)`` returns train labels freely; test labels raise
    until ``unlock_test_labels()`` is called (the evaluation step), and
    every successful test-label read increments ``test_label_reads``.
    """

    def __init__(self, rows, labels, base_dir):
        rows = tuple(rows)
        ids = [r.id for r in rows]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest ids must be unique")
        for r in rows:
            if r.split not in ("train", "test"):
                raise ValidationError(f"row {r.id}: split must be train or test")
        self._rows = rows
        self._labels = dict(labels)
        self._by_id = {r.id: r for r in rows}
        self.base_dir = Path(base_dir)
        self.test_label_reads = 0
        self._test_unlocked = False

    @property
    def rows(self):
        return self._rows

    def row(self, row_id):
        try:
            return self._by_id[row_id]
        except KeyError:
            raise ValidationError(f"unknown manifest id {row_id!r}") from None

    def split_rows(self, split):
        return [r for r in self._rows if r.split == split]

    def unlock_test_labels(self):
        self._test_unlocked = True

    def label(self, row_id):
        row = self.row(row_id)
        if row.split == "test":
            if not self._test_unlocked:
                raise ValidationError(
                    "test labels are locked before the evaluation step")
            self.test_label_reads += 1
        return self._labels.get(row_id)

    def resolve(self, rel_path):
        p = Path(rel_path)
        return p if p.is_absolute() else self.base_dir / p


def _opt_float(cell):
    cell = cell.strip()
    return None if cell == "" else float(cell)


def load_manifest(path):
    path = Path(path)
    rows = []
    labels = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: empty manifest") from None
        header = [h.strip() for h in header]
        unknown = set(header) - set(_MANIFEST_COLUMNS)
        if unknown:
            raise ValidationError(
                f"{path}: unknown manifest column(s) {sorted(unknown)}")
        for need in ("id", "split"):
            if need not in header:
                raise ValidationError(f"{path}: missing required column {need!r}")
        col = {name: header.index(name) if name in header else None
               for name in _MANIFEST_COLUMNS}

        def cell(parts, name):
            i = col[name]
            return parts[i].strip() if i is not None and i < len(parts) else ""

        for lineno, parts in enumerate(reader, start=2):
            if not parts or all(not c.strip() for c in parts):
                continue
            try:
                row = ManifestRow(
                    id=cell(parts, "id"),
                    mesh_path=cell(parts, "mesh_path") or None,
                    landmarks_path=cell(parts, "landmarks_path") or None,
                    lcea=_opt_float(cell(parts, "lcea")),
                    ai=_opt_float(cell(parts, "ai")),
                    split=cell(parts, "split"),
                )
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if not row.id:
                raise ValidationError(f"{path}:{lineno}: empty id")
            rows.append(row)
            label = cell(parts, "label") or None
            if label is not None and label not in LABELS:
                raise ValidationError(
                    f"{path}:{lineno}: label must be one of {LABELS}")
            labels[row.id] = label
    return Manifest(rows, labels, path.parent)


def save_manifest(manifest, path):
    lines = [",".join(_MANIFEST_COLUMNS)]
    for r in manifest.rows:
        label = manifest._labels.get(r.id) or ""
        cells = [r.id, r.mesh_path or "", r.landmarks_path or "", label,
                 "" if r.lcea is None else repr(float(r.lcea)),
                 "" if r.ai is None else repr(float(r.ai)), r.split]
        lines.append(",".join(cells))
    _atomic_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# configuration


def _auto_float(text):
    return None if text == "auto" else float(text)


@dataclass
class PipelineConfig:
    """Every tunable of the workflow; see the field comments for units.

    ``sigma_pos`` and ``sigma_v`` accept the literal ``auto`` in the
    config file (None here), meaning scale them from the data.
    """

    # synthetic data generation
    train_per_class: int = 12
    test_per_class: int = 12
    rings: int = 20
    sectors: int = 40
    noise_sd: float = 0.15  # mm, radial
    landmark_count: int = 6
    depth_control_lo: float = 0.85
    depth_control_hi: float = 1.05
    depth_dysplastic_lo: float = 0.45
    depth_dysplastic_hi: float = 0.70
    rim_max: float = 0.10
    # kernel bandwidths (mm)
    sigma_pos: float | None = None
    sigma_v: float | None = None
    # flow
    t_steps: int = 10
    n_control: int = 64
    # latent model
    latent_dim: int = 20
    m_inducing: int = 32
    gp_length_t: float = 0.5
    gp_length_z: float = 1.0
    fit_lr: float = 1e-2
    fit_iters: int = 300
    batch_size: int = 0  # 0 = full batch
    infer_lr: float = 5e-2
    infer_iters: int = 150
    # alignment
    align_iters: int = 200
    align_lr: float = 1e-2
    # geodesic baseline
    atlas_lr: float = 2e-2
    atlas_iters: int = 200
    lambda_factor: float = 1e-3
    # classification / evaluation
    pca_components: int = 10
    n_boot: int = 2000
    n_perm: int = 999
    alpha: float = 0.05
    seed: int = 0


_CONFIG_CASTERS = {
    "noise_sd": float, "depth_control_lo": float, "depth_control_hi": float,
    "depth_dysplastic_lo": float, "depth_dysplastic_hi": float,
    "rim_max": float, "sigma_pos": _auto_float, "sigma_v": _auto_float,
    "gp_length_t": float, "gp_length_z": float, "fit_lr": float,
    "infer_lr": float, "align_lr": float, "atlas_lr": float,
    "lambda_factor": float, "alpha": float,
}


_CONFIG_KEYS = {f.name for f in fields(PipelineConfig)}


def _caster_for(key):
    return _CONFIG_CASTERS.get(key, int)


def default_config():
    return PipelineConfig()


def load_config(path):
    """Parse a flat ``key = value`` file; '#' starts a comment; keys not
    in the schema are rejected."""
    cfg = default_config()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _CONFIG_KEYS:
                raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                setattr(cfg, key, _caster_for(key)(value))
            except ValueError:
                raise ValidationError(
                    f"{path}:{lineno}: bad value {value!r} for {key}") from None
    _validate_config(cfg)
    return cfg


def _validate_config(cfg):
    positive = ("rings", "sectors", "landmark_count", "t_steps", "n_control",
                "latent_dim", "m_inducing", "gp_length_t", "gp_length_z",
                "fit_lr", "fit_iters", "infer_lr", "infer_iters", "align_iters",
                "align_lr", "atlas_lr", "atlas_iters", "pca_components",
                "n_boot", "n_perm")
    for key in positive:
        if not getattr(cfg, key) > 0:
            raise ValidationError(f"config {key} must be positive")
    for key in ("noise_sd", "lambda_factor", "batch_size"):
        if getattr(cfg, key) < 0:
            raise ValidationError(f"config {key} must be non-negative")
    if not 0.0 < cfg.alpha < 1.0:
        raise ValidationError("config alpha must be in (0, 1)")
    if not 0.0 <= cfg.rim_max < 1.0:
        raise ValidationError("config rim_max must be in [0, 1)")
    for key in ("sigma_pos", "sigma_v"):
        v = getattr(cfg, key)
        if v is not None and not v > 0:
            raise ValidationError(f"config {key} must be positive or auto")
    if cfg.train_per_class < 0 or cfg.test_per_class < 0:
        raise ValidationError("per-class counts must be non-negative")
    for lo, hi in (("depth_control_lo", "depth_control_hi"),
                   ("depth_dysplastic_lo", "depth_dysplastic_hi")):
        if not 0 < getattr(cfg, lo) <= getattr(cfg, hi):
            raise ValidationError(f"config {lo}..{hi} must be an increasing "
                                  "positive range")


# ---------------------------------------------------------------------------
# shared helpers


def _atomic_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(str(c) for c in row) for row in rows]
    _atomic_text(path, "\n".join(lines) + "\n")


def _fmt(x):
    return repr(float(x))


@contextmanager
def _staged_dir(final_dir):
    """Build a command's output directory under a .partial name and move
    it into place only on success."""
    final = Path(final_dir)
    partial = final.with_name(final.name + ".partial")
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir(parents=True)
    try:
        yield partial
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    os.replace(partial, final)


def _read_feature_csv(path, prefix):
    """(ids, features) from a CSV whose feature columns are named
    prefix0, prefix1, ... in order."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        feat_cols = [i for i, h in enumerate(header)
                     if h.startswith(prefix) and h[len(prefix):].isdigit()]
        if header[0] != "id" or not feat_cols:
            raise ValidationError(f"{path}: expected an id column and "
                                  f"{prefix}* feature columns")
        ids = []
        feats = []
        for parts in reader:
            if not parts:
                continue
            ids.append(parts[0].strip())
            feats.append([float(parts[i]) for i in feat_cols])
    return ids, np.asarray(feats, dtype=float)


def _wanted(model, name):
    return model == "all" or model == name


def _labels01(manifest, ids):
    out = []
    for i in ids:
        lab = manifest.label(i)
        if lab not in LABELS:
            raise ValidationError(f"row {i!r} is missing a valid label")
        out.append(1 if lab == "dysplastic" else 0)
    return np.asarray(out)


def _aligned_path(out_dir, row_id):
    return Path(out_dir) / "aligned" / f"{row_id}.ply"


def _load_aligned(manifest, out_dir, rows):
    meshes = []
    for r in rows:
        p = _aligned_path(out_dir, r.id)
        if not p.exists():
            raise ValidationError(
                f"missing aligned mesh {p}; run the preprocess command first")
        meshes.append(load_mesh(p))
    return meshes


# ---------------------------------------------------------------------------
# commands


def cmd_generate(manifest_path, config, out_dir=None, seed=None):
    """Synthesise the labelled cup dataset and write its manifest.

    Controls draw depth scales near a full hemisphere, dysplastic rows
    markedly shallower; radiographic angles are drawn per class
    (control LCEA ~ N(30,3), AI ~ N(8,3); dysplastic LCEA ~ N(16,3),
    AI ~ N(19,3)) so the clinical thresholds hold for the vast majority
    of rows. The split is stratified per class.
    """
    manifest_path = Path(manifest_path)
    out = Path(out_dir) if out_dir is not None else manifest_path.parent
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    total = config.train_per_class + config.test_per_class
    if total == 0:
        raise ValidationError("per-class counts are both zero")

    angle_means = {"control": (30.0, 8.0), "dysplastic": (16.0, 19.0)}
    depth_range = {
        "control": (config.depth_control_lo, config.depth_control_hi),
        "dysplastic": (config.depth_dysplastic_lo, config.depth_dysplastic_hi),
    }
    rows = []
    labels = {}
    out.mkdir(parents=True, exist_ok=True)
    with _staged_dir(out / "meshes") as mesh_dir, \
            _staged_dir(out / "landmarks") as lm_dir:
        for label in LABELS:
            lo, hi = depth_range[label]
            mean_lcea, mean_ai = angle_means[label]
            for i in range(total):
                depth = rng.uniform(lo, hi)
                rim = rng.uniform(0.0, config.rim_max)
                lcea = rng.normal(mean_lcea, 3.0)
                ai = rng.normal(mean_ai, 3.0)
                cup_seed = int(rng.integers(0, 2**31 - 1))
                params = CupParams(depth_scale=depth, rim_retraction=rim,
                                   radial_noise_sd=config.noise_sd,
                                   rings=config.rings, sectors=config.sectors,
                                   seed=cup_seed)
                mesh, lms = generate_cup_with_landmarks(params,
                                                        config.landmark_count)
                rid = f"{label}_{i:03d}"
                save_mesh(mesh, mesh_dir / f"{rid}.ply")
                save_landmarks(lms, lm_dir / f"{rid}.csv")
                split = "train" if i < config.train_per_class else "test"
                mesh_rel = os.path.relpath(out / "meshes" / f"{rid}.ply",
                                           manifest_path.parent)
                lm_rel = os.path.relpath(out / "landmarks" / f"{rid}.csv",
                                         manifest_path.parent)
                rows.append(ManifestRow(id=rid, mesh_path=mesh_rel,
                                        landmarks_path=lm_rel, lcea=float(lcea),
                                        ai=float(ai), split=split))
                labels[rid] = label
    manifest = Manifest(rows, labels, manifest_path.parent)
    save_manifest(manifest, manifest_path)
    logger.info("generated %d meshes under %s", len(rows), out)
    return manifest


def cmd_preprocess(manifest, config, out_dir, seed=None):
    """Extract the cup region of every mesh and align all cups to the
    varifold medoid of the training cups."""
    rows = list(manifest.rows)
    if not rows:
        raise EmptyInputError("manifest has no rows")
    extracted = {}
    for r in rows:
        if not r.mesh_path or not r.landmarks_path:
            raise ValidationError(f"row {r.id!r} needs mesh_path and "
                                  "landmarks_path for preprocessing")
        mesh = load_mesh(manifest.resolve(r.mesh_path))
        lms = load_landmarks(manifest.resolve(r.landmarks_path))
        extracted[r.id] = extract_cup(mesh, lms)

    train_rows = manifest.split_rows("train")
    if not train_rows:
        raise ValidationError("no train rows to pick an alignment reference from")
    train_cups = [extracted[r.id] for r in train_rows]
    kernel = VarifoldKernelParams(
        config.sigma_pos if config.sigma_pos is not None
        else default_position_bandwidth(train_cups[0]))
    _, medoid = model_mod.select_template(train_cups, kernel)
    reference = train_cups[medoid]
    align_cfg = make_alignment_config(reference, kernel=kernel,
                                      max_iters=config.align_iters,
                                      step_size=config.align_lr)
    transforms = {}
    with _staged_dir(Path(out_dir) / "aligned") as staged:
        for r in rows:
            transform, aligned, energy = rigid_align(extracted[r.id],
                                                     reference, align_cfg)
            save_mesh(aligned, staged / f"{r.id}.ply")
            transforms[r.id] = {
                "quaternion": [float(v) for v in transform.quaternion],
                "scale": float(transform.scale),
                "translation": [float(v) for v in transform.translation],
                "energy": float(energy),
            }
        _atomic_text(staged / "transforms.json",
                     json.dumps({"reference": train_rows[medoid].id,
                                 "transforms": transforms},
                                indent=2, sort_keys=True) + "\n")
    logger.info("aligned %d cups (reference %s)", len(rows),
                train_rows[medoid].id)


def cmd_fit(manifest, config, out_dir, seed=None, model="all"):
    """Fit the latent model and/or the geodesic baseline on train rows."""
    seed = config.seed if seed is None else seed
    train_rows = manifest.split_rows("train")
    if not train_rows:
        raise ValidationError("manifest has no train rows")
    meshes = _load_aligned(manifest, out_dir, train_rows)
    ids = [r.id for r in train_rows]
    models_dir = Path(out_dir) / "models"
    models_dir.mkdir(parents=True, exist_ok=True)

    if _wanted(model, "gpdssm"):
        state0 = model_mod.initialize_state(
            meshes, latent_dim=config.latent_dim, n_control=config.n_control,
            m_inducing=config.m_inducing, t_steps=config.t_steps,
            sigma_pos=config.sigma_pos, sigma_v=config.sigma_v,
            length_t=config.gp_length_t, length_z=config.gp_length_z,
            seed=seed, train_ids=ids)
        fit_cfg = model_mod.FitConfig(lr=config.fit_lr, iters=config.fit_iters,
                                      batch_size=config.batch_size, seed=seed)
        state, trace = model_mod.fit(state0, meshes, fit_cfg)
        model_mod.save_state(state, models_dir / "gpdssm.archive")
        _atomic_text(models_dir / "gpdssm_trace.json",
                     json.dumps({"loss": trace}) + "\n")
        logger.info("latent model fitted: final loss %.4f", trace[-1])

    if _wanted(model, "lddmm"):
        kernel = VarifoldKernelParams(
            config.sigma_pos if config.sigma_pos is not None
            else default_position_bandwidth(meshes[0]))
        template, _ = model_mod.select_template(meshes, kernel, config.n_control)
        spatial = SpatialKernelParams(
            config.sigma_v if config.sigma_v is not None
            else default_velocity_bandwidth(template.mesh))
        atlas_cfg = atlas_mod.AtlasFitConfig(lr=config.atlas_lr,
                                             iters=config.atlas_iters, seed=seed)
        astate, atrace = atlas_mod.fit_atlas(
            template, meshes, kernel, atlas_cfg, spatial=spatial,
            grid=uniform_grid(config.t_steps),
            lam_factor=config.lambda_factor, train_ids=ids)
        atlas_mod.save_atlas(astate, models_dir / "lddmm.archive")
        _atomic_text(models_dir / "lddmm_trace.json",
                     json.dumps({"loss": atrace}) + "\n")
        logger.info("geodesic baseline fitted: final loss %.4f", atrace[-1])


def cmd_infer(manifest, config, out_dir, seed=None, model="all"):
    """Embed test rows: latent posteriors and/or baseline momenta."""
    seed = config.seed if seed is None else seed
    test_rows = manifest.split_rows("test")
    if not test_rows:
        raise ValidationError("manifest has no test rows")
    test_meshes = _load_aligned(manifest, out_dir, test_rows)
    latents_dir = Path(out_dir) / "latents"
    latents_dir.mkdir(parents=True, exist_ok=True)

    if _wanted(model, "gpdssm"):
        path = Path(out_dir) / "models" / "gpdssm.archive"
        if not path.exists():
            raise ValidationError(f"missing {path}; run the fit command first")
        state = model_mod.load_state(path)
        k = state.latent_dim
        _write_csv(latents_dir / "train_gpdssm.csv",
                   ["id"] + [f"z{j}" for j in range(k)],
                   [[rid] + [_fmt(v) for v in state.latent_means[i]]
                    for i, rid in enumerate(state.train_ids)])
        infer_cfg = model_mod.InferConfig(lr=config.infer_lr,
                                          iters=config.infer_iters, seed=seed)
        rows_out = []
        for r, mesh in zip(test_rows, test_meshes):
            post, energy = model_mod.infer_latent(state, mesh, infer_cfg)
            rows_out.append([r.id] + [_fmt(v) for v in post.mean]
                            + [_fmt(v) for v in post.sd] + [_fmt(energy)])
            logger.info("embedded %s (energy %.4f)", r.id, energy)
        _write_csv(latents_dir / "test_gpdssm.csv",
                   ["id"] + [f"z{j}" for j in range(k)]
                   + [f"sd{j}" for j in range(k)] + ["energy"], rows_out)

    if _wanted(model, "lddmm"):
        path = Path(out_dir) / "models" / "lddmm.archive"
        if not path.exists():
            raise ValidationError(f"missing {path}; run the fit command first")
        astate = atlas_mod.load_atlas(path)
        d = astate.momenta.shape[1] * 3
        _write_csv(latents_dir / "train_lddmm.csv",
                   ["id"] + [f"m{j}" for j in range(d)],
                   [[rid] + [_fmt(v) for v in astate.momenta[i].ravel()]
                    for i, rid in enumerate(astate.train_ids)])
        fit_cfg = atlas_mod.AtlasFitConfig(lr=config.atlas_lr,
                                           iters=config.atlas_iters, seed=seed)
        rows_out = []
        for r, mesh in zip(test_rows, test_meshes):
            momenta, energy = atlas_mod.fit_shape_momenta(astate, mesh, fit_cfg)
            rows_out.append([r.id] + [_fmt(v) for v in momenta.ravel()]
                            + [_fmt(energy)])
            logger.info("fitted momenta for %s (energy %.4f)", r.id, energy)
        _write_csv(latents_dir / "test_lddmm.csv",
                   ["id"] + [f"m{j}" for j in range(d)] + ["energy"], rows_out)


def cmd_classify(manifest, config, out_dir, seed=None, model="all"):
    """Train scorers on train rows and score the test rows."""
    latents_dir = Path(out_dir) / "latents"
    scores_dir = Path(out_dir) / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)

    def _gp_scores(train_feats, train_ids, test_feats):
        y = _labels01(manifest, train_ids)
        clf = fit_gp_classifier(train_feats, y)
        return predict_proba(clf, test_feats)

    if _wanted(model, "gpdssm"):
        tr = latents_dir / "train_gpdssm.csv"
        te = latents_dir / "test_gpdssm.csv"
        if not (tr.exists() and te.exists()):
            raise ValidationError(f"missing {tr} or {te}; run the infer "
                                  "command first")
        train_ids, train_z = _read_feature_csv(tr, "z")
        test_ids, test_z = _read_feature_csv(te, "z")
        probs = _gp_scores(train_z, train_ids, test_z)
        _write_csv(scores_dir / "gpdssm.csv", ["id", "score"],
                   [[i, _fmt(p)] for i, p in zip(test_ids, probs)])

    if _wanted(model, "lddmm"):
        tr = latents_dir / "train_lddmm.csv"
        te = latents_dir / "test_lddmm.csv"
        if not (tr.exists() and te.exists()):
            raise ValidationError(f"missing {tr} or {te}; run the infer "
                                  "command first")
        train_ids, train_m = _read_feature_csv(tr, "m")
        test_ids, test_m = _read_feature_csv(te, "m")
        n_ctrl = train_m.shape[1] // 3
        pca, coords = atlas_mod.momenta_pca(
            train_m.reshape(-1, n_ctrl, 3), config.pca_components)
        test_coords = pca.project(test_m.reshape(-1, n_ctrl, 3))
        probs = _gp_scores(coords, train_ids, test_coords)
        _write_csv(scores_dir / "lddmm.csv", ["id", "score"],
                   [[i, _fmt(p)] for i, p in zip(test_ids, probs)])

    if _wanted(model, "angles"):
        scores = _angle_scores(manifest)
        _write_csv(scores_dir / "angles.csv", ["id", "score"],
                   [[i, _fmt(p)] for i, p in scores])


def _angle_scores(manifest):
    """Fit the logistic angle scorer on train rows, score test rows."""
    train_rows = manifest.split_rows("train")
    test_rows = manifest.split_rows("test")
    for r in train_rows + test_rows:
        if r.lcea is None or r.ai is None:
            raise ValidationError(f"row {r.id!r} is missing lcea/ai angles")
    records = [AngleRecord(r.lcea, r.ai) for r in train_rows]
    y = _labels01(manifest, [r.id for r in train_rows])
    scorer = fit_angle_score(records, y)
    probs = scorer.score([r.lcea for r in test_rows],
                         [r.ai for r in test_rows])
    return [(r.id, float(p)) for r, p in zip(test_rows, probs)]


def cmd_evaluate(manifest, config, out_dir, seed=None, model="all"):
    """Score reports for every available model; absent models are marked
    rather than failing the whole evaluation."""
    seed = config.seed if seed is None else seed
    manifest.unlock_test_labels()
    test_rows = manifest.split_rows("test")
    if not test_rows:
        raise ValidationError("manifest has no test rows")
    test_ids = [r.id for r in test_rows]
    y = _labels01(manifest, test_ids)
    scores_dir = Path(out_dir) / "scores"

    def _scores_for(name):
        path = scores_dir / f"{name}.csv"
        if path.exists():
            ids, feats = _read_feature_csv_scores(path)
            by_id = dict(zip(ids, feats))
            missing = [i for i in test_ids if i not in by_id]
            if missing:
                raise ValidationError(f"{path} lacks scores for {missing}")
            return np.array([by_id[i] for i in test_ids])
        if name == "angles":
            try:
                return np.array([p for _, p in _angle_scores(manifest)])
            except ValidationError:
                return None
        return None

    summary = {}
    reports = {}
    with _staged_dir(Path(out_dir) / "reports") as staged:
        for name in ("gpdssm", "lddmm", "angles"):
            if not _wanted(model, name):
                continue
            scores = _scores_for(name)
            if scores is None:
                summary[name] = "absent"
                continue
            report = make_report(scores, y, n_boot=config.n_boot, seed=seed)
            write_report(staged / f"{name}.json", report)
            write_roc_svg(staged / f"{name}_roc.svg",
                          np.asarray(report["roc"]))
            reports[name] = scores
            summary[name] = {k: report[k] for k in
                             ("auc", "accuracy", "sensitivity", "specificity")}
            summary[name]["ci"] = report["ci"]
        if "gpdssm" in reports and "lddmm" in reports:
            diffs, ci = paired_bootstrap_diff(reports["gpdssm"],
                                              reports["lddmm"], y,
                                              n_boot=config.n_boot, seed=seed)
            summary["auc_diff_gpdssm_minus_lddmm"] = {
                "mean": float(np.nanmean(diffs)), "ci": list(ci)}
        write_report(staged / "summary.json", summary)
    return summary


def _read_feature_csv_scores(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header[:2] != ["id", "score"]:
            raise ValidationError(f"{path}: expected columns id,score")
        ids, scores = [], []
        for parts in reader:
            if not parts:
                continue
            ids.append(parts[0].strip())
            scores.append(float(parts[1]))
    return ids, scores


def cmd_visualize(manifest, config, out_dir, seed=None, model="all"):
    """Class averages, significance heat map, and the dominant
    control-to-dysplastic displacement mode, from the trained latent
    model's training reconstructions."""
    seed = config.seed if seed is None else seed
    path = Path(out_dir) / "models" / "gpdssm.archive"
    if not path.exists():
        raise ValidationError(f"missing {path}; run the fit command first")
    state = model_mod.load_state(path)
    if not state.train_ids:
        raise ValidationError("model state lacks training ids")
    y = _labels01(manifest, state.train_ids)
    if y.min() == y.max():
        raise ValidationError("need both classes among train rows")
    recons = [model_mod.reconstruct(state, z) for z in state.latent_means]
    verts = np.stack([m.vertices for m in recons])
    template = state.template.mesh

    with _staged_dir(Path(out_dir) / "viz") as staged:
        averages = class_average(verts, y)
        for value, name in ((0, "control"), (1, "dysplastic")):
            save_mesh(template.with_vertices(averages[value]),
                      staged / f"average_{name}.ply")
        mags = np.linalg.norm(verts - template.vertices[None], axis=2)
        stat_map = permutation_map(mags[y == 0], mags[y == 1],
                                   n_perm=config.n_perm, seed=seed,
                                   alpha=config.alpha)
        save_mesh(template.with_scalar(stat_map.p_adj),
                  staged / "significance.ply", with_scalar=True)
        modes = dysplastic_mode_pca(lambda z: model_mod.reconstruct(state, z),
                                    state.latent_means, y, template)
        save_mesh(modes.plus, staged / "mode1_plus.ply", with_scalar=True)
        save_mesh(modes.minus, staged / "mode1_minus.ply", with_scalar=True)
    logger.info("visualisations written under %s",
                Path(out_dir) / "viz")
