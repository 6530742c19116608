"""Evaluation statistics and shape-difference visualisation.

Scores are probabilities of the positive class (label 1); every
resampling routine derives one RNG stream per replicate from (seed,
replicate index), so results do not depend on execution order or thread
count.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyInputError, ValidationError
from .meshes import TriMesh

_BOOT_REDRAW_CAP = 10


def rank_auc(scores, labels):
    """AUC as the Mann-Whitney rank statistic with tie correction."""
    scores = np.asarray(scores, dtype=float)
    pos = np.asarray(labels) == 1
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr) points from (0,0) to (1,1), one per distinct score
    threshold (ties grouped), thresholds descending."""
    scores = np.asarray(scores, dtype=float)
    pos = (np.asarray(labels) == 1).astype(float)
    n_pos = pos.sum()
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = pos[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1.0 - y)[last_of_group]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return np.column_stack([fpr, tpr])


def trapezoid_auc(points):
    """Area under a (fpr, tpr) polyline; independent check on rank_auc."""
    points = np.asarray(points, dtype=float)
    return float(np.trapezoid(points[:, 1], points[:, 0]))


def confusion_metrics(scores, labels, threshold=0.5):
    """Accuracy, sensitivity (recall of class 1), specificity at the
    given threshold (predicted positive when score >= threshold)."""
    scores = np.asarray(scores, dtype=float)
    pos = np.asarray(labels) == 1
    pred = scores >= threshold
    tp = float((pred & pos).sum())
    tn = float((~pred & ~pos).sum())
    n_pos = float(pos.sum())
    n_neg = float(pos.size - n_pos)
    return {
        "accuracy": (tp + tn) / pos.size,
        "sensitivity": tp / n_pos if n_pos else float("nan"),
        "specificity": tn / n_neg if n_neg else float("nan"),
    }


def loocv_scores(features, labels, fit_fn, predict_fn):
    """Held-out probability for every sample: refit on all-but-one, score
    the left-out row. Folds whose training part has a single class are
    skipped with a warning and scored NaN."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels)
    n = x.shape[0]
    if n < 3:
        raise ValidationError("leave-one-out needs at least three samples")
    out = np.empty(n)
    for i in range(n):
        mask = np.ones(n, dtype=bool)
        mask[i] = False
        if np.unique(y[mask]).size < 2:
            warnings.warn(f"fold {i} has a single training class; skipped")
            out[i] = np.nan
            continue
        model = fit_fn(x[mask], y[mask])
        out[i] = float(np.asarray(predict_fn(model, x[i:i + 1])).ravel()[0])
    return out


# ---------------------------------------------------------------------------
# resampling


def bootstrap_ci(scores, labels, metric=rank_auc, *, n_boot=2000, seed=0):
    """95% percentile bootstrap interval of metric(scores, labels) under
    row resampling. Degenerate resamples (metric raises or returns
    non-finite) are redrawn up to 10 times, then recorded NaN."""
    if n_boot < 100:
        raise ValidationError("need at least 100 bootstrap replicates")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n = scores.size
    vals = np.empty(n_boot)
    for r in range(n_boot):
        rng = np.random.default_rng([seed, r])
        v = np.nan
        for _ in range(_BOOT_REDRAW_CAP + 1):
            idx = rng.integers(0, n, n)
            try:
                v = metric(scores[idx], labels[idx])
            except ValidationError:
                v = np.nan
            if np.isfinite(v):
                break
        vals[r] = v
    lo, hi = np.nanpercentile(vals, [2.5, 97.5])
    return float(lo), float(hi)


def paired_bootstrap_diff(scores_a, scores_b, labels, metric=rank_auc, *,
                          n_boot=2000, seed=0):
    """Distribution of metric(a) - metric(b) under shared resampling of
    the rows; returns (differences, (lo, hi))."""
    if n_boot < 100:
        raise ValidationError("need at least 100 bootstrap replicates")
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    labels = np.asarray(labels)
    if a.shape != b.shape:
        raise ValidationError("paired score vectors must match in length")
    n = a.size
    diffs = np.empty(n_boot)
    for r in range(n_boot):
        rng = np.random.default_rng([seed, r])
        v = np.nan
        for _ in range(_BOOT_REDRAW_CAP + 1):
            idx = rng.integers(0, n, n)
            try:
                v = metric(a[idx], labels[idx]) - metric(b[idx], labels[idx])
            except ValidationError:
                v = np.nan
            if np.isfinite(v):
                break
        diffs[r] = v
    lo, hi = np.nanpercentile(diffs, [2.5, 97.5])
    return diffs, (float(lo), float(hi))


# ---------------------------------------------------------------------------
# vertex statistics


def bh_adjust(p_values):
    """Benjamini-Hochberg step-up adjusted p-values (monotone, capped at 1)."""
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError("p-values must be a non-empty vector")
    if ((p < 0) | (p > 1)).any():
        raise ValidationError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.clip(adj, 0.0, 1.0)
    return out


@dataclass(frozen=True)
class VertexStatMap:
    """Per-vertex group difference with permutation p-values."""

    stat: np.ndarray
    p_raw: np.ndarray
    p_adj: np.ndarray
    flags: np.ndarray
    alpha: float


def permutation_map(group_a, group_b, *, n_perm=999, seed=0, alpha=0.05):
    """Permutation test of |mean_a - mean_b| per vertex.

    group_a (n_a, V) and group_b (n_b, V) hold per-shape per-vertex
    values (displacement magnitudes). One label permutation per
    replicate is shared across all vertices; p-values use the add-one
    estimator and are BH-adjusted across vertices.
    """
    a = np.atleast_2d(np.asarray(group_a, dtype=float))
    b = np.atleast_2d(np.asarray(group_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValidationError("groups must share the vertex dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValidationError("each group needs at least two members")
    n_a = a.shape[0]
    pooled = np.vstack([a, b])
    n = pooled.shape[0]
    obs = np.abs(a.mean(axis=0) - b.mean(axis=0))
    # Canonical row order and smaller-group-first split: swapping the two
    # groups must reproduce the exact same replicate statistics.
    pooled = pooled[np.lexsort(pooled.T)]
    k = min(n_a, n - n_a)
    count = np.zeros(obs.size)
    for r in range(n_perm):
        rng = np.random.default_rng([seed, r])
        perm = rng.permutation(n)
        stat = np.abs(pooled[perm[:k]].mean(axis=0)
                      - pooled[perm[k:]].mean(axis=0))
        count += stat >= obs
    p_raw = (1.0 + count) / (1.0 + n_perm)
    p_adj = bh_adjust(p_raw)
    return VertexStatMap(stat=obs, p_raw=p_raw, p_adj=p_adj,
                         flags=p_adj <= alpha, alpha=alpha)


# ---------------------------------------------------------------------------
# shape summaries


def class_average(vertex_sets, labels):
    """Coordinate-wise mean vertex array per label value."""
    arr = np.asarray(vertex_sets, dtype=float)
    labels = np.asarray(labels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] != labels.size:
        raise ValidationError("vertex sets must be (N, V, 3) matching labels")
    if arr.shape[0] == 0:
        raise EmptyInputError("no vertex sets to average")
    return {lab: arr[labels == lab].mean(axis=0) for lab in np.unique(labels)}


@dataclass(frozen=True)
class ResidualModes:
    """Dominant control-to-dysplastic displacement directions.

    modes (C, V*3) are orthonormal; sds are root-mean-square mode
    coefficients over the residual set; plus/minus are the template
    displaced by +/- sd_factor * sds[0] along the first mode, carrying
    the per-vertex displacement magnitude as their scalar field.
    """

    modes: np.ndarray
    sds: np.ndarray
    residuals: np.ndarray
    plus: TriMesh
    minus: TriMesh


def dysplastic_mode_pca(reconstruct_fn, latent_means, labels, template_mesh,
                        *, n_modes=1, sd_factor=2.0):
    """Principal modes of the control-to-nearest-dysplastic residuals.

    For each control latent mean, the nearest dysplastic latent mean (by
    Euclidean distance) is found; the residual is the vertexwise
    difference of the two reconstructions. Modes come from the
    *uncentred* SVD of the stacked residuals, so a constant residual
    yields exactly one mode.
    """
    z = np.atleast_2d(np.asarray(latent_means, dtype=float))
    labels = np.asarray(labels)
    ctrl_idx = np.nonzero(labels == 0)[0]
    dys_idx = np.nonzero(labels == 1)[0]
    if ctrl_idx.size == 0 or dys_idx.size == 0:
        raise ValidationError("need both classes for the residual modes")
    rows = []
    for i in ctrl_idx:
        d2 = ((z[dys_idx] - z[i]) ** 2).sum(axis=1)
        j = dys_idx[int(np.argmin(d2))]
        rows.append((reconstruct_fn(z[j]).vertices
                     - reconstruct_fn(z[i]).vertices).ravel())
    residuals = np.stack(rows)
    u, s, vt = np.linalg.svd(residuals, full_matrices=False)
    keep = min(n_modes, int((s > 1e-12 * max(s[0], 1e-30)).sum()))
    if keep == 0:
        raise ValidationError("residuals are numerically zero")
    modes = vt[:keep].copy()
    for r in range(keep):
        if modes[r, np.argmax(np.abs(modes[r]))] < 0:
            modes[r] = -modes[r]
    sds = s[:keep] / np.sqrt(residuals.shape[0])

    disp = (sd_factor * sds[0]) * modes[0].reshape(-1, 3)
    mag = np.linalg.norm(disp, axis=1)
    plus = TriMesh(template_mesh.vertices + disp, template_mesh.faces, mag)
    minus = TriMesh(template_mesh.vertices - disp, template_mesh.faces, mag)
    return ResidualModes(modes=modes, sds=sds, residuals=residuals,
                         plus=plus, minus=minus)


# ---------------------------------------------------------------------------
# report artifacts


def make_report(scores, labels, *, n_boot=2000, seed=0):
    """Evaluation summary dict: point metrics, bootstrap CIs, ROC points."""
    roc = roc_curve(scores, labels)
    metrics = confusion_metrics(scores, labels)

    def _metric(key):
        return lambda s, l: confusion_metrics(s, l)[key]

    ci = {"auc": list(bootstrap_ci(scores, labels, rank_auc,
                                   n_boot=n_boot, seed=seed))}
    for key in ("accuracy", "sensitivity", "specificity"):
        ci[key] = list(bootstrap_ci(scores, labels, _metric(key),
                                    n_boot=n_boot, seed=seed))
    return {
        "auc": rank_auc(scores, labels),
        "accuracy": metrics["accuracy"],
        "sensitivity": metrics["sensitivity"],
        "specificity": metrics["specificity"],
        "ci": ci,
        "roc": [[float(f), float(t)] for f, t in roc],
    }


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_report(path, report):
    _atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_roc_svg(path, points, *, size=400, margin=45):
    """Standalone SVG of an ROC polyline with a chance diagonal."""
    points = np.asarray(points, dtype=float)
    span = size - 2 * margin

    def sx(v):
        return margin + v * span

    def sy(v):
        return size - margin - v * span

    poly = " ".join(f"{sx(f):.2f},{sy(t):.2f}" for f, t in points)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(1):.2f}" y2="{sy(0):.2f}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(0):.2f}" y2="{sy(1):.2f}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(1):.2f}" y2="{sy(1):.2f}" '
        'stroke="grey" stroke-width="1" stroke-dasharray="6,4"/>',
        f'<polyline points="{poly}" fill="none" stroke="crimson" stroke-width="2"/>',
        f'<text x="{sx(0.5):.2f}" y="{size - 10}" text-anchor="middle" '
        'font-size="14">false positive rate</text>',
        f'<text x="14" y="{sy(0.5):.2f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 14 {sy(0.5):.2f})">true positive rate</text>',
        "</svg>",
    ]
    _atomic_write_text(path, "\n".join(lines) + "\n")
