"""Binary dysplasia classifiers.

Two scorers produce probabilities for the evaluation harness: a Gaussian
process classifier with a logistic likelihood and Laplace approximation
over latent embeddings, and a plain logistic regression over the two
radiographic angles. The hard clinical angle rule is also exposed for
reference labelling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .errors import NumericalError, ValidationError

_NEWTON_MAX_ITERS = 100
_NEWTON_TOL = 1e-9


def _standardize_columns(x):
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (x - mean) / sd, mean, sd


def _rbf(a, b, variance, lengthscale):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return variance * np.exp(-d2 / (2.0 * lengthscale**2))


def _laplace_mode(k, y):
    """Newton iteration for the logistic-likelihood Laplace mode.

    Returns (f_hat, grad = t - pi, w_sqrt, chol of B = I + W^1/2 K W^1/2,
    log marginal likelihood).
    """
    n = y.size
    t = (y + 1.0) / 2.0
    f = np.zeros(n)
    psi_old = -np.inf
    for _ in range(_NEWTON_MAX_ITERS):
        pi = expit(f)
        w = np.clip(pi * (1.0 - pi), 1e-12, None)
        sw = np.sqrt(w)
        b_mat = np.eye(n) + sw[:, None] * k * sw[None, :]
        chol_b = np.linalg.cholesky(b_mat)
        b = w * f + (t - pi)
        inner = solve_triangular(chol_b, sw * (k @ b), lower=True)
        a = b - sw * solve_triangular(chol_b, inner, lower=True, trans="T")
        f = k @ a
        psi = -0.5 * float(a @ f) + float(log_expit(y * f).sum())
        if abs(psi - psi_old) < _NEWTON_TOL:
            pi = expit(f)
            sw = np.sqrt(np.clip(pi * (1.0 - pi), 1e-12, None))
            b_mat = np.eye(n) + sw[:, None] * k * sw[None, :]
            chol_b = np.linalg.cholesky(b_mat)
            log_marg = psi - float(np.log(np.diag(chol_b)).sum())
            return f, t - pi, sw, chol_b, log_marg
        psi_old = psi
    # objective gradient at the last iterate: (t - pi) - K^{-1} f with f = K a
    grad_norm = float(np.linalg.norm((t - expit(f)) - a))
    raise NumericalError(
        f"Laplace Newton iteration did not converge in {_NEWTON_MAX_ITERS} "
        f"steps (gradient norm {grad_norm:.3e})")


@dataclass(frozen=True)
class GpClassifier:
    """Laplace-approximated GP binary classifier (labels 0/1)."""

    x: np.ndarray  # standardized training inputs (n, d)
    feat_mean: np.ndarray
    feat_sd: np.ndarray
    y: np.ndarray  # labels in {-1, +1}
    variance: float
    lengthscale: float
    f_hat: np.ndarray
    grad: np.ndarray  # t - pi at the mode
    w_sqrt: np.ndarray
    chol_b: np.ndarray
    log_marginal: float


def _median_heuristic(x):
    n = x.shape[0]
    if n < 2:
        return 1.0
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2))
    vals = d[np.triu_indices(n, 1)]
    med = float(np.median(vals))
    return med if med > 1e-9 else 1.0


def fit_gp_classifier(features, labels, *, variance=1.0, lengthscale=None,
                      optimize=True):
    """Fit the latent-space classifier.

    Hyperparameters start from the given variance and the median
    pairwise distance (after per-column standardisation) and are tuned
    by bounded maximisation of the Laplace marginal likelihood.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels)
    if x.shape[0] != labels.size:
        raise ValidationError("features and labels disagree in length")
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValidationError("need exactly two classes to fit the classifier")
    y = np.where(labels == classes[-1], 1.0, -1.0)
    xs, mean, sd = _standardize_columns(x)
    ell0 = lengthscale if lengthscale is not None else _median_heuristic(xs)

    def nll(theta):
        k = _rbf(xs, xs, np.exp(theta[0]), np.exp(theta[1]))
        try:
            return -_laplace_mode(k, y)[4]
        except (np.linalg.LinAlgError, NumericalError):
            return 1e6

    theta = np.array([np.log(variance), np.log(ell0)])
    if optimize:
        bounds = [(np.log(1e-2), np.log(1e3)),
                  (np.log(0.1 * ell0), np.log(30.0 * ell0))]
        res = minimize(nll, theta, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 60})
        theta = res.x
    var_opt, ell_opt = float(np.exp(theta[0])), float(np.exp(theta[1]))
    k = _rbf(xs, xs, var_opt, ell_opt)
    f_hat, grad, w_sqrt, chol_b, log_marg = _laplace_mode(k, y)
    return GpClassifier(x=xs, feat_mean=mean, feat_sd=sd, y=y,
                        variance=var_opt, lengthscale=ell_opt, f_hat=f_hat,
                        grad=grad, w_sqrt=w_sqrt, chol_b=chol_b,
                        log_marginal=log_marg)


def predict_proba(clf, features):
    """Probability of the positive (larger-label) class for each row.

    Uses the probit approximation of the logistic-Gaussian integral, so
    the returned value is the averaged predictive probability.
    """
    q = np.atleast_2d(np.asarray(features, dtype=float))
    qs = (q - clf.feat_mean) / clf.feat_sd
    k_star = _rbf(clf.x, qs, clf.variance, clf.lengthscale)  # (n, m)
    mean = k_star.T @ clf.grad
    v = solve_triangular(clf.chol_b, clf.w_sqrt[:, None] * k_star, lower=True)
    var = np.clip(clf.variance - (v**2).sum(axis=0), 0.0, None)
    return expit(mean / np.sqrt(1.0 + np.pi * var / 8.0))


# ---------------------------------------------------------------------------
# radiographic angles


@dataclass(frozen=True)
class AngleRecord:
    """Lateral centre edge angle and acetabular index, in degrees."""

    lcea: float
    ai: float

    def __post_init__(self):
        if not (np.isfinite(self.lcea) and np.isfinite(self.ai)):
            raise ValidationError("angles must be finite")
        if not (-30.0 < self.lcea < 80.0 and -20.0 < self.ai < 60.0):
            warnings.warn(
                f"angles (lcea={self.lcea}, ai={self.ai}) outside the "
                "plausible clinical band", stacklevel=2)


def angle_rule(rec):
    """Threshold rule: dysplastic when LCEA < 20 or AI > 15, control when
    LCEA > 25 and AI <= 15, borderline otherwise."""
    if rec.lcea < 20.0 or rec.ai > 15.0:
        return "dysplastic"
    if rec.lcea > 25.0 and rec.ai <= 15.0:
        return "control"
    return "borderline"


@dataclass(frozen=True)
class AngleScore:
    """Logistic scorer over standardized (lcea, ai)."""

    coef: np.ndarray  # (2,)
    intercept: float
    feat_mean: np.ndarray
    feat_sd: np.ndarray
    regularized: bool

    def score(self, lcea, ai):
        q = (np.column_stack([np.atleast_1d(lcea), np.atleast_1d(ai)])
             - self.feat_mean) / self.feat_sd
        return expit(q @ self.coef + self.intercept)


def _irls(x, y, ridge):
    """Newton/IRLS for logistic regression; returns (beta, converged)."""
    n, d = x.shape
    beta = np.zeros(d)
    penalty = ridge * np.eye(d)
    penalty[-1, -1] = 0.0  # leave the intercept unpenalised
    for _ in range(100):
        p = expit(x @ beta)
        w = np.clip(p * (1.0 - p), 1e-10, None)
        hess = x.T @ (w[:, None] * x) + penalty
        grad = x.T @ (y - p) - penalty @ beta
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + step
        if np.abs(beta).max() > 30.0:
            return beta, False
        if np.abs(step).max() < 1e-10:
            return beta, True
    return beta, False


def fit_angle_score(records, labels):
    """Logistic regression of dysplastic status on (LCEA, AI).

    Perfect separation (diverging Newton) falls back to an
    L2-regularised fit with lambda = 1e-4 and marks the result
    ``regularized``.
    """
    recs = list(records)
    if not recs:
        raise ValidationError("no angle records")
    feats = np.array([[r.lcea, r.ai] for r in recs], dtype=float)
    y = np.asarray(labels, dtype=float)
    if np.unique(y).size != 2:
        raise ValidationError("need both classes to fit the angle scorer")
    xs, mean, sd = _standardize_columns(feats)
    design = np.column_stack([xs, np.ones(len(recs))])
    beta, ok = _irls(design, y, 0.0)
    regularized = False
    if not ok:
        beta, ok = _irls(design, y, 1e-4)
        regularized = True
        if not ok:
            raise NumericalError("angle logistic regression failed to converge "
                                 "even with ridge regularisation")
    return AngleScore(coef=beta[:2], intercept=float(beta[2]), feat_mean=mean,
                      feat_sd=sd, regularized=regularized)
