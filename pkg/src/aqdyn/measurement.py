"""Field-kit calibration: ordered-logistic measurement model.

A kit reading falls in one of nine ordered categories.  Against a laboratory
concentration ``y`` the categories follow a cumulative-logit model,

    Pr(w <= k | y) = logit^-1(c_k + slope * log y),   k = 1..8,

with eight ascending cutpoints; the ninth cumulative probability is 1.  The
slope is negative for a kit whose readings increase with concentration.

Fitting maximizes the likelihood (flat prior) by damped Newton iterations on
a monotone reparameterization of the cutpoints: the first cutpoint is free
and the seven gaps are optimized on the log scale, so ordering can never be
violated.  Laboratory values below the 5 ug/L detection limit are replaced by
2.5 ug/L (half the limit) before taking logs.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "KIT_LABELS",
    "DETECTION_LIMIT",
    "DETECTION_FLOOR",
    "ConvergenceError",
    "CalibrationPair",
    "CalibrationModel",
    "CalibrationFitReport",
    "kit_label_to_category",
    "floor_detection_limit",
    "fit_calibration",
    "calibration_fit_report",
    "kit_category_probabilities",
    "kit_category_probability_matrix",
    "kit_log_likelihood",
    "kit_loglik_and_grad",
    "default_synthetic_calibration",
    "save_calibration",
    "load_calibration",
]

KIT_LABELS = (0, 10, 25, 50, 100, 200, 300, 500, 1000)
N_CATEGORIES = 9
DETECTION_LIMIT = 5.0
DETECTION_FLOOR = 2.5


class ConvergenceError(RuntimeError):
    """Newton iterations exhausted their budget."""


def kit_label_to_category(label) -> int:
    """Map a kit concentration label (ug/L) to its ordinal category 1..9."""
    try:
        value = int(str(label).strip())
    except ValueError:
        value = None
    if value is None or value not in KIT_LABELS:
        raise ValueError(
            f"unknown kit label {label!r}; valid labels: {', '.join(map(str, KIT_LABELS))}"
        )
    return KIT_LABELS.index(value) + 1


def floor_detection_limit(values):
    """Replace lab values below the 5 ug/L detection limit with 2.5 ug/L."""
    values = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values < 0):
        raise ValueError("lab values must be finite and non-negative")
    return np.where(values < DETECTION_LIMIT, DETECTION_FLOOR, values)


@dataclass(frozen=True)
class CalibrationPair:
    """One co-located (lab concentration, kit category) observation."""

    lab_value: float
    kit_category: int

    def __post_init__(self):
        if not (np.isfinite(self.lab_value) and self.lab_value > 0):
            raise ValueError("lab_value must be positive after detection-limit flooring")
        if not 1 <= int(self.kit_category) <= N_CATEGORIES:
            raise ValueError("kit_category must be in 1..9")


@dataclass(frozen=True)
class CalibrationModel:
    """Fitted cumulative-logit parameters: eight cutpoints plus one slope."""

    cutpoints: np.ndarray
    slope: float

    def __post_init__(self):
        cut = np.asarray(self.cutpoints, dtype=float)
        if cut.shape != (N_CATEGORIES - 1,):
            raise ValueError("expected 8 cutpoints")
        if not np.all(np.diff(cut) > 0):
            raise ValueError("cutpoints must be strictly ascending")
        object.__setattr__(self, "cutpoints", cut)
        object.__setattr__(self, "slope", float(self.slope))


def default_synthetic_calibration() -> CalibrationModel:
    """Plausible kit: slope -3, cutpoints crossing 0.5 between label midpoints."""
    boundaries = np.array([5.0, 17.5, 37.5, 75.0, 150.0, 250.0, 400.0, 750.0])
    return CalibrationModel(cutpoints=3.0 * np.log(boundaries), slope=-3.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _category_loglik(cutpoints, slope, categories, log_y):
    """Per-observation log Pr(w | log y) and its derivative in log y.

    Stable for extreme linear predictors: middle categories use
    ``log(sigma(a_lo)) + log(sigma(-a_up)) + log(expm1(a_up - a_lo))`` and
    the derivative collapses to ``slope * (1 - F_up - F_lo)``.
    """
    categories = np.asarray(categories)
    log_y = np.asarray(log_y, dtype=float)
    c_ext = np.concatenate([[-np.inf], cutpoints, [np.inf]])
    a_up = c_ext[categories] + slope * log_y  # c_w, +inf when w = 9
    a_lo = c_ext[categories - 1] + slope * log_y  # c_{w-1}, -inf when w = 1
    first = categories == 1
    last = categories == N_CATEGORIES
    middle = ~(first | last)

    ll = np.empty_like(log_y)
    ll[first] = -_softplus(-a_up[first])
    ll[last] = -_softplus(a_lo[last])
    if np.any(middle):
        gap = a_up[middle] - a_lo[middle]
        ll[middle] = (
            -_softplus(-a_lo[middle])
            - _softplus(a_up[middle])
            + np.log(np.expm1(gap))
        )
    f_up = np.where(last, 1.0, expit(np.where(last, 0.0, a_up)))
    f_lo = np.where(first, 0.0, expit(np.where(first, 0.0, a_lo)))
    grad = slope * (1.0 - f_up - f_lo)
    return ll, grad


def kit_category_probabilities(model: CalibrationModel, log_y: float) -> np.ndarray:
    """Probabilities of the nine categories at one log concentration."""
    cdf = np.concatenate(
        [[0.0], expit(model.cutpoints + model.slope * float(log_y)), [1.0]]
    )
    return np.diff(cdf)


def kit_category_probability_matrix(model: CalibrationModel, log_y) -> np.ndarray:
    """Category probabilities row-wise for an array of log concentrations."""
    log_y = np.asarray(log_y, dtype=float).ravel()
    cdf = expit(model.cutpoints[None, :] + model.slope * log_y[:, None])
    full = np.concatenate(
        [np.zeros((log_y.size, 1)), cdf, np.ones((log_y.size, 1))], axis=1
    )
    return np.clip(np.diff(full, axis=1), 0.0, 1.0)


def kit_log_likelihood(model: CalibrationModel, kit_category: int, log_y: float) -> float:
    """Log probability of one observed category at one log concentration."""
    if not 1 <= int(kit_category) <= N_CATEGORIES:
        raise ValueError("kit_category must be in 1..9")
    ll, _ = _category_loglik(
        model.cutpoints, model.slope, np.array([int(kit_category)]), np.array([float(log_y)])
    )
    return float(ll[0])


def kit_loglik_and_grad(model: CalibrationModel, categories, log_y):
    """Vectorized log likelihood terms and analytic d/d(log y) per observation."""
    categories = np.asarray(categories, dtype=int)
    if np.any(categories < 1) or np.any(categories > N_CATEGORIES):
        raise ValueError("categories must be in 1..9")
    return _category_loglik(model.cutpoints, model.slope, categories, np.asarray(log_y, float))


# ---------------------------------------------------------------------------
# Fitting


def _nll_grad_hess_cbeta(c, beta, z, w):
    """Negative log likelihood with gradient and Hessian in (cutpoints, slope)."""
    c_ext = np.concatenate([[-np.inf], c, [np.inf]])
    a_up = c_ext[w] + beta * z
    a_lo = c_ext[w - 1] + beta * z
    ll, _ = _category_loglik(c, beta, w, z)
    f = -float(np.sum(ll))
    if not np.isfinite(f):
        return f, None, None

    p = np.maximum(np.exp(ll), 1e-300)
    A = np.where(w == N_CATEGORIES, 1.0, expit(np.where(w == N_CATEGORIES, 0.0, a_up)))
    B = np.where(w == 1, 0.0, expit(np.where(w == 1, 0.0, a_lo)))
    Ad = A * (1.0 - A)
    Bd = B * (1.0 - B)
    Add = Ad * (1.0 - 2.0 * A)
    Bdd = Bd * (1.0 - 2.0 * B)

    up_valid = w <= N_CATEGORIES - 1
    lo_valid = w >= 2
    iu = np.clip(w - 1, 0, 7)
    il = np.clip(w - 2, 0, 7)

    # Gradient of the log likelihood in (c, beta).
    g_c = np.zeros(8)
    np.add.at(g_c, iu[up_valid], (Ad / p)[up_valid])
    np.add.at(g_c, il[lo_valid], (-Bd / p)[lo_valid])
    g_beta = float(np.sum(z * (1.0 - A - B)))

    # Hessian of the log likelihood in (c, beta).
    H = np.zeros((9, 9))
    ratio_u = Ad / p
    ratio_l = Bd / p
    np.add.at(
        H, (iu[up_valid], iu[up_valid]), (Add / p - ratio_u**2)[up_valid]
    )
    np.add.at(
        H, (il[lo_valid], il[lo_valid]), (-Bdd / p - ratio_l**2)[lo_valid]
    )
    both = up_valid & lo_valid
    cross = (ratio_u * ratio_l)[both]
    np.add.at(H, (iu[both], il[both]), cross)
    np.add.at(H, (il[both], iu[both]), cross)
    diff_ratio = ratio_u - ratio_l
    H[8, 8] = float(np.sum(z * z * ((Add - Bdd) / p - diff_ratio**2)))
    h_cb = np.zeros(8)
    np.add.at(h_cb, iu[up_valid], (z * (Add / p - ratio_u * diff_ratio))[up_valid])
    np.add.at(h_cb, il[lo_valid], (z * (-Bdd / p + ratio_l * diff_ratio))[lo_valid])
    H[:8, 8] = h_cb
    H[8, :8] = h_cb

    g_full = -np.concatenate([g_c, [g_beta]])  # NLL gradient in (c, beta)
    H_full = -H
    return f, g_full, H_full


def _cut_jacobian(gaps):
    """Jacobian of (c_1..c_8, slope) in (c_1, log gaps, slope)."""
    J = np.zeros((9, 9))
    J[:8, 0] = 1.0
    for j in range(7):
        J[j + 1 : 8, j + 1] = gaps[j]
    J[8, 8] = 1.0
    return J


def _nll_grad_hess(phi, z, w):
    """Negative log likelihood with gradient and Hessian in the reparameterized
    coordinates (first cutpoint, log gaps, slope)."""
    u, v, beta = phi[0], phi[1:8], phi[8]
    gaps = np.exp(v)
    c = u + np.concatenate([[0.0], np.cumsum(gaps)])
    f, g_full, H_full = _nll_grad_hess_cbeta(c, beta, z, w)
    if g_full is None:
        return f, None, None
    J = _cut_jacobian(gaps)
    g_phi = J.T @ g_full
    H_phi = J.T @ H_full @ J
    for j in range(7):
        H_phi[j + 1, j + 1] += gaps[j] * np.sum(g_full[j + 1 : 8])
    return f, g_phi, H_phi


def _initial_phi(z, w):
    n = z.size
    counts = np.bincount(w, minlength=N_CATEGORIES + 1)[1:]
    cumfreq = np.cumsum(counts)[:-1] / n
    cumfreq = np.clip(cumfreq, 0.5 / n, 1.0 - 0.5 / n)
    c0 = np.log(cumfreq / (1.0 - cumfreq))
    c0 = np.maximum.accumulate(c0 + 1e-6 * np.arange(8))
    gaps = np.maximum(np.diff(c0), 1e-2)
    return np.concatenate([[c0[0]], np.log(gaps), [0.0]])


def fit_calibration(
    pairs, max_iter: int = 200, grad_tol: float = 1e-8
) -> CalibrationModel:
    """Maximum-likelihood ordered-logit fit of (cutpoints, slope).

    Damped Newton with backtracking on the monotone reparameterization;
    ``grad_tol`` is relative to the attained objective, since the absolute
    gradient floor reachable in double precision grows with the sample size.
    Raises :class:`ConvergenceError` with the achieved gradient norm if the
    iteration budget runs out.
    """
    pairs = list(pairs)
    if len(pairs) < 10:
        raise ValueError("need at least 10 calibration pairs")
    w = np.array([p.kit_category for p in pairs], dtype=int)
    if np.unique(w).size < 2:
        raise ValueError("calibration pairs cover a single kit category")
    z = np.log(floor_detection_limit([p.lab_value for p in pairs]))

    phi = _initial_phi(z, w)
    f, g, H = _nll_grad_hess(phi, z, w)
    for _ in range(max_iter):
        if np.linalg.norm(g) < grad_tol * max(1.0, abs(f)):
            break
        lam = 0.0
        step = None
        for _ in range(12):
            try:
                cand = np.linalg.solve(H + lam * np.eye(9), -g)
            except np.linalg.LinAlgError:
                cand = None
            if cand is not None and float(g @ cand) < 0:
                step = cand
                break
            lam = max(lam * 10.0, 1e-6)
        if step is None:
            step = -g
        t = 1.0
        slope_dot = float(g @ step)
        for _ in range(60):
            f_new, g_new, H_new = _nll_grad_hess(phi + t * step, z, w)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope_dot:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                f"line search stalled; gradient norm {np.linalg.norm(g):.3e}"
            )
        phi = phi + t * step
        f, g, H = f_new, g_new, H_new
    else:
        raise ConvergenceError(
            f"no convergence in {max_iter} iterations; gradient norm {np.linalg.norm(g):.3e}"
        )
    cut = phi[0] + np.concatenate([[0.0], np.cumsum(np.exp(phi[1:8]))])
    return CalibrationModel(cutpoints=cut, slope=float(phi[8]))


@dataclass(frozen=True)
class CalibrationFitReport:
    """Fit quality: log likelihood, expected confusion table, standard errors."""

    log_likelihood: float
    n_pairs: int
    confusion: np.ndarray  # rows: observed category, cols: expected predicted
    cutpoint_se: np.ndarray
    slope_se: float


def calibration_fit_report(model: CalibrationModel, pairs) -> CalibrationFitReport:
    pairs = list(pairs)
    w = np.array([p.kit_category for p in pairs], dtype=int)
    z = np.log(floor_detection_limit([p.lab_value for p in pairs]))
    ll, _ = _category_loglik(model.cutpoints, model.slope, w, z)

    confusion = np.zeros((N_CATEGORIES, N_CATEGORIES))
    cdf = expit(model.cutpoints[None, :] + model.slope * z[:, None])
    probs = np.diff(np.concatenate([np.zeros((z.size, 1)), cdf, np.ones((z.size, 1))], axis=1))
    for k in range(1, N_CATEGORIES + 1):
        sel = w == k
        if np.any(sel):
            confusion[k - 1] = probs[sel].sum(axis=0)

    # Observed information in the original (cutpoints, slope) coordinates.
    _, _, h_c = _nll_grad_hess_cbeta(model.cutpoints, model.slope, z, w)
    try:
        cov = np.linalg.inv(h_c)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(h_c)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return CalibrationFitReport(
        log_likelihood=float(np.sum(ll)),
        n_pairs=len(pairs),
        confusion=confusion,
        cutpoint_se=se[:8],
        slope_se=float(se[8]),
    )


# ---------------------------------------------------------------------------
# Serialization


def save_calibration(model: CalibrationModel, path) -> None:
    payload = {"cutpoints": [float(c) for c in model.cutpoints], "slope": float(model.slope)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_calibration(path) -> CalibrationModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    cut = np.asarray(payload["cutpoints"], dtype=float)
    slope = float(payload["slope"])
    if cut.shape != (8,) or not np.all(np.diff(cut) > 0):
        raise ValueError("calibration JSON must hold 8 ascending cutpoints")
    if slope >= 0:
        warnings.warn("calibration slope is non-negative; kit readings usually decrease in Pr(w<=k)")
    return CalibrationModel(cutpoints=cut, slope=slope)
