"""Posterior summary reports built from pooled sampler draws.

Turns draw matrices into the quantities the pipeline reports downstream:
per-well exceedance tables, mixing-coefficient curves, predictive change
bands, the overall-trend decomposition, change-spline curves with forward
exceedance, and posterior predictive checks against the resampled panel.

All functions expect draws in natural scale (scale parameters positive),
i.e. the output of ``UnconstrainedPosterior.natural_draws``.  Quantiles use
linear interpolation on sorted draws (numpy's default rule); "95%" and
"50%" intervals are the central (2.5, 97.5) and (25, 75) percent intervals.
Every stochastic step is seeded from the draws' own seed unless an explicit
seed is passed, so repeated calls agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .config import MIXING_VARIANTS
from .geo_basis import bspline_rows
from .models import _mixing_terms
from .sampler import PosteriorDraws

__all__ = [
    "EXCEEDANCE_THRESHOLDS",
    "SPLINE_THRESHOLDS",
    "CurveBands",
    "ExceedanceReport",
    "TrendReport",
    "PpcReport",
    "SplineChangeReport",
    "individual_predictions",
    "mixing_coefficient_curve",
    "predictive_change",
    "trend_report",
    "ppc_subsample",
    "laplacian_scale",
    "spline_change_curve",
]

# Safety thresholds in ug/L: WHO guideline, national standard, and its double
EXCEEDANCE_THRESHOLDS = (10.0, 50.0, 100.0)
SPLINE_THRESHOLDS = (10.0, 50.0)

# Philox stream tags; data_io uses 0/1 and the sampler keys on chains
_TREND_TAG = 11
_CHANGE_TAG = 12
_PPC_TAG = 13


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, tag]))


def _draw_stream(seed: int, tag: int, draw_index: int) -> np.random.Generator:
    # one counter position per posterior draw, so subsample i is reproducible
    # no matter how many draws precede it
    return np.random.Generator(
        np.random.Philox(counter=[0, 0, 0, draw_index], key=[seed, tag])
    )


def _block(draws: PosteriorDraws, name: str) -> np.ndarray:
    try:
        return draws.block(name)
    except KeyError as exc:
        raise ValueError(
            f"draws lack the {name!r} block; pass natural-scale draws from the "
            "matching model"
        ) from exc


def _scalar(draws: PosteriorDraws, name: str) -> np.ndarray:
    return _block(draws, name)[:, 0]


def _depth_slope(draws: PosteriorDraws, n_draws: int) -> np.ndarray:
    # models fitted without the depth term simply have no such block
    if draws.layout and "beta_depth" in draws.layout:
        return _scalar(draws, "beta_depth")
    return np.zeros(n_draws)


def _theta1_matrix(draws: PosteriorDraws, basis2) -> np.ndarray:
    """Baseline latent surface at the survey-2 wells, one row per draw."""
    beta = _block(draws, "beta")
    if beta.shape[1] != basis2.n_basis + 1:
        raise ValueError(
            f"beta block has {beta.shape[1]} entries but the basis implies "
            f"{basis2.n_basis + 1} (intercept plus one per column)"
        )
    return beta[:, :1] + (basis2.basis_matrix @ beta[:, 1:].T).T


def _grid_vector(grid, name: str) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or not np.all(np.isfinite(grid)):
        raise ValueError(f"{name} must be a nonempty finite vector")
    return grid


def _check_thresholds(thresholds) -> tuple:
    out = tuple(float(t) for t in thresholds)
    if not out or any(t <= 0 for t in out) or any(np.diff(out) <= 0):
        raise ValueError("thresholds must be positive and strictly increasing")
    return out


def _interval(samples: np.ndarray, lo: float, hi: float) -> tuple:
    return (float(np.quantile(samples, lo)), float(np.quantile(samples, hi)))


# ---------------------------------------------------------------------------
# Report containers


@dataclass(frozen=True)
class CurveBands:
    """Pointwise posterior bands of a curve evaluated on a grid."""

    grid: np.ndarray
    mean: np.ndarray
    lower95: np.ndarray
    lower50: np.ndarray
    upper50: np.ndarray
    upper95: np.ndarray

    def __post_init__(self):
        n = self.grid.size
        for name in ("mean", "lower95", "lower50", "upper50", "upper95"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per grid point")
        if np.any(self.lower95 > self.lower50) or np.any(self.lower50 > self.upper50) \
                or np.any(self.upper50 > self.upper95):
            raise ValueError("quantile bands must be nested")

    def to_csv(self, path) -> None:
        header = "grid,mean,lower95,lower50,upper50,upper95"
        table = np.column_stack(
            [self.grid, self.mean, self.lower95, self.lower50, self.upper50, self.upper95]
        )
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in table:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _bands(grid: np.ndarray, samples: np.ndarray) -> CurveBands:
    # samples: one row per draw, one column per grid point
    q = np.quantile(samples, [0.025, 0.25, 0.75, 0.975], axis=0)
    return CurveBands(
        grid=grid,
        mean=samples.mean(axis=0),
        lower95=q[0],
        lower50=q[1],
        upper50=q[2],
        upper95=q[3],
    )


@dataclass(frozen=True)
class ExceedanceReport:
    """Per-well posterior summaries of the second-survey concentration."""

    thresholds: tuple
    mean: np.ndarray
    q10: np.ndarray
    q90: np.ndarray
    prob_above: np.ndarray  # (n_wells, n_thresholds)
    mc_se: np.ndarray
    n_draws: int
    well_ids: tuple | None = None

    def __post_init__(self):
        n = self.mean.size
        if self.q10.shape != (n,) or self.q90.shape != (n,):
            raise ValueError("quantile arrays must have one entry per well")
        if self.prob_above.shape != (n, len(self.thresholds)):
            raise ValueError("prob_above must be wells x thresholds")
        if self.mc_se.shape != self.prob_above.shape:
            raise ValueError("mc_se must match prob_above")
        if self.well_ids is not None and len(self.well_ids) != n:
            raise ValueError("well_ids must have one entry per well")
        if np.any(self.prob_above < 0.0) or np.any(self.prob_above > 1.0):
            raise ValueError("exceedance probabilities must lie in [0, 1]")
        if np.any(self.q10 > self.q90):
            raise ValueError("q10 must not exceed q90")
        if np.any(np.diff(self.prob_above, axis=1) > 0.0):
            raise ValueError("exceedance must be non-increasing in the threshold")

    @property
    def n_wells(self) -> int:
        return self.mean.size

    def to_csv(self, path) -> None:
        cols = ["well_id", "mean", "q10", "q90"]
        cols += [f"p_gt_{t:g}" for t in self.thresholds]
        cols += [f"mc_se_{t:g}" for t in self.thresholds]
        ids = self.well_ids or tuple(str(i) for i in range(self.n_wells))
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(self.n_wells):
                row = [str(ids[i]), repr(float(self.mean[i])),
                       repr(float(self.q10[i])), repr(float(self.q90[i]))]
                row += [repr(float(v)) for v in self.prob_above[i]]
                row += [repr(float(v)) for v in self.mc_se[i]]
                fh.write(",".join(row) + "\n")


@dataclass(frozen=True)
class TrendReport:
    """Population-level change between the two surveys, several ways.

    ``multiplicative_change`` averages per-draw geometric-mean ratios;
    ``median_change`` is its median-across-wells analogue.  The linear-scale
    entries are in ug/L: posterior means of the average second-survey level,
    the average first-survey level carried to the second survey's wells, and
    their paired difference.  ``intercept_change`` is the share of the level
    tied to the intercept of the dynamic, and ``fraction_positive`` counts
    wells whose posterior-mean latent change is positive.
    """

    multiplicative_change: float
    multiplicative_ci: tuple
    median_change: float
    median_ci: tuple
    mean_before: float
    before_ci: tuple
    mean_after: float
    after_ci: tuple
    linear_change: float
    linear_change_ci: tuple
    intercept_change: float
    intercept_change_ci: tuple
    fraction_positive: float
    n_draws: int
    n_wells: int

    def __post_init__(self):
        pairs = [
            ("multiplicative_change", "multiplicative_ci"),
            ("median_change", "median_ci"),
            ("mean_before", "before_ci"),
            ("mean_after", "after_ci"),
            ("linear_change", "linear_change_ci"),
            ("intercept_change", "intercept_change_ci"),
        ]
        for point_name, ci_name in pairs:
            point, ci = getattr(self, point_name), getattr(self, ci_name)
            # tolerate last-bit drift when the posterior is (nearly) degenerate
            slack = 1e-9 * max(1.0, abs(ci[0]), abs(ci[1]))
            if not ci[0] - slack <= point <= ci[1] + slack:
                raise ValueError(f"{ci_name} {ci} does not contain {point_name} {point}")
        if not 0.0 <= self.fraction_positive <= 1.0:
            raise ValueError("fraction_positive must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "multiplicative_change": self.multiplicative_change,
            "multiplicative_ci": list(self.multiplicative_ci),
            "median_change": self.median_change,
            "median_ci": list(self.median_ci),
            "mean_before": self.mean_before,
            "before_ci": list(self.before_ci),
            "mean_after": self.mean_after,
            "after_ci": list(self.after_ci),
            "linear_change": self.linear_change,
            "linear_change_ci": list(self.linear_change_ci),
            "intercept_change": self.intercept_change,
            "intercept_change_ci": list(self.intercept_change_ci),
            "fraction_positive": self.fraction_positive,
            "n_draws": self.n_draws,
            "n_wells": self.n_wells,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class PpcReport:
    """Posterior predictive check of subsampled change statistics.

    ``p_values`` are upper-tail: the fraction of predictive replicates at or
    above the observed panel statistic, so both 0 and 1 signal misfit.
    """

    statistic_names: tuple
    observed: np.ndarray
    predictive: np.ndarray  # (n_draws, n_statistics)
    p_values: np.ndarray
    subsample_size: int

    def __post_init__(self):
        k = len(self.statistic_names)
        if self.observed.shape != (k,) or self.p_values.shape != (k,):
            raise ValueError("observed and p_values must have one entry per statistic")
        if self.predictive.ndim != 2 or self.predictive.shape[1] != k:
            raise ValueError("predictive must be draws x statistics")
        if np.any(self.p_values < 0.0) or np.any(self.p_values > 1.0):
            raise ValueError("p-values must lie in [0, 1]")

    @property
    def n_draws(self) -> int:
        return self.predictive.shape[0]

    def to_dict(self) -> dict:
        out = {"subsample_size": self.subsample_size, "n_draws": self.n_draws,
               "statistics": {}}
        for j, name in enumerate(self.statistic_names):
            out["statistics"][name] = {
                "observed": float(self.observed[j]),
                "predictive_mean": float(self.predictive[:, j].mean()),
                "predictive_sd": float(self.predictive[:, j].std(ddof=1)),
                "p_value": float(self.p_values[j]),
            }
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class SplineChangeReport:
    """Change-spline drift bands plus forward exceedance probabilities.

    ``exceedance[g, t]`` is the posterior probability that a well whose
    baseline latent equals ``curve.grid[g]`` produces a follow-up lab
    measurement above ``thresholds[t]``, integrating the dynamic noise, the
    measurement noise, and the posterior.
    """

    curve: CurveBands
    thresholds: tuple
    exceedance: np.ndarray
    n_draws: int

    def __post_init__(self):
        if self.exceedance.shape != (self.curve.grid.size, len(self.thresholds)):
            raise ValueError("exceedance must be grid points x thresholds")
        if np.any(self.exceedance < 0.0) or np.any(self.exceedance > 1.0):
            raise ValueError("exceedance probabilities must lie in [0, 1]")
        if np.any(np.diff(self.exceedance, axis=1) > 0.0):
            raise ValueError("exceedance must be non-increasing in the threshold")

    def to_csv(self, path) -> None:
        cols = ["grid", "mean", "lower95", "lower50", "upper50", "upper95"]
        cols += [f"p_gt_{t:g}" for t in self.thresholds]
        c = self.curve
        table = np.column_stack(
            [c.grid, c.mean, c.lower95, c.lower50, c.upper50, c.upper95, self.exceedance]
        )
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in table:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Blanket-model summaries


def individual_predictions(
    draws: PosteriorDraws, thresholds=EXCEEDANCE_THRESHOLDS, well_ids=None
) -> ExceedanceReport:
    """Per-well level and exceedance table from the measurement latents.

    Works on the exponentiated second-survey latents, so the summaries are
    concentrations in ug/L.  Exceedance probabilities are draw fractions,
    reported with their binomial Monte Carlo standard error.
    """
    thresholds = _check_thresholds(thresholds)
    level = np.exp(_block(draws, "eta2"))
    n_draws = level.shape[0]
    prob = np.stack([(level > t).mean(axis=0) for t in thresholds], axis=1)
    return ExceedanceReport(
        thresholds=thresholds,
        mean=level.mean(axis=0),
        q10=np.quantile(level, 0.10, axis=0),
        q90=np.quantile(level, 0.90, axis=0),
        prob_above=prob,
        mc_se=np.sqrt(prob * (1.0 - prob) / n_draws),
        n_draws=n_draws,
        well_ids=tuple(well_ids) if well_ids is not None else None,
    )


def mixing_coefficient_curve(draws: PosteriorDraws, variant: str, theta_grid) -> CurveBands:
    """Bands of the level-dependent curvature coefficient over a latent grid."""
    if variant not in MIXING_VARIANTS:
        raise ValueError(f"variant must be one of {MIXING_VARIANTS}")
    grid = _grid_vector(theta_grid, "theta_grid")
    beta_delta = _scalar(draws, "beta_delta")[:, None]
    alpha_y = _scalar(draws, "alpha_y")[:, None]
    alpha_theta = _scalar(draws, "alpha_theta")[:, None]
    gamma = _mixing_terms(variant, grid[None, :], alpha_y, alpha_theta)[0]
    return _bands(grid, beta_delta + gamma)


def predictive_change(
    draws: PosteriorDraws,
    theta1_fixed: float,
    delta_grid,
    include_noise: bool,
    variant: str = "exp_plus_linear",
    seed: int | None = None,
) -> CurveBands:
    """Bands of the multiplicative change over a curvature grid.

    With ``include_noise`` each draw also receives the two observation-noise
    terms inside the exponent, turning the latent change into a predicted
    measured change.  One noise pair is drawn per posterior draw and shared
    along the grid, which leaves every pointwise band exact.
    """
    if variant not in MIXING_VARIANTS:
        raise ValueError(f"variant must be one of {MIXING_VARIANTS}")
    grid = _grid_vector(delta_grid, "delta_grid")
    alpha_delta = _scalar(draws, "alpha_delta")
    beta_delta = _scalar(draws, "beta_delta")
    alpha_y = _scalar(draws, "alpha_y")
    alpha_theta = _scalar(draws, "alpha_theta")
    theta1 = np.full_like(alpha_y, float(theta1_fixed))
    coef = beta_delta + _mixing_terms(variant, theta1, alpha_y, alpha_theta)[0]
    log_change = alpha_delta[:, None] + np.outer(coef, grid)
    if include_noise:
        noise_sd = np.hypot(_scalar(draws, "sigma_obs"), _scalar(draws, "tau"))
        rng = _stream(draws.seed if seed is None else int(seed), _CHANGE_TAG)
        log_change = log_change + (noise_sd * rng.standard_normal(coef.size))[:, None]
    return _bands(grid, np.exp(log_change))


def trend_report(
    draws: PosteriorDraws, survey2, d0: float, basis2, seed: int | None = None
) -> TrendReport:
    """Overall-change decomposition across the second-survey wells.

    ``survey2`` supplies the well depths and ``basis2`` the spatial design at
    those wells, so the baseline latents can be rebuilt per draw.  The
    "before" level resimulates first-survey measurement noise at the
    second-survey wells; the "after" level uses the measurement latents
    directly, which already carry that noise.
    """
    theta2 = _block(draws, "theta2")
    eta2 = _block(draws, "eta2")
    theta1 = _theta1_matrix(draws, basis2)
    n_draws, n_wells = theta2.shape
    if survey2.n != n_wells:
        raise ValueError(
            f"draws cover {n_wells} wells but survey2 has {survey2.n} records"
        )
    sigma_obs = _scalar(draws, "sigma_obs")
    alpha_delta = _scalar(draws, "alpha_delta")
    depth_shift = _depth_slope(draws, n_draws)[:, None] * (survey2.depths - float(d0))

    log_change = theta2 - theta1
    mult = np.exp(log_change.mean(axis=1))
    med = np.exp(np.median(log_change, axis=1))

    rng = _stream(draws.seed if seed is None else int(seed), _TREND_TAG)
    noise = sigma_obs[:, None] * rng.standard_normal(theta2.shape)
    before = np.exp(theta1 + depth_shift + noise).mean(axis=1)
    after = np.exp(eta2).mean(axis=1)
    change = after - before
    intercept = (np.exp(eta2) * (1.0 - np.exp(alpha_delta))[:, None]).mean(axis=1)

    return TrendReport(
        multiplicative_change=float(mult.mean()),
        multiplicative_ci=_interval(mult, 0.025, 0.975),
        median_change=float(med.mean()),
        median_ci=_interval(med, 0.025, 0.975),
        mean_before=float(before.mean()),
        before_ci=_interval(before, 0.025, 0.975),
        mean_after=float(after.mean()),
        after_ci=_interval(after, 0.025, 0.975),
        linear_change=float(change.mean()),
        linear_change_ci=_interval(change, 0.025, 0.975),
        intercept_change=float(intercept.mean()),
        intercept_change_ci=_interval(intercept, 0.025, 0.975),
        fraction_positive=float((log_change.mean(axis=0) > 0.0).mean()),
        n_draws=n_draws,
        n_wells=n_wells,
    )


def _panel_change_observations(observed_panel) -> tuple[np.ndarray, np.ndarray]:
    """Per-well (baseline, follow-up) lab pairs from the resampled panel."""
    by_well: dict = {}
    for rec in observed_panel.records:
        by_well.setdefault(rec.well_id, {})[rec.epoch] = rec.lab_value
    first, second = [], []
    for well_id in sorted(by_well):
        visits = by_well[well_id]
        if "panel_2000" not in visits or "panel_2014" not in visits:
            raise ValueError(f"panel well {well_id!r} lacks a 2000 or 2014 visit")
        first.append(visits["panel_2000"])
        second.append(visits["panel_2014"])
    return np.asarray(first, dtype=float), np.asarray(second, dtype=float)


def ppc_subsample(
    draws: PosteriorDraws,
    subsample_size: int,
    observed_panel,
    survey2,
    basis2,
    seed: int | None = None,
) -> PpcReport:
    """Predictive check of change statistics against the resampled panel.

    Each posterior draw receives a fresh uniform subsample of second-survey
    wells and fresh first-survey measurement noise; the follow-up observable
    reuses the draw's measurement latents.  Statistics are the mean and
    sample standard deviation of the per-well log change and the mean
    linear-scale change, compared against the same statistics of the panel's
    2000 and 2014 lab visits.
    """
    theta1 = _theta1_matrix(draws, basis2)
    eta2 = _block(draws, "eta2")
    n_draws, n_wells = eta2.shape
    if survey2.n != n_wells:
        raise ValueError(
            f"draws cover {n_wells} wells but survey2 has {survey2.n} records"
        )
    size = int(subsample_size)
    if size < 2 or size > n_wells:
        raise ValueError(
            f"subsample_size must be between 2 and {n_wells}, got {size}"
        )
    sigma_obs = _scalar(draws, "sigma_obs")
    depth_shift = _depth_slope(draws, n_draws)[:, None] * (survey2.depths - survey2.d0)
    log_before_mean = theta1 + depth_shift

    base_seed = draws.seed if seed is None else int(seed)
    predictive = np.empty((n_draws, 3))
    for i in range(n_draws):
        rng = _draw_stream(base_seed, _PPC_TAG, i)
        idx = rng.choice(n_wells, size=size, replace=False)
        log_before = log_before_mean[i, idx] + sigma_obs[i] * rng.standard_normal(size)
        log_after = eta2[i, idx]
        log_change = log_after - log_before
        predictive[i] = (
            log_change.mean(),
            log_change.std(ddof=1),
            (np.exp(log_after) - np.exp(log_before)).mean(),
        )

    first, second = _panel_change_observations(observed_panel)
    obs_log = np.log(second) - np.log(first)
    observed = np.array([obs_log.mean(), obs_log.std(ddof=1), (second - first).mean()])
    p_values = (predictive >= observed[None, :]).mean(axis=0)
    return PpcReport(
        statistic_names=("mean_log_change", "sd_log_change", "mean_linear_change"),
        observed=observed,
        predictive=predictive,
        p_values=p_values,
        subsample_size=size,
    )


# ---------------------------------------------------------------------------
# Shared interpretation helpers and panel-model summaries


def laplacian_scale(h: float, east_extent: float, laplacian_scale_factor: float) -> float:
    """Multiplicative effect of one curvature unit at neighbor spacing ``h``."""
    if h < 0.0:
        raise ValueError("h must be nonnegative")
    if east_extent <= 0.0:
        raise ValueError("east_extent must be positive")
    return float(np.exp(laplacian_scale_factor * (h / east_extent) ** 2))


def spline_change_curve(
    draws: PosteriorDraws, theta_grid, knots, thresholds=SPLINE_THRESHOLDS
) -> SplineChangeReport:
    """Drift bands and forward exceedance for the panel change spline.

    The drift at a baseline latent combines the linear term with the spline
    term anchored at ``knots`` (the vector the model was fitted with).  The
    exceedance integrates, per draw, the Gaussian forward distribution of a
    follow-up lab measurement at the reference depth: baseline plus drift,
    with the dynamic and lab noise variances added.
    """
    grid = _grid_vector(theta_grid, "theta_grid")
    thresholds = _check_thresholds(thresholds)
    coeffs = _block(draws, "spline_coeffs")
    smooth = bspline_rows(knots, grid, 0, out_of_range="zero")
    if coeffs.shape[1] != smooth.shape[1] + 1:
        raise ValueError(
            f"spline_coeffs block has {coeffs.shape[1]} entries but the knot "
            f"vector implies {smooth.shape[1] + 1}"
        )
    drift = coeffs[:, :1] * grid[None, :] + coeffs[:, 1:] @ smooth.T

    follow_mean = grid[None, :] + drift
    follow_sd = np.hypot(_scalar(draws, "sigma_s"), _scalar(draws, "sigma_l"))[:, None]
    exceedance = np.stack(
        [norm.sf((np.log(t) - follow_mean) / follow_sd).mean(axis=0) for t in thresholds],
        axis=1,
    )
    return SplineChangeReport(
        curve=_bands(grid, drift),
        thresholds=thresholds,
        exceedance=exceedance,
        n_draws=coeffs.shape[0],
    )
