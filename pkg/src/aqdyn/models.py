"""The two hierarchical posteriors as differentiable log densities.

The resampled-panel model ties three lab visits per well to latent log
levels: a Gaussian-process prior anchors the 2000 baseline, a spline
autoregression moves it to 2014 (2015 shares the 2014 level), and a shared
observation scale links latents to measurements.

The blanket-survey model explains the 2000 lab survey with a bivariate
spline surface, carries each survey-2 well forward through an
autoregression whose coefficient mixes a constant with functions of the
local baseline and its Laplacian, and connects the 2012 latent to ordinal
kit readings through a fixed calibration model.

Every density returns an exact analytic gradient; positive scales are
exposed to the sampler on the log scale with the change-of-variables
Jacobian included.  Out-of-support points signal ``-inf``, never NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import gammaln

from .config import MIXING_VARIANTS, ModelSpec, PriorSpec
from .data_io import PANEL_D0, Dataset, mean_depth, shared_standardization, standardize
from .geo_basis import (
    BasisSystem,
    GpKernelParams,
    bspline_rows,
    build_basis_system,
    build_knot_grid,
    quantile_knots,
)
from .measurement import CalibrationModel, kit_loglik_and_grad

__all__ = [
    "ParameterLayout",
    "BlanketParams",
    "ResampledParams",
    "BlanketModel",
    "ResampledModel",
    "blanket_log_density",
    "resampled_log_density",
    "prior_log_density",
    "extract_theta1_delta",
    "parameter_count",
    "assemble_blanket",
    "assemble_resampled",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ParameterLayout:
    """Named contiguous blocks partitioning a flat parameter vector."""

    blocks: tuple

    def __post_init__(self):
        names = [name for name, _ in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names")
        if any(size < 1 for _, size in self.blocks):
            raise ValueError("block sizes must be positive")

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.blocks)

    def slices(self) -> dict:
        out = {}
        start = 0
        for name, size in self.blocks:
            out[name] = slice(start, start + size)
            start += size
        return out

    def columns(self) -> tuple:
        cols = []
        for name, size in self.blocks:
            if size == 1:
                cols.append(name)
            else:
                cols.extend(f"{name}[{i}]" for i in range(size))
        return tuple(cols)

    def pack(self, **values) -> np.ndarray:
        missing = {name for name, _ in self.blocks} - set(values)
        if missing:
            raise ValueError(f"missing blocks: {sorted(missing)}")
        vec = np.empty(self.dim)
        for name, sl in self.slices().items():
            block = np.atleast_1d(np.asarray(values[name], dtype=float))
            if block.size != sl.stop - sl.start:
                raise ValueError(f"block {name!r} has size {block.size}, "
                                 f"expected {sl.stop - sl.start}")
            vec[sl] = block
        return vec

    def unpack(self, vec) -> dict:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector has shape {vec.shape}, expected ({self.dim},)")
        return {name: vec[sl].copy() for name, sl in self.slices().items()}


def _normal_lp(x, loc, scale):
    z = (x - loc) / scale
    return -0.5 * z * z - math.log(scale) - 0.5 * _LOG_2PI


def _invgamma_lp(x, shape, rate):
    # density proportional to x^(-shape-1) exp(-rate/x)
    return shape * math.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(x) - rate / x


def parameter_count(n_basis: int, n_survey2: int, include_depth: bool = True) -> int:
    """Free parameters of the blanket model at a given basis and survey size."""
    count = (n_basis + 1) + 1 + 2 * n_survey2 + 4 + 1
    return count + 1 if include_depth else count


# ---------------------------------------------------------------------------
# Blanket-survey model


@dataclass(frozen=True)
class BlanketParams:
    """Natural-scale parameters; surface_coeffs[0] is the intercept."""

    surface_coeffs: np.ndarray
    beta_depth: float
    sigma_obs: float
    theta2: np.ndarray
    eta2: np.ndarray
    alpha_y: float
    alpha_theta: float
    alpha_delta: float
    beta_delta: float
    tau: float


def _mixing_terms(variant: str, theta1: np.ndarray, alpha_y: float, alpha_theta: float):
    """gamma(theta1) plus its partials in theta1, alpha_y, alpha_theta."""
    if variant == "exp_plus_linear":
        e = np.exp(theta1 / 2.0)
        return (
            alpha_y * e + alpha_theta * theta1,
            0.5 * alpha_y * e + alpha_theta,
            e,
            theta1,
        )
    if variant == "linear_in_exp":
        e = np.exp(theta1)
        return alpha_y * e, alpha_y * e, e, np.zeros_like(theta1)
    zero = np.zeros_like(theta1)
    return zero, zero, zero, zero


class BlanketModel:
    """Assembled blanket posterior over two surveys with a fixed calibration.

    ``basis1`` and ``basis2`` may be :class:`BasisSystem` instances or any
    objects exposing ``basis_matrix``/``laplacian_matrix``/``n_basis`` (dense
    arrays work; sparse is the default and what production uses).
    """

    def __init__(self, survey1: Dataset, survey2: Dataset, basis1, basis2,
                 calibration: CalibrationModel, variant: str = "exp_plus_linear",
                 priors: PriorSpec | None = None, include_depth: bool = True):
        if variant not in MIXING_VARIANTS:
            raise ValueError(f"variant must be one of {MIXING_VARIANTS}")
        if survey1.standardization != survey2.standardization:
            raise ValueError("surveys must share one standardization")
        if survey1.d0 != survey2.d0:
            raise ValueError("surveys must share one reference depth")
        self.variant = variant
        self.priors = priors or PriorSpec()
        self.include_depth = include_depth
        self.survey1 = survey1
        self.survey2 = survey2
        self.calibration = calibration

        self.log_y1 = survey1.log_lab_values
        if np.any(~np.isfinite(self.log_y1)):
            raise ValueError("survey1 must have a lab value at every well")
        self.w2 = survey2.kit_categories
        if np.any(self.w2 < 1):
            raise ValueError("survey2 must have a kit category at every well")

        n1, n2 = survey1.n, survey2.n
        L = basis1.n_basis
        if basis2.n_basis != L:
            raise ValueError(
                f"basis2 has {basis2.n_basis} columns, basis1 has {L}; "
                "both surveys must share one pruned basis"
            )
        self.B1 = basis1.basis_matrix
        self.B2 = basis2.basis_matrix
        self.DB2 = basis2.laplacian_matrix
        if self.B1.shape != (n1, L):
            raise ValueError(f"basis1 matrix has shape {self.B1.shape}, expected ({n1}, {L})")
        if self.B2.shape != (n2, L):
            raise ValueError(f"basis2 matrix has shape {self.B2.shape}, expected ({n2}, {L})")
        if self.DB2.shape != (n2, L):
            raise ValueError(
                f"basis2 Laplacian matrix has shape {self.DB2.shape}, expected ({n2}, {L})"
            )
        self.n1, self.n2, self.n_basis = n1, n2, L
        self.depth_shift1 = survey1.depths - survey1.d0
        self.depth_shift2 = survey2.depths - survey2.d0

        blocks = [("beta", L + 1)]
        if include_depth:
            blocks.append(("beta_depth", 1))
        blocks += [
            ("sigma_obs", 1), ("theta2", n2), ("eta2", n2),
            ("alpha_y", 1), ("alpha_theta", 1), ("alpha_delta", 1),
            ("beta_delta", 1), ("tau", 1),
        ]
        self.layout = ParameterLayout(tuple(blocks))
        self._sl = self.layout.slices()

    # -- structured <-> flat

    def pack(self, params: BlanketParams) -> np.ndarray:
        values = {
            "beta": params.surface_coeffs,
            "sigma_obs": params.sigma_obs,
            "theta2": params.theta2,
            "eta2": params.eta2,
            "alpha_y": params.alpha_y,
            "alpha_theta": params.alpha_theta,
            "alpha_delta": params.alpha_delta,
            "beta_delta": params.beta_delta,
            "tau": params.tau,
        }
        if self.include_depth:
            values["beta_depth"] = params.beta_depth
        elif params.beta_depth != 0.0:
            raise ValueError("model excludes the depth coefficient; beta_depth must be 0")
        return self.layout.pack(**values)

    def unpack(self, vec) -> BlanketParams:
        v = self.layout.unpack(vec)
        return BlanketParams(
            surface_coeffs=v["beta"],
            beta_depth=float(v["beta_depth"][0]) if self.include_depth else 0.0,
            sigma_obs=float(v["sigma_obs"][0]),
            theta2=v["theta2"],
            eta2=v["eta2"],
            alpha_y=float(v["alpha_y"][0]),
            alpha_theta=float(v["alpha_theta"][0]),
            alpha_delta=float(v["alpha_delta"][0]),
            beta_delta=float(v["beta_delta"][0]),
            tau=float(v["tau"][0]),
        )

    # -- density

    def value_and_grad(self, vec: np.ndarray):
        """Log density and gradient on the natural scale (flat layout order)."""
        sl = self._sl
        vec = np.asarray(vec, dtype=float)
        coeffs = vec[sl["beta"]]
        b0, bsurf = coeffs[0], coeffs[1:]
        bd = vec[sl["beta_depth"]][0] if self.include_depth else 0.0
        sigma = vec[sl["sigma_obs"]][0]
        theta2 = vec[sl["theta2"]]
        eta2 = vec[sl["eta2"]]
        ay = vec[sl["alpha_y"]][0]
        at = vec[sl["alpha_theta"]][0]
        ad = vec[sl["alpha_delta"]][0]
        bdel = vec[sl["beta_delta"]][0]
        tau = vec[sl["tau"]][0]
        if sigma <= 0 or tau <= 0:
            return -np.inf, None

        P = self.priors
        g = np.zeros(self.layout.dim)
        g_beta = g[sl["beta"]]
        inv_s2 = 1.0 / (sigma * sigma)
        inv_t2 = 1.0 / (tau * tau)

        # survey-1 lab likelihood
        r1 = self.log_y1 - (b0 + self.B1 @ bsurf + bd * self.depth_shift1)
        ss1 = float(r1 @ r1)
        value = -self.n1 * math.log(sigma) - 0.5 * self.n1 * _LOG_2PI - 0.5 * inv_s2 * ss1
        gr1 = r1 * inv_s2
        g_beta[0] += gr1.sum()
        g_beta[1:] += self.B1.T @ gr1
        g_bd = float(gr1 @ self.depth_shift1)
        g_sigma = -self.n1 / sigma + ss1 / sigma**3

        # latent baseline and curvature at survey-2 wells
        theta1 = b0 + self.B2 @ bsurf
        delta = self.DB2 @ bsurf
        gamma, dg_dth, dg_day, dg_dat = _mixing_terms(self.variant, theta1, ay, at)
        coef = bdel + gamma
        u2 = theta2 - (theta1 + ad + coef * delta)
        ss2 = float(u2 @ u2)
        value += -self.n2 * math.log(tau) - 0.5 * self.n2 * _LOG_2PI - 0.5 * inv_t2 * ss2
        g[sl["theta2"]] -= u2 * inv_t2
        gm = u2 * inv_t2  # dvalue / d(mean of theta2)
        gth1 = gm * (1.0 + dg_dth * delta)
        g_beta[0] += gth1.sum()
        g_beta[1:] += self.B2.T @ gth1 + self.DB2.T @ (gm * coef)
        g[sl["alpha_delta"]] += gm.sum()
        g[sl["beta_delta"]] += float(gm @ delta)
        g[sl["alpha_y"]] += float(gm @ (delta * dg_day))
        g[sl["alpha_theta"]] += float(gm @ (delta * dg_dat))
        g_tau = -self.n2 / tau + ss2 / tau**3

        # 2012 latent lab reading
        r2 = eta2 - (theta2 + bd * self.depth_shift2)
        ss3 = float(r2 @ r2)
        value += -self.n2 * math.log(sigma) - 0.5 * self.n2 * _LOG_2PI - 0.5 * inv_s2 * ss3
        g[sl["eta2"]] -= r2 * inv_s2
        g[sl["theta2"]] += r2 * inv_s2
        g_bd += float((r2 * inv_s2) @ self.depth_shift2)
        g_sigma += -self.n2 / sigma + ss3 / sigma**3

        # ordinal kit readings
        ll, dll = kit_loglik_and_grad(self.calibration, self.w2, eta2)
        value += float(ll.sum())
        g[sl["eta2"]] += dll

        # priors
        value += float(_normal_lp(b0, P.beta0_loc, P.beta0_scale))
        g_beta[0] -= (b0 - P.beta0_loc) / P.beta0_scale**2
        value += float(np.sum(_normal_lp(bsurf, 0.0, P.surface_scale)))
        g_beta[1:] -= bsurf / P.surface_scale**2
        value += float(_invgamma_lp(sigma, P.obs_shape, P.obs_rate))
        g_sigma += -(P.obs_shape + 1.0) / sigma + P.obs_rate / sigma**2
        value += float(_invgamma_lp(tau, P.obs_shape, P.obs_rate))
        g_tau += -(P.obs_shape + 1.0) / tau + P.obs_rate / tau**2
        for name, x, scale in (
            ("alpha_y", ay, P.alpha_y_scale),
            ("alpha_theta", at, P.alpha_theta_scale),
            ("alpha_delta", ad, P.alpha_delta_scale),
            ("beta_delta", bdel, P.beta_delta_scale),
        ):
            value += float(_normal_lp(x, 0.0, scale))
            g[sl[name]] -= x / scale**2
        # beta_depth carries a flat prior

        if self.include_depth:
            g[sl["beta_depth"]] = g_bd
        g[sl["sigma_obs"]] = g_sigma
        g[sl["tau"]] = g_tau
        if not (np.isfinite(value) and np.all(np.isfinite(g))):
            return -np.inf, None
        return float(value), g

    def log_density(self, params: BlanketParams, want_grad: bool = True):
        """Log density and, unless disabled, gradients keyed by field name."""
        value, g = self.value_and_grad(self.pack(params))
        if not want_grad or g is None:
            return value, None
        v = self.layout.unpack(g)
        grads = {
            "surface_coeffs": v["beta"],
            "beta_depth": float(v["beta_depth"][0]) if self.include_depth else 0.0,
            "sigma_obs": float(v["sigma_obs"][0]),
            "theta2": v["theta2"],
            "eta2": v["eta2"],
            "alpha_y": float(v["alpha_y"][0]),
            "alpha_theta": float(v["alpha_theta"][0]),
            "alpha_delta": float(v["alpha_delta"][0]),
            "beta_delta": float(v["beta_delta"][0]),
            "tau": float(v["tau"][0]),
        }
        return value, grads

    # -- sampler plumbing

    def positive_blocks(self) -> tuple:
        return ("sigma_obs", "tau")

    def unconstrained(self) -> "UnconstrainedPosterior":
        return UnconstrainedPosterior(self, self.layout, self.positive_blocks())

    def initial_vector(self) -> np.ndarray:
        """Data-informed natural-scale starting point."""
        from .measurement import KIT_LABELS

        level = np.log(np.array([2.5, *KIT_LABELS[1:]], dtype=float))
        eta0 = level[self.w2 - 1]
        values = {
            "beta": np.concatenate([[self.log_y1.mean()], np.zeros(self.n_basis)]),
            "sigma_obs": max(self.log_y1.std(), 0.2),
            "theta2": eta0.copy(),
            "eta2": eta0,
            "alpha_y": 0.0, "alpha_theta": 0.0, "alpha_delta": 0.0,
            "beta_delta": 0.0, "tau": 0.5,
        }
        if self.include_depth:
            values["beta_depth"] = 0.0
        return self.layout.pack(**values)


def blanket_log_density(params: BlanketParams, survey1: Dataset, survey2: Dataset,
                        basis1, basis2, calibration: CalibrationModel,
                        variant: str = "exp_plus_linear",
                        priors: PriorSpec | None = None,
                        include_depth: bool = True):
    """One-shot evaluation; assembles the model and returns (value, grads)."""
    model = BlanketModel(survey1, survey2, basis1, basis2, calibration,
                         variant=variant, priors=priors, include_depth=include_depth)
    return model.log_density(params)


def prior_log_density(params: BlanketParams, priors: PriorSpec | None = None) -> float:
    """Sum of the blanket prior terms (the depth slope is flat)."""
    P = priors or PriorSpec()
    if params.sigma_obs <= 0 or params.tau <= 0:
        return -np.inf
    coeffs = np.asarray(params.surface_coeffs, dtype=float)
    value = float(_normal_lp(coeffs[0], P.beta0_loc, P.beta0_scale))
    value += float(np.sum(_normal_lp(coeffs[1:], 0.0, P.surface_scale)))
    value += float(_invgamma_lp(params.sigma_obs, P.obs_shape, P.obs_rate))
    value += float(_invgamma_lp(params.tau, P.obs_shape, P.obs_rate))
    value += float(_normal_lp(params.alpha_y, 0.0, P.alpha_y_scale))
    value += float(_normal_lp(params.alpha_theta, 0.0, P.alpha_theta_scale))
    value += float(_normal_lp(params.alpha_delta, 0.0, P.alpha_delta_scale))
    value += float(_normal_lp(params.beta_delta, 0.0, P.beta_delta_scale))
    return value


def extract_theta1_delta(surface_coeffs, basis2) -> tuple[np.ndarray, np.ndarray]:
    """Baseline level and scaled Laplacian at the survey-2 wells."""
    coeffs = np.asarray(surface_coeffs, dtype=float)
    if coeffs.ndim != 1 or coeffs.size != basis2.n_basis + 1:
        raise ValueError(
            f"surface_coeffs has {coeffs.size} entries, expected {basis2.n_basis + 1} "
            "(intercept plus one per basis column)"
        )
    theta1 = coeffs[0] + basis2.basis_matrix @ coeffs[1:]
    delta = basis2.laplacian_matrix @ coeffs[1:]
    return np.asarray(theta1), np.asarray(delta)


# ---------------------------------------------------------------------------
# Resampled-panel model


@dataclass(frozen=True)
class ResampledParams:
    """Natural-scale panel parameters; 2015 shares the 2014 level."""

    theta_2000: np.ndarray
    theta_2014: np.ndarray
    spline_coeffs: np.ndarray  # linear coefficient first, then basis weights
    beta_depth: float
    mu: float
    sigma_s: float
    sigma_l: float
    gp: GpKernelParams


class ResampledModel:
    """Assembled panel posterior: 3 lab visits per well, shared locations."""

    def __init__(self, panel: Dataset, spline_knots, priors: PriorSpec | None = None,
                 include_depth: bool = True):
        self.priors = priors or PriorSpec()
        self.include_depth = include_depth
        self.panel = panel
        self.knots = np.asarray(spline_knots, dtype=float)

        epochs = ("panel_2000", "panel_2014", "panel_2015")
        by_well: dict[str, dict] = {}
        for r in panel.records:
            if r.epoch not in epochs:
                raise ValueError(f"record epoch {r.epoch!r} does not belong to the panel")
            if r.lab_value is None:
                raise ValueError(f"well {r.well_id!r} lacks a lab value")
            by_well.setdefault(r.well_id, {})[r.epoch] = r
        incomplete = [w for w, seen in by_well.items() if len(seen) != 3]
        if incomplete:
            raise ValueError(f"wells missing visits: {sorted(incomplete)[:5]}")
        ids = sorted(by_well)
        self.well_ids = tuple(ids)
        n = len(ids)
        self.n_wells = n
        self.log_y = np.array(
            [[math.log(by_well[w][e].lab_value) for e in epochs] for w in ids]
        )
        first = [by_well[w]["panel_2000"] for w in ids]
        raw = np.array([[r.east, r.north] for r in first])
        unit = panel.standardization.to_unit(raw[:, 0], raw[:, 1])
        self.locations = unit
        diff = unit[:, None, :] - unit[None, :, :]
        self.sq_dist = np.sum(diff * diff, axis=2)
        self.depth_shift = np.array([r.depth for r in first]) - panel.d0

        self.n_ar = self.knots.size + 1
        blocks = [
            ("theta_2000", n), ("theta_2014", n), ("spline_coeffs", 1 + self.n_ar),
        ]
        if include_depth:
            blocks.append(("beta_depth", 1))
        blocks += [("mu", 1), ("sigma_s", 1), ("sigma_l", 1), ("gp_alpha", 1), ("gp_rho", 1)]
        self.layout = ParameterLayout(tuple(blocks))
        self._sl = self.layout.slices()

    def pack(self, params: ResampledParams) -> np.ndarray:
        values = {
            "theta_2000": params.theta_2000,
            "theta_2014": params.theta_2014,
            "spline_coeffs": params.spline_coeffs,
            "mu": params.mu,
            "sigma_s": params.sigma_s,
            "sigma_l": params.sigma_l,
            "gp_alpha": params.gp.amplitude,
            "gp_rho": params.gp.length_scale,
        }
        if self.include_depth:
            values["beta_depth"] = params.beta_depth
        elif params.beta_depth != 0.0:
            raise ValueError("model excludes the depth coefficient; beta_depth must be 0")
        return self.layout.pack(**values)

    def unpack(self, vec) -> ResampledParams:
        v = self.layout.unpack(vec)
        return ResampledParams(
            theta_2000=v["theta_2000"],
            theta_2014=v["theta_2014"],
            spline_coeffs=v["spline_coeffs"],
            beta_depth=float(v["beta_depth"][0]) if self.include_depth else 0.0,
            mu=float(v["mu"][0]),
            sigma_s=float(v["sigma_s"][0]),
            sigma_l=float(v["sigma_l"][0]),
            gp=GpKernelParams(float(v["gp_alpha"][0]), float(v["gp_rho"][0])),
        )

    def value_and_grad(self, vec: np.ndarray):
        sl = self._sl
        vec = np.asarray(vec, dtype=float)
        th0 = vec[sl["theta_2000"]]
        th14 = vec[sl["theta_2014"]]
        sc = vec[sl["spline_coeffs"]]
        c0, cb = sc[0], sc[1:]
        bd = vec[sl["beta_depth"]][0] if self.include_depth else 0.0
        mu = vec[sl["mu"]][0]
        ss = vec[sl["sigma_s"]][0]
        slong = vec[sl["sigma_l"]][0]
        alpha = vec[sl["gp_alpha"]][0]
        rho = vec[sl["gp_rho"]][0]
        if min(ss, slong, alpha, rho) <= 0:
            return -np.inf, None

        P = self.priors
        n = self.n_wells
        g = np.zeros(self.layout.dim)
        g_th0 = g[sl["theta_2000"]]
        g_th14 = g[sl["theta_2014"]]
        g_sc = g[sl["spline_coeffs"]]

        # lab measurements, three visits sharing one observation scale
        shift = bd * self.depth_shift
        r0 = self.log_y[:, 0] - th0 - shift
        r1 = self.log_y[:, 1] - th14 - shift
        r2 = self.log_y[:, 2] - th14 - shift
        ssr = float(r0 @ r0 + r1 @ r1 + r2 @ r2)
        inv_ss2 = 1.0 / (ss * ss)
        value = -3 * n * math.log(ss) - 1.5 * n * _LOG_2PI - 0.5 * inv_ss2 * ssr
        g_th0 += r0 * inv_ss2
        g_th14 += (r1 + r2) * inv_ss2
        g_bd = float(((r0 + r1 + r2) * inv_ss2) @ self.depth_shift)
        g_ss = -3 * n / ss + ssr / ss**3

        # spline autoregression from 2000 to 2014
        F0 = bspline_rows(self.knots, th0, 0, out_of_range="zero")
        F1 = bspline_rows(self.knots, th0, 1, out_of_range="zero")
        drift = c0 * th0 + F0 @ cb
        slope = c0 + F1 @ cb
        u = th14 - th0 - drift
        uu = float(u @ u)
        inv_sl2 = 1.0 / (slong * slong)
        value += -n * math.log(slong) - 0.5 * n * _LOG_2PI - 0.5 * inv_sl2 * uu
        gu = u * inv_sl2
        g_th14 -= gu
        g_th0 += gu * (1.0 + slope)
        g_sc[0] += float(gu @ th0)
        g_sc[1:] += F0.T @ gu
        g_slong = -n / slong + uu / slong**3

        # Gaussian-process prior on the 2000 baseline; extreme rho proposals
        # during warmup degenerate the kernel, so treat them as rejections
        with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
            E = np.exp(-self.sq_dist / (rho * rho))
            dM = E * (2.0 * self.sq_dist / rho**3)
        M = E + 1e-8 * np.eye(n)
        if not np.all(np.isfinite(M)):
            return -np.inf, None
        try:
            chol = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            return -np.inf, None
        z = th0 - mu
        w = cho_solve((chol, True), z)
        zw = float(z @ w)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        value += -0.5 * n * _LOG_2PI - 0.5 * n * math.log(alpha) - 0.5 * logdet \
            - 0.5 * zw / alpha
        g_th0 -= w / alpha
        g_mu = float(w.sum()) / alpha
        g_alpha = -0.5 * n / alpha + 0.5 * zw / alpha**2
        m_inv = cho_solve((chol, True), np.eye(n))
        g_rho = 0.5 * float(w @ (dM @ w)) / alpha - 0.5 * float(np.sum(m_inv * dM))

        # priors
        value += float(_normal_lp(mu, P.mu_loc, P.mu_scale))
        g_mu -= (mu - P.mu_loc) / P.mu_scale**2
        value += float(_normal_lp(c0, 0.0, P.ar_head_scale))
        g_sc[0] -= c0 / P.ar_head_scale**2
        value += float(_normal_lp(cb[0], 0.0, P.ar_head_scale))
        g_sc[1] -= cb[0] / P.ar_head_scale**2
        steps = np.diff(cb)
        value += float(np.sum(_normal_lp(steps, 0.0, P.ar_walk_scale)))
        walk = steps / P.ar_walk_scale**2
        g_sc[2:] -= walk
        g_sc[1:-1] += walk
        value += float(_invgamma_lp(ss, P.panel_shape, P.panel_rate))
        g_ss += -(P.panel_shape + 1.0) / ss + P.panel_rate / ss**2
        value += float(_invgamma_lp(slong, P.panel_shape, P.panel_rate))
        g_slong += -(P.panel_shape + 1.0) / slong + P.panel_rate / slong**2
        value += float(_invgamma_lp(alpha, P.gp_shape, P.gp_rate))
        g_alpha += -(P.gp_shape + 1.0) / alpha + P.gp_rate / alpha**2
        value += float(_invgamma_lp(rho, P.gp_shape, P.gp_rate))
        g_rho += -(P.gp_shape + 1.0) / rho + P.gp_rate / rho**2
        # beta_depth carries a flat prior

        if self.include_depth:
            g[sl["beta_depth"]] = g_bd
        g[sl["mu"]] = g_mu
        g[sl["sigma_s"]] = g_ss
        g[sl["sigma_l"]] = g_slong
        g[sl["gp_alpha"]] = g_alpha
        g[sl["gp_rho"]] = g_rho
        if not (np.isfinite(value) and np.all(np.isfinite(g))):
            return -np.inf, None
        return float(value), g

    def log_density(self, params: ResampledParams, want_grad: bool = True):
        """Log density and, unless disabled, gradients keyed by field name."""
        value, g = self.value_and_grad(self.pack(params))
        if not want_grad or g is None:
            return value, None
        v = self.layout.unpack(g)
        grads = {
            "theta_2000": v["theta_2000"],
            "theta_2014": v["theta_2014"],
            "spline_coeffs": v["spline_coeffs"],
            "beta_depth": float(v["beta_depth"][0]) if self.include_depth else 0.0,
            "mu": float(v["mu"][0]),
            "sigma_s": float(v["sigma_s"][0]),
            "sigma_l": float(v["sigma_l"][0]),
            "gp_amplitude": float(v["gp_alpha"][0]),
            "gp_length_scale": float(v["gp_rho"][0]),
        }
        return value, grads

    def positive_blocks(self) -> tuple:
        return ("sigma_s", "sigma_l", "gp_alpha", "gp_rho")

    def unconstrained(self) -> "UnconstrainedPosterior":
        return UnconstrainedPosterior(self, self.layout, self.positive_blocks())

    def initial_vector(self) -> np.ndarray:
        values = {
            "theta_2000": self.log_y[:, 0],
            "theta_2014": self.log_y[:, 1:].mean(axis=1),
            "spline_coeffs": np.zeros(1 + self.n_ar),
            "mu": self.log_y[:, 0].mean(),
            "sigma_s": 0.5, "sigma_l": 0.5,
            "gp_alpha": 1.0, "gp_rho": 0.5,
        }
        if self.include_depth:
            values["beta_depth"] = 0.0
        return self.layout.pack(**values)


def resampled_log_density(params: ResampledParams, panel: Dataset, spline_knots,
                          priors: PriorSpec | None = None, include_depth: bool = True):
    """One-shot evaluation of the panel posterior; returns (value, grads)."""
    model = ResampledModel(panel, spline_knots, priors=priors, include_depth=include_depth)
    return model.log_density(params)


# ---------------------------------------------------------------------------
# Unconstrained wrapper for the sampler


class UnconstrainedPosterior:
    """Maps positive blocks to the log scale and adds the Jacobian."""

    def __init__(self, model, layout: ParameterLayout, positive_blocks):
        self.model = model
        self._layout = layout
        self.layout = layout.slices()
        self.columns = layout.columns()
        self.dim = layout.dim
        self._positive = [self.layout[name] for name in positive_blocks]

    def to_unconstrained(self, natural: np.ndarray) -> np.ndarray:
        x = np.array(natural, dtype=float)
        for sl in self._positive:
            if np.any(x[sl] <= 0):
                raise ValueError("positive block is not positive")
            x[sl] = np.log(x[sl])
        return x

    def to_natural(self, x: np.ndarray) -> np.ndarray:
        natural = np.array(x, dtype=float)
        for sl in self._positive:
            natural[sl] = np.exp(natural[sl])
        return natural

    def value_and_grad(self, x: np.ndarray):
        # extreme proposals overflow the exp link or the density arithmetic;
        # both count as rejections, so evaluate quietly and check the result
        with np.errstate(all="ignore"):
            natural = self.to_natural(x)
            value, grad = self.model.value_and_grad(natural)
        if grad is None or not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        grad = np.array(grad)
        for sl in self._positive:
            value += float(np.sum(x[sl]))
            grad[sl] = grad[sl] * natural[sl] + 1.0
        return value, grad

    def natural_draws(self, draws):
        """Map sampled draws back to the natural scale, keeping metadata."""
        from .sampler import PosteriorDraws

        arr = draws.draws3.copy()
        for sl in self._positive:
            arr[:, :, sl] = np.exp(arr[:, :, sl])
        return PosteriorDraws(
            draws3=arr, columns=draws.columns, layout=self.layout,
            divergences=draws.divergences, seed=draws.seed,
            step_sizes=draws.step_sizes, accept_rates=draws.accept_rates,
        )


# ---------------------------------------------------------------------------
# Assembly from records


def assemble_blanket(survey1_records, survey2_records, spec: ModelSpec,
                     calibration: CalibrationModel) -> BlanketModel:
    """Standardize both surveys together, build the pruned basis, wire the model."""
    if spec.model != "blanket":
        raise ValueError("spec.model must be 'blanket'")
    transform = shared_standardization(
        survey1_records, survey2_records, bounds=spec.grid_bounds
    )
    d0 = spec.d0_override
    if d0 is None:
        d0 = mean_depth(survey1_records, survey2_records)
    ds1 = standardize(survey1_records, transform, d0)
    ds2 = standardize(survey2_records, transform, d0)
    locations = np.vstack([ds1.locations, ds2.locations])
    unit_bounds = None
    if spec.grid_bounds is not None:
        e0, e1, n0, n1 = spec.grid_bounds
        unit = transform.to_unit(np.array([e0, e1]), np.array([n0, n1]))
        unit_bounds = (unit[0, 0], unit[1, 0], unit[0, 1], unit[1, 1])
    grid = build_knot_grid(locations, spec.n_east_inner, bounds=unit_bounds)
    basis1 = build_basis_system(grid, ds1.locations, laplacian_scale=spec.laplacian_scale)
    basis2 = build_basis_system(grid, ds2.locations, laplacian_scale=spec.laplacian_scale)
    return BlanketModel(
        ds1, ds2, basis1, basis2, calibration,
        variant=spec.mixing_variant, priors=spec.priors,
        include_depth=spec.include_depth,
    )


def assemble_resampled(panel_records, spec: ModelSpec) -> ResampledModel:
    """Standardize the panel, anchor spline knots at observed-value deciles."""
    if spec.model != "resampled":
        raise ValueError("spec.model must be 'resampled'")
    transform = shared_standardization(panel_records, bounds=spec.grid_bounds)
    d0 = PANEL_D0 if spec.d0_override is None else spec.d0_override
    panel = standardize(panel_records, transform, d0)
    observed = np.log([r.lab_value for r in panel_records])
    knots = quantile_knots(observed, spec.ar_interior_knots, spec.ar_boundary_extension)
    return ResampledModel(panel, knots, priors=spec.priors,
                          include_depth=spec.include_depth)
