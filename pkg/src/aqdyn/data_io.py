"""Well records, coordinate standardization, CSV schemas, and simulators.

Records keep raw coordinates in meters; model code works on standardized
coordinates where both axes are divided by the east extent, so the east axis
spans [0, 1] and distances stay isotropic.  A shared :class:`Standardization`
lets two surveys (or a simulation and its refit) live on the same scale.

The simulators draw from the same generative story the models assume, with
the truth (surface coefficients, global parameters) and the noise (well
placement, measurement error, kit categories) on separate counter-based
streams: fixing the truth seed while varying the noise seed reproduces the
same latent surface under fresh data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import invgamma

from .config import ModelSpec
from .geo_basis import (
    GpKernelParams,
    KnotGrid,
    bspline_rows,
    build_basis_system,
    build_knot_grid,
    gp_covariance,
    quantile_knots,
)
from .measurement import (
    DETECTION_FLOOR,
    N_CATEGORIES,
    CalibrationModel,
    CalibrationPair,
    default_synthetic_calibration,
    kit_category_probability_matrix,
    kit_label_to_category,
    KIT_LABELS,
)

__all__ = [
    "EPOCHS",
    "PANEL_D0",
    "WellRecord",
    "Standardization",
    "Dataset",
    "LoadResult",
    "Region",
    "SyntheticTruth",
    "BlanketSimulation",
    "PanelSimulation",
    "load_survey1",
    "load_survey2",
    "load_panel",
    "load_calibration_pairs",
    "write_survey1",
    "write_survey2",
    "write_panel",
    "standardize",
    "shared_standardization",
    "mean_depth",
    "full_region_grid",
    "simulate_blanket",
    "simulate_panel",
]

EPOCHS = ("survey1_2000", "survey2_2012", "panel_2000", "panel_2014", "panel_2015")

# reference depth for the panel analysis, meters
PANEL_D0 = 15.29

SURVEY1_HEADER = ("well_id", "east_m", "north_m", "depth_m", "as_ugL")
SURVEY2_HEADER = ("well_id", "east_m", "north_m", "depth_m", "kit_level")
PANEL_HEADER = (
    "well_id", "east_m", "north_m", "depth_m",
    "as2000_ugL", "as2014_ugL", "as2015_ugL",
)
CALIBRATION_HEADER = ("lab_ugL", "kit_level")

# Philox stream tags: truth-level draws vs realization-level draws
_SURFACE_STREAM = 100
_WELLS_STREAM = 101
_NOISE_STREAM = 102


@dataclass(frozen=True)
class WellRecord:
    """One measurement at one well: either a lab value or a kit category."""

    well_id: str
    east: float
    north: float
    depth: float
    epoch: str
    lab_value: float | None = None
    kit_category: int | None = None

    def __post_init__(self):
        if not self.well_id:
            raise ValueError("well_id must be non-empty")
        if self.epoch not in EPOCHS:
            raise ValueError(f"epoch must be one of {EPOCHS}, got {self.epoch!r}")
        for name in ("east", "north", "depth"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if (self.lab_value is None) == (self.kit_category is None):
            raise ValueError("exactly one of lab_value and kit_category is required")
        if self.lab_value is not None:
            if not (math.isfinite(self.lab_value) and self.lab_value > 0):
                raise ValueError("lab_value must be positive and finite")
        if self.kit_category is not None:
            if not 1 <= self.kit_category <= N_CATEGORIES:
                raise ValueError(f"kit_category must be in 1..{N_CATEGORIES}")


@dataclass(frozen=True)
class Standardization:
    """Affine map to unitless coordinates: both axes divided by east extent."""

    east_offset: float
    north_offset: float
    east_extent: float

    def __post_init__(self):
        if not (math.isfinite(self.east_extent) and self.east_extent > 0):
            raise ValueError("east_extent must be positive and finite")

    @classmethod
    def from_bounds(cls, bounds) -> "Standardization":
        east_min, east_max, north_min, _ = map(float, bounds)
        if east_max <= east_min:
            raise ValueError("east bounds are degenerate")
        return cls(east_min, north_min, east_max - east_min)

    @classmethod
    def from_records(cls, records) -> "Standardization":
        east = np.array([r.east for r in records])
        north = np.array([r.north for r in records])
        if east.max() <= east.min():
            raise ValueError("records span no east extent")
        return cls(float(east.min()), float(north.min()), float(east.max() - east.min()))

    def to_unit(self, east, north) -> np.ndarray:
        east = np.asarray(east, dtype=float)
        north = np.asarray(north, dtype=float)
        return np.column_stack(
            [(east - self.east_offset) / self.east_extent,
             (north - self.north_offset) / self.east_extent]
        )

    def from_unit(self, locations) -> tuple[np.ndarray, np.ndarray]:
        locations = np.asarray(locations, dtype=float)
        return (
            locations[:, 0] * self.east_extent + self.east_offset,
            locations[:, 1] * self.east_extent + self.north_offset,
        )


@dataclass(frozen=True)
class Dataset:
    """Records plus the standardization and reference depth they share."""

    records: tuple
    standardization: Standardization
    d0: float
    notes: tuple = ()

    def __post_init__(self):
        if not self.records:
            raise ValueError("dataset has no records")
        if not math.isfinite(self.d0):
            raise ValueError("d0 must be finite")
        seen = set()
        for r in self.records:
            key = (r.well_id, r.epoch)
            if key in seen:
                raise ValueError(f"duplicate record for well {r.well_id!r} epoch {r.epoch!r}")
            seen.add(key)
        unit = self.locations
        if unit[:, 0].min() < -1e-9 or unit[:, 0].max() > 1.0 + 1e-9:
            raise ValueError("standardized eastings leave [0, 1]; wrong standardization?")
        if unit[:, 1].min() < -1e-9:
            raise ValueError("standardized northings are negative; wrong standardization?")

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def well_ids(self) -> tuple:
        return tuple(r.well_id for r in self.records)

    @property
    def locations_raw(self) -> np.ndarray:
        return np.array([[r.east, r.north] for r in self.records])

    @property
    def locations(self) -> np.ndarray:
        raw = self.locations_raw
        return self.standardization.to_unit(raw[:, 0], raw[:, 1])

    @property
    def depths(self) -> np.ndarray:
        return np.array([r.depth for r in self.records])

    @property
    def lab_values(self) -> np.ndarray:
        return np.array(
            [r.lab_value if r.lab_value is not None else np.nan for r in self.records]
        )

    @property
    def log_lab_values(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.log(self.lab_values)

    @property
    def kit_categories(self) -> np.ndarray:
        return np.array(
            [r.kit_category if r.kit_category is not None else 0 for r in self.records],
            dtype=int,
        )

    def take(self, indices) -> "Dataset":
        picked = tuple(self.records[i] for i in np.asarray(indices, dtype=int))
        return Dataset(picked, self.standardization, self.d0, self.notes)


def shared_standardization(*record_groups, bounds=None) -> Standardization:
    """One transform covering every group (or explicit raw-meter bounds)."""
    if bounds is not None:
        return Standardization.from_bounds(bounds)
    everything = [r for group in record_groups for r in group]
    if not everything:
        raise ValueError("no records to standardize")
    return Standardization.from_records(everything)


def mean_depth(*record_groups) -> float:
    depths = [r.depth for group in record_groups for r in group]
    if not depths:
        raise ValueError("no records")
    return float(np.mean(depths))


def standardize(records, transform: Standardization | None = None,
                d0_override: float | None = None, notes=()) -> Dataset:
    """Wrap records in a Dataset, deriving the transform and d0 if not given."""
    records = tuple(records)
    if transform is None:
        transform = Standardization.from_records(records)
    d0 = mean_depth(records) if d0_override is None else float(d0_override)
    return Dataset(records, transform, d0, tuple(notes))


# ---------------------------------------------------------------------------
# CSV input and output


@dataclass(frozen=True)
class LoadResult:
    """Loaded records plus human-readable notes (e.g. detection-limit floors)."""

    records: tuple
    notes: tuple

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _read_rows(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        if tuple(h.strip() for h in first) != header:
            raise ValueError(
                f"{path}: expected header {','.join(header)}, got {','.join(first)}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path} line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append((lineno, [cell.strip() for cell in row]))
    return rows


def _parse_float(path, lineno, name, text) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"{path} line {lineno}: {name} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"{path} line {lineno}: {name} must be finite, got {text!r}")
    return value


def _parse_lab(path, lineno, name, text, notes) -> float:
    value = _parse_float(path, lineno, name, text)
    if value < 0:
        raise ValueError(f"{path} line {lineno}: negative concentration {value!r}")
    if value == 0.0:
        notes.append(
            f"line {lineno}: {name} of 0 floored to {DETECTION_FLOOR} ug/L"
        )
        return DETECTION_FLOOR
    return value


def _parse_kit(path, lineno, text) -> int:
    try:
        return kit_label_to_category(text)
    except ValueError:
        raise ValueError(
            f"{path} line {lineno}: kit_level must be one of {KIT_LABELS}, got {text!r}"
        ) from None


def _check_unique(path, lineno, well_id, seen):
    if well_id in seen:
        raise ValueError(f"{path} line {lineno}: duplicate well_id {well_id!r}")
    seen.add(well_id)


def load_survey1(path) -> LoadResult:
    """Lab-measured survey: well_id,east_m,north_m,depth_m,as_ugL."""
    notes: list[str] = []
    records = []
    seen: set[str] = set()
    for lineno, row in _read_rows(path, SURVEY1_HEADER):
        well_id, east, north, depth, lab = row
        _check_unique(path, lineno, well_id, seen)
        records.append(WellRecord(
            well_id=well_id,
            east=_parse_float(path, lineno, "east_m", east),
            north=_parse_float(path, lineno, "north_m", north),
            depth=_parse_float(path, lineno, "depth_m", depth),
            epoch="survey1_2000",
            lab_value=_parse_lab(path, lineno, "as_ugL", lab, notes),
        ))
    return LoadResult(tuple(records), tuple(notes))


def load_survey2(path) -> LoadResult:
    """Kit-measured survey: well_id,east_m,north_m,depth_m,kit_level."""
    records = []
    seen: set[str] = set()
    for lineno, row in _read_rows(path, SURVEY2_HEADER):
        well_id, east, north, depth, kit = row
        _check_unique(path, lineno, well_id, seen)
        records.append(WellRecord(
            well_id=well_id,
            east=_parse_float(path, lineno, "east_m", east),
            north=_parse_float(path, lineno, "north_m", north),
            depth=_parse_float(path, lineno, "depth_m", depth),
            epoch="survey2_2012",
            kit_category=_parse_kit(path, lineno, kit),
        ))
    return LoadResult(tuple(records), ())


def load_panel(path) -> LoadResult:
    """Wide panel file: one row per well, lab values for all three visits."""
    notes: list[str] = []
    records = []
    seen: set[str] = set()
    epochs = ("panel_2000", "panel_2014", "panel_2015")
    for lineno, row in _read_rows(path, PANEL_HEADER):
        well_id, east, north, depth = row[:4]
        _check_unique(path, lineno, well_id, seen)
        e = _parse_float(path, lineno, "east_m", east)
        n = _parse_float(path, lineno, "north_m", north)
        d = _parse_float(path, lineno, "depth_m", depth)
        for epoch, name, cell in zip(epochs, PANEL_HEADER[4:], row[4:]):
            records.append(WellRecord(
                well_id=well_id, east=e, north=n, depth=d, epoch=epoch,
                lab_value=_parse_lab(path, lineno, name, cell, notes),
            ))
    return LoadResult(tuple(records), tuple(notes))


def load_calibration_pairs(path) -> tuple[tuple, tuple]:
    """Co-located lab/kit pairs; returns (pairs, notes)."""
    notes: list[str] = []
    pairs = []
    for lineno, row in _read_rows(path, CALIBRATION_HEADER):
        lab, kit = row
        pairs.append(CalibrationPair(
            lab_value=_parse_lab(path, lineno, "lab_ugL", lab, notes),
            kit_category=_parse_kit(path, lineno, kit),
        ))
    return tuple(pairs), tuple(notes)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_survey1(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SURVEY1_HEADER)
        for r in records:
            if r.lab_value is None:
                raise ValueError(f"well {r.well_id!r} has no lab value")
            writer.writerow([r.well_id, _fmt(r.east), _fmt(r.north), _fmt(r.depth),
                             _fmt(r.lab_value)])


def write_survey2(records, path) -> None:
    labels = dict(zip(range(1, N_CATEGORIES + 1), KIT_LABELS))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SURVEY2_HEADER)
        for r in records:
            if r.kit_category is None:
                raise ValueError(f"well {r.well_id!r} has no kit category")
            writer.writerow([r.well_id, _fmt(r.east), _fmt(r.north), _fmt(r.depth),
                             labels[r.kit_category]])


def write_panel(records, path) -> None:
    """Regroup per-epoch records into the wide panel layout."""
    epochs = ("panel_2000", "panel_2014", "panel_2015")
    by_well: dict[str, dict] = {}
    order = []
    for r in records:
        if r.epoch not in epochs:
            raise ValueError(f"record epoch {r.epoch!r} does not belong to the panel")
        if r.lab_value is None:
            raise ValueError(f"well {r.well_id!r} has no lab value")
        if r.well_id not in by_well:
            by_well[r.well_id] = {"east": r.east, "north": r.north, "depth": r.depth}
            order.append(r.well_id)
        by_well[r.well_id][r.epoch] = r.lab_value
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PANEL_HEADER)
        for well_id in order:
            info = by_well[well_id]
            missing = [e for e in epochs if e not in info]
            if missing:
                raise ValueError(f"well {well_id!r} is missing epochs {missing}")
            writer.writerow([
                well_id, _fmt(info["east"]), _fmt(info["north"]), _fmt(info["depth"]),
                *(_fmt(info[e]) for e in epochs),
            ])


# ---------------------------------------------------------------------------
# Study region and synthetic data


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in raw meters, minus rectangular holes."""

    east_min: float
    east_max: float
    north_min: float
    north_max: float
    holes: tuple = ()

    def __post_init__(self):
        if not (self.east_max > self.east_min and self.north_max > self.north_min):
            raise ValueError("region rectangle is degenerate")
        for hole in self.holes:
            e0, e1, n0, n1 = hole
            if not (e1 > e0 and n1 > n0):
                raise ValueError(f"hole rectangle {hole} is degenerate")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.east_min, self.east_max, self.north_min, self.north_max)

    def contains(self, east, north) -> np.ndarray:
        east = np.asarray(east, dtype=float)
        north = np.asarray(north, dtype=float)
        inside = (
            (east >= self.east_min) & (east <= self.east_max)
            & (north >= self.north_min) & (north <= self.north_max)
        )
        for e0, e1, n0, n1 in self.holes:
            inside &= ~((east > e0) & (east < e1) & (north > n0) & (north < n1))
        return inside

    def sample_locations(self, n: int, rng, min_separation: float = 0.0) -> np.ndarray:
        """Uniform draws over the region, optionally spaced apart; rejection
        sampling with a hard attempt budget so impossible requests fail fast."""
        budget = max(10_000, 1_000 * n)
        points: list[tuple[float, float]] = []
        attempts = 0
        min_sq = min_separation**2
        while len(points) < n:
            if attempts >= budget:
                raise ValueError(
                    f"placed only {len(points)} of {n} wells in {budget} attempts; "
                    "region too small for the requested separation"
                )
            attempts += 1
            east = rng.uniform(self.east_min, self.east_max)
            north = rng.uniform(self.north_min, self.north_max)
            if not bool(self.contains(east, north)):
                continue
            if min_sq > 0 and any(
                (east - pe) ** 2 + (north - pn) ** 2 < min_sq for pe, pn in points
            ):
                continue
            points.append((east, north))
        return np.array(points)


@dataclass(frozen=True)
class SyntheticTruth:
    """Latent quantities behind a simulated dataset, for later comparison."""

    kind: str
    seed: int
    scalars: dict
    vectors: dict

    def save(self, path) -> None:
        payload = {
            "kind": self.kind,
            "seed": self.seed,
            "scalars": {k: float(v) for k, v in self.scalars.items()},
            "vectors": {k: [float(x) for x in v] for k, v in self.vectors.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SyntheticTruth":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            kind=payload["kind"],
            seed=int(payload["seed"]),
            scalars=dict(payload["scalars"]),
            vectors={k: np.asarray(v, dtype=float) for k, v in payload["vectors"].items()},
        )


def _stream(seed: int, tag: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return np.random.Generator(np.random.Philox(key=[seed, tag]))


def full_region_grid(spec: ModelSpec, region: Region) -> tuple[KnotGrid, Standardization]:
    """Knot grid spanning the whole region with every cell active.

    Simulation uses this so the latent surface does not depend on where the
    wells happen to fall; a fit pruned to the observed hull sees exactly the
    same surface at the wells because every discarded basis function is zero
    on occupied cells.
    """
    transform = Standardization.from_bounds(region.bounds)
    unit_bounds = (
        0.0, 1.0, 0.0, (region.north_max - region.north_min) / transform.east_extent
    )
    corners = np.array([
        [unit_bounds[0], unit_bounds[2]],
        [unit_bounds[1], unit_bounds[3]],
    ])
    grid = build_knot_grid(corners, spec.n_east_inner, bounds=unit_bounds)
    ne, nn = grid.n_cells
    all_cells = frozenset((i, j) for i in range(ne) for j in range(nn))
    return KnotGrid(grid.east_knots, grid.north_knots, all_cells), transform


@dataclass(frozen=True)
class BlanketSimulation:
    survey1: tuple
    survey2: tuple
    truth: SyntheticTruth
    region: Region
    standardization: Standardization
    calibration: CalibrationModel


def _draw_positive(rng, shape: float, rate: float) -> float:
    return float(invgamma.rvs(a=shape, scale=rate, random_state=rng))


def simulate_blanket(
    spec: ModelSpec,
    truth_seed: int,
    n1: int,
    n2: int,
    region: Region,
    *,
    noise_seed: int | None = None,
    calibration: CalibrationModel | None = None,
    depth_range: tuple[float, float] = (8.0, 30.0),
    min_separation: float = 0.0,
    truth_overrides: dict | None = None,
) -> BlanketSimulation:
    """Draw a two-survey dataset from the cross-sectional generative model.

    ``truth_seed`` fixes the latent surface and global parameters;
    ``noise_seed`` (default: same) fixes well placement, measurement noise,
    and kit categories.  ``truth_overrides`` pins named truth values after
    drawing, leaving every random stream untouched.
    """
    if spec.model != "blanket":
        raise ValueError("spec.model must be 'blanket'")
    if min(n1, n2) < 1:
        raise ValueError("both surveys need at least one well")
    noise_seed = truth_seed if noise_seed is None else noise_seed
    calibration = calibration or default_synthetic_calibration()
    priors = spec.priors

    grid, transform = full_region_grid(spec, region)
    probe = build_basis_system(grid, np.array([[0.5, grid.north_knots.mean()]]),
                               laplacian_scale=spec.laplacian_scale)
    n_basis = probe.n_basis

    surface = _stream(truth_seed, _SURFACE_STREAM)
    beta0 = float(surface.normal(priors.beta0_loc, priors.beta0_scale))
    beta_depth = float(surface.normal(0.05, 0.03)) if spec.include_depth else 0.0
    alpha_y = float(surface.normal(0.0, priors.alpha_y_scale))
    alpha_theta = float(surface.normal(0.0, priors.alpha_theta_scale))
    alpha_delta = float(surface.normal(0.0, priors.alpha_delta_scale))
    beta_delta = float(surface.normal(0.0, priors.beta_delta_scale))
    sigma_obs = _draw_positive(surface, priors.obs_shape, priors.obs_rate)
    tau = _draw_positive(surface, priors.obs_shape, priors.obs_rate)
    beta = surface.normal(0.0, priors.surface_scale, size=n_basis)

    pending = dict(truth_overrides or {})
    beta0 = float(pending.pop("beta0", beta0))
    beta_depth = float(pending.pop("beta_depth", beta_depth))
    alpha_y = float(pending.pop("alpha_y", alpha_y))
    alpha_theta = float(pending.pop("alpha_theta", alpha_theta))
    alpha_delta = float(pending.pop("alpha_delta", alpha_delta))
    beta_delta = float(pending.pop("beta_delta", beta_delta))
    sigma_obs = float(pending.pop("sigma_obs", sigma_obs))
    tau = float(pending.pop("tau", tau))
    beta = np.asarray(pending.pop("beta", beta), dtype=float)
    if pending:
        raise ValueError(f"unknown truth overrides: {sorted(pending)}")
    if beta.shape != (n_basis,):
        raise ValueError(f"beta override has shape {beta.shape}, expected ({n_basis},)")
    if min(sigma_obs, tau) <= 0:
        raise ValueError("noise scales must be positive")

    wells = _stream(noise_seed, _WELLS_STREAM)
    locations = region.sample_locations(n1 + n2, wells, min_separation)
    depths = wells.uniform(depth_range[0], depth_range[1], size=n1 + n2)
    d0 = float(np.mean(depths)) if spec.d0_override is None else float(spec.d0_override)

    unit = transform.to_unit(locations[:, 0], locations[:, 1])
    system1 = build_basis_system(grid, unit[:n1], laplacian_scale=spec.laplacian_scale)
    system2 = build_basis_system(grid, unit[n1:], laplacian_scale=spec.laplacian_scale)

    noise = _stream(noise_seed, _NOISE_STREAM)
    log_y1 = (
        beta0
        + system1.basis_matrix @ beta
        + beta_depth * (depths[:n1] - d0)
        + sigma_obs * noise.standard_normal(n1)
    )
    theta1 = beta0 + system2.basis_matrix @ beta
    delta = system2.laplacian_matrix @ beta
    if spec.mixing_variant == "exp_plus_linear":
        gamma = alpha_y * np.exp(theta1 / 2.0) + alpha_theta * theta1
    elif spec.mixing_variant == "linear_in_exp":
        gamma = alpha_y * np.exp(theta1)
    else:
        gamma = np.zeros_like(theta1)
    theta2 = theta1 + alpha_delta + (beta_delta + gamma) * delta \
        + tau * noise.standard_normal(n2)
    eta2 = theta2 + beta_depth * (depths[n1:] - d0) + sigma_obs * noise.standard_normal(n2)
    prob = kit_category_probability_matrix(calibration, eta2)
    cum = np.cumsum(prob, axis=1)
    u = noise.uniform(size=n2)
    w2 = 1 + np.minimum((u[:, None] > cum).sum(axis=1), N_CATEGORIES - 1)

    survey1 = tuple(
        WellRecord(
            well_id=f"s1_{i:04d}", east=locations[i, 0], north=locations[i, 1],
            depth=depths[i], epoch="survey1_2000", lab_value=float(np.exp(log_y1[i])),
        )
        for i in range(n1)
    )
    survey2 = tuple(
        WellRecord(
            well_id=f"s2_{j:04d}", east=locations[n1 + j, 0], north=locations[n1 + j, 1],
            depth=depths[n1 + j], epoch="survey2_2012", kit_category=int(w2[j]),
        )
        for j in range(n2)
    )
    truth = SyntheticTruth(
        kind="blanket",
        seed=truth_seed,
        scalars={
            "beta0": beta0, "beta_depth": beta_depth, "sigma_obs": sigma_obs,
            "tau": tau, "alpha_y": alpha_y, "alpha_theta": alpha_theta,
            "alpha_delta": alpha_delta, "beta_delta": beta_delta, "d0": d0,
            "laplacian_scale": spec.laplacian_scale,
            "n_east_inner": spec.n_east_inner,
        },
        vectors={
            "beta": beta, "theta1": theta1, "delta": delta,
            "theta2": theta2, "eta2": eta2, "log_y1": log_y1,
            "calibration_cutpoints": calibration.cutpoints,
            "calibration_slope": np.array([calibration.slope]),
            "region_bounds": np.array(region.bounds),
        },
    )
    return BlanketSimulation(survey1, survey2, truth, region, transform, calibration)


@dataclass(frozen=True)
class PanelSimulation:
    records: tuple
    truth: SyntheticTruth
    region: Region
    standardization: Standardization


def simulate_panel(
    spec: ModelSpec,
    truth_seed: int,
    n_wells: int,
    region: Region,
    *,
    noise_seed: int | None = None,
    depth_range: tuple[float, float] = (8.0, 30.0),
    min_separation: float = 0.0,
    truth_overrides: dict | None = None,
) -> PanelSimulation:
    """Draw a three-visit panel from the longitudinal generative model."""
    if spec.model != "resampled":
        raise ValueError("spec.model must be 'resampled'")
    if n_wells < spec.ar_interior_knots + 2:
        raise ValueError("too few wells to anchor the change-spline knots")
    noise_seed = truth_seed if noise_seed is None else noise_seed
    priors = spec.priors
    n_ar_basis = spec.ar_interior_knots + 3

    surface = _stream(truth_seed, _SURFACE_STREAM)
    mu = float(surface.normal(priors.mu_loc, priors.mu_scale))
    beta_depth = float(surface.normal(0.05, 0.03)) if spec.include_depth else 0.0
    gp_alpha = _draw_positive(surface, priors.gp_shape, priors.gp_rate)
    gp_rho = _draw_positive(surface, priors.gp_shape, priors.gp_rate)
    sigma_s = _draw_positive(surface, priors.panel_shape, priors.panel_rate)
    sigma_l = _draw_positive(surface, priors.panel_shape, priors.panel_rate)
    ar_beta = np.empty(1 + n_ar_basis)
    ar_beta[0] = surface.normal(0.0, priors.ar_head_scale)
    ar_beta[1] = surface.normal(0.0, priors.ar_head_scale)
    for l in range(2, 1 + n_ar_basis):
        ar_beta[l] = surface.normal(ar_beta[l - 1], priors.ar_walk_scale)

    pending = dict(truth_overrides or {})
    mu = float(pending.pop("mu", mu))
    beta_depth = float(pending.pop("beta_depth", beta_depth))
    gp_alpha = float(pending.pop("gp_alpha", gp_alpha))
    gp_rho = float(pending.pop("gp_rho", gp_rho))
    sigma_s = float(pending.pop("sigma_s", sigma_s))
    sigma_l = float(pending.pop("sigma_l", sigma_l))
    ar_beta = np.asarray(pending.pop("ar_beta", ar_beta), dtype=float)
    if pending:
        raise ValueError(f"unknown truth overrides: {sorted(pending)}")
    if ar_beta.shape != (1 + n_ar_basis,):
        raise ValueError(
            f"ar_beta override has shape {ar_beta.shape}, expected ({1 + n_ar_basis},)"
        )
    if min(gp_alpha, gp_rho, sigma_s, sigma_l) <= 0:
        raise ValueError("scale overrides must be positive")

    wells = _stream(noise_seed, _WELLS_STREAM)
    locations = region.sample_locations(n_wells, wells, min_separation)
    depths = wells.uniform(depth_range[0], depth_range[1], size=n_wells)
    d0 = PANEL_D0 if spec.d0_override is None else float(spec.d0_override)

    transform = Standardization.from_bounds(region.bounds)
    unit = transform.to_unit(locations[:, 0], locations[:, 1])
    kernel = gp_covariance(GpKernelParams(gp_alpha, gp_rho), unit)
    kernel[np.diag_indices_from(kernel)] += 1e-8 * gp_alpha
    chol = np.linalg.cholesky(kernel)

    noise = _stream(noise_seed, _NOISE_STREAM)
    theta_2000 = mu + chol @ noise.standard_normal(n_wells)
    depth_shift = beta_depth * (depths - d0)
    log_y2000 = theta_2000 + depth_shift + sigma_s * noise.standard_normal(n_wells)

    knots = quantile_knots(log_y2000, spec.ar_interior_knots, spec.ar_boundary_extension)
    basis = bspline_rows(knots, theta_2000, out_of_range="zero")
    drift = ar_beta[0] * theta_2000 + basis @ ar_beta[1:]
    theta_2014 = theta_2000 + drift + sigma_l * noise.standard_normal(n_wells)
    log_y2014 = theta_2014 + depth_shift + sigma_s * noise.standard_normal(n_wells)
    log_y2015 = theta_2014 + depth_shift + sigma_s * noise.standard_normal(n_wells)

    records = []
    for i in range(n_wells):
        for epoch, log_y in (
            ("panel_2000", log_y2000[i]),
            ("panel_2014", log_y2014[i]),
            ("panel_2015", log_y2015[i]),
        ):
            records.append(WellRecord(
                well_id=f"p_{i:04d}", east=locations[i, 0], north=locations[i, 1],
                depth=depths[i], epoch=epoch, lab_value=float(np.exp(log_y)),
            ))
    truth = SyntheticTruth(
        kind="panel",
        seed=truth_seed,
        scalars={
            "mu": mu, "beta_depth": beta_depth, "gp_alpha": gp_alpha,
            "gp_rho": gp_rho, "sigma_s": sigma_s, "sigma_l": sigma_l, "d0": d0,
        },
        vectors={
            "theta_2000": theta_2000, "theta_2014": theta_2014,
            "ar_beta": ar_beta, "ar_knots": knots,
            "region_bounds": np.array(region.bounds),
        },
    )
    return PanelSimulation(tuple(records), truth, region, transform)
