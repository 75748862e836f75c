"""Command line for the full pipeline.

Subcommands: ``simulate``, ``calibrate``, ``fit-blanket``, ``fit-resampled``,
``summarize``, ``ppc``, and ``config init``.  Every run writes its outputs to
a fresh directory holding exactly one ``manifest.json`` (config snapshot,
input digests, seed, version, stage timings); files are staged in a temporary
sibling directory and promoted atomically, so a crashed run leaves no partial
output behind.

Exit codes: 0 success, 1 any validation or runtime failure, 2 usage errors
(argparse), 3 completed fit whose convergence diagnostics warrant a warning.
The sampling seed resolves as ``--seed`` > ``AQ_SEED`` > config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    RunConfig,
    dump_default_config,
    load_config,
    parse_config,
    resolve_seed,
)
from .data_io import (
    Region,
    load_calibration_pairs,
    load_panel,
    load_survey1,
    load_survey2,
    simulate_blanket,
    simulate_panel,
    write_panel,
    write_survey1,
    write_survey2,
)
from .measurement import (
    ConvergenceError,
    calibration_fit_report,
    fit_calibration,
    load_calibration,
    save_calibration,
)
from .models import assemble_blanket, assemble_resampled
from .sampler import SamplingError, diagnostics, draws_from_csv, draws_to_csv, sample
from .summaries import (
    individual_predictions,
    mixing_coefficient_curve,
    ppc_subsample,
    predictive_change,
    spline_change_curve,
    trend_report,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_RHAT_WARN = 3

# convergence warning policy: R-hat above this on more than 1% of parameters
RHAT_WARN_LEVEL = 1.05
RHAT_WARN_FRACTION = 0.01

_INIT_JITTER = 0.02
_INIT_TAG = 21


class CliError(ValueError):
    """Validation failure that should become a clean nonzero exit."""


# ---------------------------------------------------------------------------
# Run manifest and atomic output staging


@dataclass(frozen=True)
class RunManifest:
    """Provenance for one output directory."""

    command: str
    version: str
    seed: int
    created_utc: str
    config_text: str
    inputs: dict
    timings: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, directory) -> None:
        with open(Path(directory) / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {p}")
    return p


def _digests(paths) -> dict:
    return {str(p): _sha256(p) for p in paths}


def _manifest(command: str, seed: int, config_text: str, inputs, timings) -> RunManifest:
    return RunManifest(
        command=command,
        version=__version__,
        seed=int(seed),
        created_utc=datetime.datetime.now(datetime.timezone.utc)
        .isoformat(timespec="seconds"),
        config_text=config_text,
        inputs=dict(inputs),
        timings={k: round(float(v), 4) for k, v in timings.items()},
    )


@contextmanager
def _staged_output(out_dir, force: bool):
    """Yield a staging directory, promoted to ``out_dir`` only on success."""
    out = Path(out_dir)
    if out.exists() and not force:
        raise CliError(f"output directory exists: {out}; pass --force to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _read_manifest(draws_dir) -> dict:
    path = Path(draws_dir) / "manifest.json"
    if not path.is_file():
        raise CliError(f"no manifest.json under {draws_dir}; not a fit output")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _json_dump(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Shared pieces


def _load_run_config(path) -> tuple[RunConfig, str]:
    _require_file(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text), text


def _parse_rectangle(text: str, what: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise CliError(f"{what} needs four comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise CliError(f"bad {what}: {exc}") from exc


def _parse_thresholds(text: str) -> tuple:
    try:
        values = tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise CliError(f"bad threshold list {text!r}: {exc}") from exc
    if not values:
        raise CliError("threshold list is empty")
    return values


@dataclass(frozen=True)
class _BasisView:
    basis_matrix: object
    n_basis: int


def _fit_common(posterior, cfg: RunConfig, seed: int, threads: int):
    """Run the sampler from a jittered smart start; return natural draws."""
    start = posterior.to_unconstrained(posterior.model.initial_vector())
    rng = np.random.Generator(np.random.Philox(key=[seed, _INIT_TAG]))
    init = start[None, :] + _INIT_JITTER * rng.standard_normal(
        (cfg.sampler.chains, posterior.dim)
    )
    sampler_cfg = dataclasses.replace(cfg.sampler, seed=seed)
    draws = sample(posterior, sampler_cfg, init=init, threads=threads)
    return posterior.natural_draws(draws)


def _write_fit_outputs(staging: Path, natural) -> float:
    """Write draws and diagnostics; return the share of badly mixed columns."""
    draws_to_csv(natural, staging / "draws.csv")
    report = diagnostics(natural)
    payload = report.to_dict()
    payload["step_sizes"] = [float(s) for s in natural.step_sizes]
    payload["accept_rates"] = [float(a) for a in natural.accept_rates]
    _json_dump(payload, staging / "diagnostics.json")
    return report.fraction_above(RHAT_WARN_LEVEL)


def _rebuild_model(manifest: dict, args):
    """Reassemble the fitted model from the manifest's config snapshot."""
    cfg = parse_config(manifest["config_text"])
    if cfg.spec.model == "blanket":
        for name in ("survey1", "survey2", "calibration"):
            if getattr(args, name, None) is None:
                raise CliError(f"blanket draws need --{name}")
        survey1 = load_survey1(_require_file(args.survey1))
        survey2 = load_survey2(_require_file(args.survey2))
        calibration = load_calibration(_require_file(args.calibration))
        model = assemble_blanket(survey1.records, survey2.records, cfg.spec, calibration)
    else:
        if getattr(args, "panel", None) is None:
            raise CliError("resampled draws need --panel")
        panel = load_panel(_require_file(args.panel))
        model = assemble_resampled(panel.records, cfg.spec)
    return cfg, model


def _load_natural_draws(draws_dir, model):
    path = Path(draws_dir) / "draws.csv"
    if not path.is_file():
        raise CliError(f"no draws.csv under {draws_dir}")
    draws = draws_from_csv(path)
    if draws.dim != model.layout.dim:
        raise CliError(
            f"draws have {draws.dim} parameters but the rebuilt model implies "
            f"{model.layout.dim}; data or config do not match the fit"
        )
    return draws


# ---------------------------------------------------------------------------
# Subcommands


def cmd_config_init(args) -> int:
    text = dump_default_config()
    if args.out is None:
        sys.stdout.write(text)
        return EXIT_OK
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"config file exists: {out}; pass --force to replace it")
    out.write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, config_text = _load_run_config(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    if args.region is not None:
        bounds = _parse_rectangle(args.region, "--region")
    elif cfg.spec.grid_bounds is not None:
        bounds = cfg.spec.grid_bounds
    else:
        raise CliError("simulate needs a region: pass --region or set grid_* keys")
    holes = tuple(_parse_rectangle(h, "--hole") for h in args.hole)
    region = Region(*bounds, holes=holes)

    timings = {}
    started = time.perf_counter()
    with _staged_output(args.out, args.force) as staging:
        if cfg.spec.model == "blanket":
            sim = simulate_blanket(
                cfg.spec, seed, args.n1, args.n2, region,
                min_separation=args.min_separation,
            )
            write_survey1(sim.survey1, staging / "survey1.csv")
            write_survey2(sim.survey2, staging / "survey2.csv")
            save_calibration(sim.calibration, staging / "calibration.json")
            sim.truth.save(staging / "truth.json")
        else:
            sim = simulate_panel(
                cfg.spec, seed, args.wells, region,
                min_separation=args.min_separation,
            )
            write_panel(sim.records, staging / "panel.csv")
            sim.truth.save(staging / "truth.json")
        timings["simulate"] = time.perf_counter() - started
        _manifest(
            "simulate", seed, config_text, _digests([args.config]), timings
        ).write(staging)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    pairs_path = _require_file(args.pairs)
    started = time.perf_counter()
    pairs, notes = load_calibration_pairs(pairs_path)
    model = fit_calibration(pairs)
    report = calibration_fit_report(model, pairs)
    elapsed = time.perf_counter() - started

    with _staged_output(args.out, args.force) as staging:
        save_calibration(model, staging / "calibration.json")
        _json_dump(
            {
                "log_likelihood": report.log_likelihood,
                "n_pairs": report.n_pairs,
                "cutpoints": [float(c) for c in model.cutpoints],
                "slope": model.slope,
                "cutpoint_se": [float(s) for s in report.cutpoint_se],
                "slope_se": float(report.slope_se),
                "confusion": [[float(v) for v in row] for row in report.confusion],
                "load_notes": list(notes),
            },
            staging / "calibration_report.json",
        )
        _manifest(
            "calibrate", 0, "", _digests([pairs_path]), {"fit": elapsed}
        ).write(staging)
    return EXIT_OK


def cmd_fit_blanket(args) -> int:
    cfg, config_text = _load_run_config(args.config)
    if cfg.spec.model != "blanket":
        raise CliError("config sets model != blanket; use fit-resampled")
    seed = resolve_seed(args.seed, cfg.seed)
    inputs = [args.config, args.survey1, args.survey2, args.calibration]
    for p in inputs:
        _require_file(p)

    timings = {}
    tick = time.perf_counter()
    survey1 = load_survey1(args.survey1)
    survey2 = load_survey2(args.survey2)
    calibration = load_calibration(args.calibration)
    timings["load"] = time.perf_counter() - tick

    tick = time.perf_counter()
    model = assemble_blanket(survey1.records, survey2.records, cfg.spec, calibration)
    posterior = model.unconstrained()
    timings["assemble"] = time.perf_counter() - tick

    tick = time.perf_counter()
    natural = _fit_common(posterior, cfg, seed, args.threads)
    timings["sample"] = time.perf_counter() - tick

    with _staged_output(args.out, args.force) as staging:
        bad_fraction = _write_fit_outputs(staging, natural)
        _manifest("fit-blanket", seed, config_text, _digests(inputs), timings).write(
            staging
        )
    if bad_fraction > RHAT_WARN_FRACTION:
        print(
            f"warning: R-hat > {RHAT_WARN_LEVEL} on {bad_fraction:.1%} of parameters",
            file=sys.stderr,
        )
        return EXIT_RHAT_WARN
    return EXIT_OK


def cmd_fit_resampled(args) -> int:
    cfg, config_text = _load_run_config(args.config)
    if cfg.spec.model != "resampled":
        raise CliError("config sets model != resampled; use fit-blanket")
    seed = resolve_seed(args.seed, cfg.seed)
    inputs = [args.config, args.panel]
    for p in inputs:
        _require_file(p)

    timings = {}
    tick = time.perf_counter()
    panel = load_panel(args.panel)
    model = assemble_resampled(panel.records, cfg.spec)
    posterior = model.unconstrained()
    timings["assemble"] = time.perf_counter() - tick

    tick = time.perf_counter()
    natural = _fit_common(posterior, cfg, seed, args.threads)
    timings["sample"] = time.perf_counter() - tick

    with _staged_output(args.out, args.force) as staging:
        bad_fraction = _write_fit_outputs(staging, natural)
        _manifest(
            "fit-resampled", seed, config_text, _digests(inputs), timings
        ).write(staging)
    if bad_fraction > RHAT_WARN_FRACTION:
        print(
            f"warning: R-hat > {RHAT_WARN_LEVEL} on {bad_fraction:.1%} of parameters",
            file=sys.stderr,
        )
        return EXIT_RHAT_WARN
    return EXIT_OK


def _summarize_blanket(args, manifest, cfg, model, draws, staging: Path) -> None:
    thresholds = _parse_thresholds(args.thresholds)
    seed = resolve_seed(args.seed, manifest["seed"])
    basis2 = _BasisView(model.B2, model.n_basis)

    exceedance = individual_predictions(
        draws, thresholds=thresholds, well_ids=model.survey2.well_ids
    )
    exceedance.to_csv(staging / "exceedance.csv")

    trend = trend_report(
        draws, model.survey2, d0=model.survey2.d0, basis2=basis2, seed=seed
    )
    trend.to_json(staging / "trend.json")

    if args.plot_data:
        log_levels = model.log_y1
        theta_grid = np.linspace(log_levels.min(), log_levels.max(), 101)
        mixing_coefficient_curve(draws, model.variant, theta_grid).to_csv(
            staging / "mixing_curve.csv"
        )
        delta_mean = model.DB2 @ draws.block("beta")[:, 1:].mean(axis=0)
        span = float(np.abs(delta_mean).max())
        span = span if span > 0 else 1.0
        delta_grid = np.linspace(-span, span, 101)
        for level in (100.0, 250.0):
            for noisy in (False, True):
                bands = predictive_change(
                    draws, np.log(level), delta_grid,
                    include_noise=noisy, variant=model.variant, seed=seed,
                )
                suffix = "_noisy" if noisy else ""
                bands.to_csv(staging / f"predictive_change_{level:g}{suffix}.csv")


def _summarize_resampled(args, manifest, cfg, model, draws, staging: Path) -> None:
    observed = model.log_y[:, 0]
    theta_grid = np.linspace(observed.min(), observed.max(), 101)
    report = spline_change_curve(draws, theta_grid, model.knots)
    report.to_csv(staging / "spline_change.csv")


def cmd_summarize(args) -> int:
    manifest = _read_manifest(args.draws)
    cfg, model = _rebuild_model(manifest, args)
    draws = _load_natural_draws(args.draws, model)

    started = time.perf_counter()
    with _staged_output(args.out, args.force) as staging:
        if cfg.spec.model == "blanket":
            _summarize_blanket(args, manifest, cfg, model, draws, staging)
        else:
            _summarize_resampled(args, manifest, cfg, model, draws, staging)
        _manifest(
            "summarize",
            resolve_seed(args.seed, manifest["seed"]),
            manifest["config_text"],
            _digests([Path(args.draws) / "draws.csv"]),
            {"summarize": time.perf_counter() - started},
        ).write(staging)
    return EXIT_OK


def cmd_ppc(args) -> int:
    manifest = _read_manifest(args.draws)
    cfg, model = _rebuild_model(manifest, args)
    if cfg.spec.model != "blanket":
        raise CliError("ppc compares blanket-model draws against a panel")
    draws = _load_natural_draws(args.draws, model)
    panel = load_panel(_require_file(args.panel))
    seed = resolve_seed(args.seed, manifest["seed"])

    started = time.perf_counter()
    report = ppc_subsample(
        draws, args.subsample, panel, model.survey2,
        _BasisView(model.B2, model.n_basis), seed=seed,
    )
    with _staged_output(args.out, args.force) as staging:
        report.to_json(staging / "ppc.json")
        with open(staging / "predictive_stats.csv", "w", encoding="utf-8") as fh:
            fh.write("draw," + ",".join(report.statistic_names) + "\n")
            for i, row in enumerate(report.predictive):
                fh.write(f"{i}," + ",".join(format(v, ".17g") for v in row) + "\n")
        _manifest(
            "ppc", seed, manifest["config_text"],
            _digests([Path(args.draws) / "draws.csv", args.panel]),
            {"ppc": time.perf_counter() - started},
        ).write(staging)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _add_out(parser, required=True):
    parser.add_argument("--out", required=required, help="output directory")
    parser.add_argument(
        "--force", action="store_true", help="replace an existing output directory"
    )


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="overrides AQ_SEED and the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aqdyn",
        description="Groundwater arsenic dynamics: simulate, fit, summarize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    defaults_shown = dict(formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = sub.add_parser("config", help="configuration helpers")
    config_sub = p.add_subparsers(dest="config_command", required=True)
    init = config_sub.add_parser("init", **defaults_shown, help="print or write the default config")
    init.add_argument("--out", default=None, help="write here instead of stdout")
    init.add_argument("--force", action="store_true")
    init.set_defaults(func=cmd_config_init)

    p = sub.add_parser("simulate", **defaults_shown, help="draw a synthetic dataset from the model")
    p.add_argument("--config", required=True)
    p.add_argument("--n1", type=int, default=100, help="survey-1 wells (blanket)")
    p.add_argument("--n2", type=int, default=100, help="survey-2 wells (blanket)")
    p.add_argument("--wells", type=int, default=100, help="panel wells (resampled)")
    p.add_argument("--region", default=None,
                   help="east_min,east_max,north_min,north_max in meters")
    p.add_argument("--hole", action="append", default=[],
                   help="excluded rectangle, repeatable")
    p.add_argument("--min-separation", type=float, default=0.0)
    _add_seed(p)
    _add_out(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", **defaults_shown, help="fit the kit calibration model")
    p.add_argument("--pairs", required=True, help="calibration CSV")
    _add_out(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit-blanket", **defaults_shown, help="fit the two-survey model")
    p.add_argument("--survey1", required=True)
    p.add_argument("--survey2", required=True)
    p.add_argument("--calibration", required=True, help="calibration model JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_seed(p)
    _add_out(p)
    p.set_defaults(func=cmd_fit_blanket)

    p = sub.add_parser("fit-resampled", **defaults_shown, help="fit the longitudinal panel model")
    p.add_argument("--panel", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_seed(p)
    _add_out(p)
    p.set_defaults(func=cmd_fit_resampled)

    p = sub.add_parser("summarize", **defaults_shown, help="turn draws into report tables")
    p.add_argument("--draws", required=True, help="fit output directory")
    p.add_argument("--survey1", default=None)
    p.add_argument("--survey2", default=None)
    p.add_argument("--calibration", default=None)
    p.add_argument("--panel", default=None)
    p.add_argument("--thresholds", default="10,50,100",
                   help="exceedance thresholds in ug/L")
    p.add_argument("--plot-data", action="store_true",
                   help="also write grid/band CSVs for plotting")
    _add_seed(p)
    _add_out(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("ppc", **defaults_shown, help="posterior predictive check against a panel")
    p.add_argument("--draws", required=True, help="blanket fit output directory")
    p.add_argument("--survey1", default=None)
    p.add_argument("--survey2", default=None)
    p.add_argument("--calibration", default=None)
    p.add_argument("--panel", required=True, help="observed panel CSV")
    p.add_argument("--subsample", type=int, required=True)
    _add_seed(p)
    _add_out(p)
    p.set_defaults(func=cmd_ppc)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, ConvergenceError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
