"""Simulation-based coverage study for either model.

Repeatedly draws generating values from the priors, simulates a miniature
dataset, fits it, and tallies how often central posterior intervals cover
the truth. With a correct implementation the empirical coverage should track
the nominal level up to binomial noise.

    python3 scripts/coverage_study.py --reps 20 --level 0.9 --workdir /tmp/aq_cov
    python3 scripts/coverage_study.py --model resampled --reps 20 --workdir /tmp/aq_pcov
"""

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aqdyn import cli
from aqdyn.data_io import SyntheticTruth
from aqdyn.sampler import draws_from_csv

PARAMS = {
    "blanket": ("alpha_delta", "beta_delta", "alpha_y", "alpha_theta",
                "tau", "sigma_obs", "beta_depth", "beta0"),
    "resampled": ("mu", "beta_depth", "sigma_s", "sigma_l",
                  "gp_alpha", "gp_rho"),
}


@dataclass(frozen=True)
class StudyConfig:
    model: str = "blanket"
    reps: int = 20
    level: float = 0.9
    n_wells: int = 100
    base_seed: int = 4200
    chains: int = 2
    warmup: int = 250
    draws: int = 200

    def config_text(self) -> str:
        if self.model == "blanket":
            model_lines = (
                "model = blanket\n"
                "n_east_inner = 4\n"
                "laplacian_scale = 0.027777777777777776\n"
            )
        else:
            model_lines = "model = resampled\nar_interior_knots = 5\n"
        return (
            model_lines
            + "include_depth = true\n"
            "grid_east_min = 0\n"
            "grid_east_max = 3000\n"
            "grid_north_min = 0\n"
            "grid_north_max = 2400\n"
            f"chains = {self.chains}\n"
            f"warmup = {self.warmup}\n"
            f"draws = {self.draws}\n"
        )


def one_replication(cfg: StudyConfig, config_path: Path, work: Path, rep: int):
    seed = cfg.base_seed + rep
    simdir = work / f"sim{rep:03d}"
    fitdir = work / f"fit{rep:03d}"
    if cfg.model == "blanket":
        size_args = ["--n1", str(cfg.n_wells), "--n2", str(cfg.n_wells)]
        fit_args = ["fit-blanket",
                    "--survey1", str(simdir / "survey1.csv"),
                    "--survey2", str(simdir / "survey2.csv"),
                    "--calibration", str(simdir / "calibration.json")]
    else:
        size_args = ["--wells", str(cfg.n_wells)]
        fit_args = ["fit-resampled", "--panel", str(simdir / "panel.csv")]
    rc = cli.main(["simulate", "--config", str(config_path), *size_args,
                   "--seed", str(seed), "--out", str(simdir), "--force"])
    assert rc == 0
    rc = cli.main([*fit_args, "--config", str(config_path),
                   "--seed", str(seed), "--out", str(fitdir), "--force"])
    assert rc in (0, 3)

    truth = SyntheticTruth.load(simdir / "truth.json")
    draws = draws_from_csv(fitdir / "draws.csv")
    tail = 0.5 * (1.0 - cfg.level)
    row = {}
    for name in PARAMS[cfg.model]:
        # the surface intercept lives in the first column of the beta block
        samples = draws.block("beta")[:, 0] if name == "beta0" \
            else draws.block(name)[:, 0]
        lo, hi = np.quantile(samples, [tail, 1.0 - tail])
        row[name] = bool(lo <= truth.scalars[name] <= hi)
    return row


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--model", choices=("blanket", "resampled"), default="blanket")
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--level", type=float, default=0.9)
    parser.add_argument("--wells", type=int, default=100)
    parser.add_argument("--workdir", type=Path, default=Path("coverage_run"))
    parser.add_argument("--base-seed", type=int, default=4200)
    args = parser.parse_args()

    cfg = StudyConfig(model=args.model, reps=args.reps, level=args.level,
                      n_wells=args.wells, base_seed=args.base_seed)
    params = PARAMS[cfg.model]
    work = args.workdir
    work.mkdir(parents=True, exist_ok=True)
    config_path = work / "study.cfg"
    config_path.write_text(cfg.config_text())

    rows = []
    for rep in range(cfg.reps):
        rows.append(one_replication(cfg, config_path, work, rep))
        done = len(rows)
        running = {p: sum(r[p] for r in rows) for p in params}
        print(f"rep {rep:3d}: " + "  ".join(
            f"{p}={running[p]}/{done}" for p in params), flush=True)

    print(f"\nnominal level {cfg.level:.0%}, {cfg.reps} replications")
    se = np.sqrt(cfg.level * (1 - cfg.level) / cfg.reps)
    for p in params:
        rate = sum(r[p] for r in rows) / cfg.reps
        print(f"  {p:14s} coverage {rate:5.0%}  (binomial SE {se:.0%})")


if __name__ == "__main__":
    main()
