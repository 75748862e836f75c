"""Dynamic Hamiltonian Monte Carlo with adaptation and convergence checks.

The engine samples any target exposing ``dim`` and ``value_and_grad(x)``.
Transitions use multinomial trajectory sampling over a doubling leapfrog tree
(stopped by the no-U-turn criterion or the 1000-unit energy-error divergence
threshold), with dual-averaging step-size adaptation toward a target
acceptance rate and a diagonal mass matrix estimated over expanding warmup
windows.  Setting ``leapfrog_steps`` switches to fixed-length trajectories
with a Metropolis correction.

Randomness is counter-based: every (seed, chain, iteration) triple indexes an
independent Philox stream, so chains can run in any order, or concurrently,
and still reproduce bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

__all__ = [
    "SamplerConfig",
    "SamplingError",
    "PosteriorDraws",
    "DiagnosticsReport",
    "sample",
    "leapfrog",
    "diagnostics",
    "split_rhat",
    "ess_bulk",
    "draws_to_csv",
    "draws_from_csv",
]

RHAT_FLAG_THRESHOLD = 1.01


class SamplingError(RuntimeError):
    """Initialization or warmup failed in a way no draw can recover from."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 500
    target_accept: float = 0.8
    max_tree_depth: int = 10
    leapfrog_steps: int | None = None  # fixed-length fallback when set
    step_size: float | None = None  # fixed step size when set (no adaptation)
    seed: int = 0
    divergence_energy: float = 1000.0

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.draws < 1:
            raise ValueError("zero-draw configuration")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be positive")
        if self.leapfrog_steps is not None and self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be positive when given")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive when given")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _rng(seed: int, chain: int, iteration: int) -> np.random.Generator:
    """Philox stream keyed on (seed, chain) with the iteration as counter."""
    return np.random.Generator(
        np.random.Philox(counter=[0, 0, 0, iteration], key=[seed, chain])
    )


def _rng_aux(seed: int, chain: int, iteration: int) -> np.random.Generator:
    # separate counter lane so step-size probes never replay transition draws
    return np.random.Generator(
        np.random.Philox(counter=[0, 0, 1, iteration], key=[seed, chain])
    )


def leapfrog(target, q, p, grad, step, mass_inv):
    """One leapfrog step; returns (q, p, value, grad) after the step."""
    p_half = p + 0.5 * step * grad
    q_new = q + step * (mass_inv * p_half)
    value, grad_new = target.value_and_grad(q_new)
    p_new = p_half + 0.5 * step * grad_new
    return q_new, p_new, value, grad_new


@dataclass
class _State:
    q: np.ndarray
    p: np.ndarray
    value: float
    grad: np.ndarray

    def energy(self, mass_inv) -> float:
        return -self.value + 0.5 * float(self.p @ (mass_inv * self.p))


class _DualAveraging:
    """Nesterov dual averaging of log step size (Hoffman & Gelman defaults)."""

    def __init__(self, initial_step: float, target: float):
        self.mu = math.log(10.0 * initial_step)
        self.target = target
        self.count = 0
        self.h_bar = 0.0
        self.log_step = math.log(initial_step)
        self.log_step_bar = 0.0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        w = 1.0 / (self.count + 10.0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(self.count) / 0.05 * self.h_bar
        m = self.count**-0.75
        self.log_step_bar = m * self.log_step + (1.0 - m) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def adapted_step(self) -> float:
        return math.exp(self.log_step_bar)


def _find_reasonable_step(target, state: _State, mass_inv, rng) -> float:
    """Double or halve until one leapfrog step crosses 50% acceptance."""
    step = 1.0
    h0 = state.energy(mass_inv)
    q, p, value, grad = leapfrog(target, state.q, state.p, state.grad, step, mass_inv)
    h1 = -value + 0.5 * float(p @ (mass_inv * p)) if np.isfinite(value) else np.inf
    log_ratio = h0 - h1 if np.isfinite(h1) else -np.inf
    direction = 1.0 if log_ratio > math.log(0.5) else -1.0
    for _ in range(60):
        step *= 2.0**direction
        if not 1e-10 < step < 1e10:
            step = min(max(step, 1e-10), 1e10)
            break
        q, p, value, grad = leapfrog(target, state.q, state.p, state.grad, step, mass_inv)
        h1 = -value + 0.5 * float(p @ (mass_inv * p)) if np.isfinite(value) else np.inf
        log_ratio = h0 - h1 if np.isfinite(h1) else -np.inf
        if direction * log_ratio <= direction * math.log(0.5):
            break
    return step


class _Subtree:
    __slots__ = (
        "left",
        "right",
        "proposal",
        "log_weight",
        "divergent",
        "turning",
        "sum_accept",
        "n_leaves",
    )

    def __init__(self, left, right, proposal, log_weight, divergent, turning, sum_accept, n_leaves):
        self.left = left
        self.right = right
        self.proposal = proposal
        self.log_weight = log_weight
        self.divergent = divergent
        self.turning = turning
        self.sum_accept = sum_accept
        self.n_leaves = n_leaves


def _is_turning(left: _State, right: _State, mass_inv) -> bool:
    dq = right.q - left.q
    return float(dq @ (mass_inv * left.p)) < 0 or float(dq @ (mass_inv * right.p)) < 0


def _build_tree(target, state, depth, direction, step, h0, mass_inv, rng, divergence_energy):
    if depth == 0:
        q, p, value, grad = leapfrog(
            target, state.q, state.p, state.grad, direction * step, mass_inv
        )
        leaf = _State(q, p, value, grad)
        if np.isfinite(value):
            energy_error = leaf.energy(mass_inv) - h0
        else:
            energy_error = np.inf
        divergent = not np.isfinite(energy_error) or energy_error > divergence_energy
        log_weight = -energy_error if not divergent else -np.inf
        accept = math.exp(min(0.0, -energy_error)) if np.isfinite(energy_error) else 0.0
        return _Subtree(leaf, leaf, leaf, log_weight, divergent, False, accept, 1)

    first = _build_tree(
        target, state, depth - 1, direction, step, h0, mass_inv, rng, divergence_energy
    )
    if first.divergent or first.turning:
        return first
    start = first.right if direction > 0 else first.left
    second = _build_tree(
        target, start, depth - 1, direction, step, h0, mass_inv, rng, divergence_energy
    )
    sum_accept = first.sum_accept + second.sum_accept
    n_leaves = first.n_leaves + second.n_leaves
    if second.divergent or second.turning:
        first.divergent = second.divergent
        first.turning = second.turning
        first.sum_accept = sum_accept
        first.n_leaves = n_leaves
        return first
    total = np.logaddexp(first.log_weight, second.log_weight)
    proposal = first.proposal
    if math.log(rng.uniform()) < second.log_weight - total:
        proposal = second.proposal
    left = first.left if direction > 0 else second.left
    right = second.right if direction > 0 else first.right
    turning = _is_turning(left, right, mass_inv)
    return _Subtree(left, right, proposal, total, first.divergent, turning, sum_accept, n_leaves)


def _nuts_transition(target, state, step, mass_inv, rng, config):
    dim = state.q.size
    p0 = rng.standard_normal(dim) / np.sqrt(mass_inv)
    current = _State(state.q, p0, state.value, state.grad)
    h0 = current.energy(mass_inv)
    left = current
    right = current
    proposal = current
    log_weight = 0.0
    sum_accept = 0.0
    n_leaves = 0
    divergent = False
    for depth in range(config.max_tree_depth):
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        start = right if direction > 0 else left
        sub = _build_tree(
            target, start, depth, direction, step, h0, mass_inv, rng,
            config.divergence_energy,
        )
        sum_accept += sub.sum_accept
        n_leaves += sub.n_leaves
        if sub.divergent:
            divergent = True
            break
        if sub.turning:
            break
        # Biased progressive sampling favors the newer half of the trajectory.
        if math.log(rng.uniform()) < sub.log_weight - log_weight:
            proposal = sub.proposal
        log_weight = np.logaddexp(log_weight, sub.log_weight)
        if direction > 0:
            right = sub.right
        else:
            left = sub.left
        if _is_turning(left, right, mass_inv):
            break
    accept_stat = sum_accept / max(n_leaves, 1)
    return proposal, divergent, accept_stat


def _static_transition(target, state, step, mass_inv, rng, config):
    dim = state.q.size
    p0 = rng.standard_normal(dim) / np.sqrt(mass_inv)
    current = _State(state.q, p0, state.value, state.grad)
    h0 = current.energy(mass_inv)
    z = current
    ok = True
    for _ in range(config.leapfrog_steps):
        q, p, value, grad = leapfrog(target, z.q, z.p, z.grad, step, mass_inv)
        if not np.isfinite(value):
            ok = False
            break
        z = _State(q, p, value, grad)
    if ok:
        energy_error = z.energy(mass_inv) - h0
    else:
        energy_error = np.inf
    divergent = not np.isfinite(energy_error) or energy_error > config.divergence_energy
    accept_stat = math.exp(min(0.0, -energy_error)) if np.isfinite(energy_error) else 0.0
    if not divergent and math.log(rng.uniform()) < -energy_error:
        return z, divergent, accept_stat
    return current, divergent, accept_stat


def _adaptation_windows(warmup: int) -> list[tuple[int, int]]:
    """Stan-style expanding slow windows inside the warmup phase."""
    if warmup < 20:
        return []
    if warmup >= 150:
        init_buffer, term_buffer, base = 75, 50, 25
    else:
        init_buffer = max(1, int(0.15 * warmup))
        term_buffer = max(1, int(0.10 * warmup))
        base = warmup - init_buffer - term_buffer
    windows = []
    start = init_buffer
    width = base
    while start + width <= warmup - term_buffer:
        end = start + width
        if end + 2 * width > warmup - term_buffer:
            end = warmup - term_buffer  # absorb the remainder into the last window
        windows.append((start, end))
        start = end
        width *= 2
    return windows


def _initial_state(target, config, chain, init):
    if init is not None:
        q = np.asarray(init, dtype=float)
        value, grad = target.value_and_grad(q)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise SamplingError("supplied initial point has non-finite density or gradient")
        return _State(q, np.zeros_like(q), value, grad)
    rng = _rng(config.seed, chain, 0)
    for _ in range(100):
        q = rng.uniform(-2.0, 2.0, target.dim)
        value, grad = target.value_and_grad(q)
        if np.isfinite(value) and np.all(np.isfinite(grad)):
            return _State(q, np.zeros_like(q), value, grad)
    raise SamplingError("initialization failed: no finite density in 100 attempts")


def _run_chain(target, config, chain, init):
    state = _initial_state(target, config, chain, init)
    dim = target.dim
    mass_inv = np.ones(dim)
    transition = _static_transition if config.leapfrog_steps else _nuts_transition

    adapting = config.step_size is None
    if adapting:
        rng0 = _rng_aux(config.seed, chain, 0)
        probe = _State(state.q, rng0.standard_normal(dim), state.value, state.grad)
        step = _find_reasonable_step(target, probe, mass_inv, rng0)
        averager = _DualAveraging(step, config.target_accept)
    else:
        step = config.step_size
        averager = None

    windows = _adaptation_windows(config.warmup) if adapting else []
    window_idx = 0
    window_buffer: list[np.ndarray] = []

    warmup_divergences = 0
    for it in range(1, config.warmup + 1):
        rng = _rng(config.seed, chain, it)
        state, divergent, accept = transition(target, state, step, mass_inv, rng, config)
        warmup_divergences += divergent
        if adapting:
            step = averager.update(accept)
        if window_idx < len(windows):
            start, end = windows[window_idx]
            if it > start:
                window_buffer.append(state.q.copy())
            if it == end:
                block = np.asarray(window_buffer)
                n = block.shape[0]
                if n >= 2:
                    var = block.var(axis=0, ddof=1)
                    mass_inv = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    mass_inv = np.maximum(mass_inv, 1e-10)
                window_buffer = []
                window_idx += 1
                if adapting:
                    # restart step-size averaging against the new metric
                    rng_w = _rng_aux(config.seed, chain, it)
                    probe = _State(
                        state.q,
                        rng_w.standard_normal(dim) / np.sqrt(mass_inv),
                        state.value,
                        state.grad,
                    )
                    step = _find_reasonable_step(target, probe, mass_inv, rng_w)
                    averager = _DualAveraging(step, config.target_accept)
    if config.warmup > 0 and warmup_divergences == config.warmup:
        raise SamplingError("every warmup iteration diverged; the step size cannot adapt")
    if adapting and averager.count > 0:
        step = averager.adapted_step

    out = np.empty((config.draws, dim))
    divergences = 0
    accept_sum = 0.0
    for k in range(config.draws):
        it = config.warmup + 1 + k
        rng = _rng(config.seed, chain, it)
        state, divergent, accept = transition(target, state, step, mass_inv, rng, config)
        divergences += divergent
        accept_sum += accept
        out[k] = state.q
    return out, divergences, step, accept_sum / config.draws


@dataclass
class PosteriorDraws:
    """Draws stacked per chain plus naming, provenance, and divergence counts."""

    draws3: np.ndarray  # (chains, draws, dim)
    columns: tuple
    layout: dict | None = None
    divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    seed: int = 0
    step_sizes: tuple = ()
    accept_rates: tuple = ()

    def __post_init__(self):
        if self.draws3.ndim != 3:
            raise ValueError("draws3 must be (chains, draws, dim)")
        if len(self.columns) != self.draws3.shape[2]:
            raise ValueError("one column name per dimension required")
        if not np.all(np.isfinite(self.draws3)):
            raise ValueError("draws contain non-finite entries")
        if self.layout:
            covered = np.zeros(self.draws3.shape[2], dtype=bool)
            for s in self.layout.values():
                covered[s] = True
            if not covered.all():
                raise ValueError("layout slices must partition the dimension")

    @property
    def n_chains(self) -> int:
        return self.draws3.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws3.shape[1]

    @property
    def dim(self) -> int:
        return self.draws3.shape[2]

    @property
    def matrix(self) -> np.ndarray:
        return self.draws3.reshape(-1, self.dim)

    @property
    def chain_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_chains), self.n_draws)

    def block(self, name: str) -> np.ndarray:
        if not self.layout or name not in self.layout:
            raise KeyError(f"no block named {name!r}")
        return self.matrix[:, self.layout[name]]


def sample(target, config: SamplerConfig, init=None, threads: int = 1) -> PosteriorDraws:
    """Run all chains and collect draws; bitwise-reproducible for fixed inputs.

    ``init`` may be a single vector (shared) or an array of one row per chain.
    ``threads`` > 1 runs chains concurrently; each chain's stream is keyed on
    (seed, chain), so scheduling cannot change the result.
    """
    dim = target.dim
    inits: list = [None] * config.chains
    if init is not None:
        init = np.asarray(init, dtype=float)
        if init.ndim == 1:
            inits = [init] * config.chains
        else:
            if init.shape != (config.chains, dim):
                raise ValueError("per-chain init must have shape (chains, dim)")
            inits = list(init)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(
                    lambda c: _run_chain(target, config, c, inits[c]),
                    range(config.chains),
                )
            )
    else:
        results = [_run_chain(target, config, c, inits[c]) for c in range(config.chains)]
    draws3 = np.stack([r[0] for r in results])
    divergences = np.array([r[1] for r in results], dtype=int)
    columns = getattr(target, "columns", None) or tuple(f"x[{i}]" for i in range(dim))
    layout = getattr(target, "layout", None)
    return PosteriorDraws(
        draws3=draws3,
        columns=tuple(columns),
        layout=layout,
        divergences=divergences,
        seed=config.seed,
        step_sizes=tuple(float(r[2]) for r in results),
        accept_rates=tuple(float(r[3]) for r in results),
    )


# ---------------------------------------------------------------------------
# Convergence diagnostics


def _split_chains(chains: np.ndarray) -> np.ndarray:
    m, n = chains.shape
    half = n // 2
    return np.concatenate([chains[:, :half], chains[:, n - half :]], axis=0)


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction over half-chains (NaN below two chains)."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("expected (chains, draws)")
    if chains.shape[0] < 2 or chains.shape[1] < 4:
        return math.nan
    split = _split_chains(chains)
    n = split.shape[1]
    means = split.mean(axis=1)
    variances = split.var(axis=1, ddof=1)
    w = variances.mean()
    b = n * means.var(ddof=1)
    if w <= 0.0:
        return 1.0  # constant chains: degenerate but converged
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _rank_normalize(chains: np.ndarray) -> np.ndarray:
    flat = chains.reshape(-1)
    ranks = rankdata(flat, method="average")
    z = ndtri((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(chains.shape)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    centered = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conj(f))[:n].real
    return acov / n


def ess_bulk(chains: np.ndarray) -> float:
    """Bulk effective sample size on rank-normalized half-chains."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("expected (chains, draws)")
    total = chains.size
    if np.ptp(chains) == 0.0:
        return float(total)  # constant: degenerate, reported as full size
    split = _split_chains(_rank_normalize(chains))
    m, n = split.shape
    if n < 4:
        return math.nan
    acov = np.stack([_autocovariance(c) for c in split])
    mean_acov = acov.mean(axis=0)
    w = (acov[:, 0] * n / (n - 1.0)).mean()
    var_plus = w * (n - 1.0) / n + split.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(total)
    rho = 1.0 - (w - mean_acov) / var_plus
    rho[0] = 1.0
    # Geyer initial monotone positive sequence over lag pairs (0,1), (2,3), ...
    pair_sum = 0.0
    prev_pair = np.inf
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        prev_pair = pair
        pair_sum += pair
        k += 1
    tau = max(-1.0 + 2.0 * pair_sum, 1.0 / math.log10(max(total, 10)))
    ess = total / tau
    return float(min(ess, total * math.log10(max(total, 10))))


@dataclass
class DiagnosticsReport:
    columns: tuple
    rhat: np.ndarray
    ess: np.ndarray
    divergences: np.ndarray
    n_chains: int
    n_draws: int

    @property
    def flagged(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.rhat > RHAT_FLAG_THRESHOLD

    @property
    def max_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if finite.size else math.nan

    def fraction_above(self, threshold: float) -> float:
        with np.errstate(invalid="ignore"):
            return float(np.mean(self.rhat > threshold))

    def to_dict(self) -> dict:
        def clean(x):
            return None if (isinstance(x, float) and math.isnan(x)) else x

        return {
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
            "per_chain_divergences": [int(d) for d in self.divergences],
            "max_rhat": clean(self.max_rhat),
            "parameters": {
                name: {
                    "rhat": clean(float(self.rhat[i])),
                    "ess_bulk": clean(float(self.ess[i])),
                    "flagged": bool(self.flagged[i]),
                }
                for i, name in enumerate(self.columns)
            },
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def diagnostics(draws: PosteriorDraws) -> DiagnosticsReport:
    """Split R-hat and bulk ESS per parameter (R-hat NaN below two chains)."""
    arr = draws.draws3
    dim = arr.shape[2]
    rhat = np.empty(dim)
    ess = np.empty(dim)
    for i in range(dim):
        series = arr[:, :, i]
        rhat[i] = split_rhat(series)
        ess[i] = ess_bulk(series)
    return DiagnosticsReport(
        columns=draws.columns,
        rhat=rhat,
        ess=ess,
        divergences=draws.divergences,
        n_chains=draws.n_chains,
        n_draws=draws.n_draws,
    )


# ---------------------------------------------------------------------------
# Serialization


def draws_to_csv(draws: PosteriorDraws, path) -> None:
    """One row per draw: chain, draw index, then named parameter columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "draw", *draws.columns])
        for c in range(draws.n_chains):
            for d in range(draws.n_draws):
                row = draws.draws3[c, d]
                writer.writerow([c, d, *(format(v, ".17g") for v in row)])


def _layout_from_columns(columns) -> dict:
    layout: dict[str, slice] = {}
    start = 0
    current = None
    for i, col in enumerate(columns):
        base = col.split("[")[0]
        if base != current:
            if current is not None:
                layout[current] = slice(start, i)
            current = base
            start = i
    if current is not None:
        layout[current] = slice(start, len(columns))
    return layout


def draws_from_csv(path) -> PosteriorDraws:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["chain", "draw"]:
            raise ValueError("draws CSV must start with chain and draw columns")
        columns = tuple(header[2:])
        chain_ids = []
        rows = []
        for rec in reader:
            chain_ids.append(int(rec[0]))
            rows.append([float(v) for v in rec[2:]])
    data = np.asarray(rows)
    chain_ids = np.asarray(chain_ids)
    n_chains = chain_ids.max() + 1
    per_chain = []
    for c in range(n_chains):
        per_chain.append(data[chain_ids == c])
    counts = {block.shape[0] for block in per_chain}
    if len(counts) != 1:
        raise ValueError("chains have unequal draw counts")
    draws3 = np.stack(per_chain)
    return PosteriorDraws(
        draws3=draws3, columns=columns, layout=_layout_from_columns(columns)
    )
