"""Adaptive ABC-SMC with early-rejection MCMC move kernels.

Each round selects the next tolerance by bisection on the proportion of
unique alive particles, reweights by the kernel ratio, resamples when the
effective sample size drops, and moves every alive particle with an
oej/ej MCMC step at the new tolerance using a proposal covariance adapted
from the weighted particles.  A pilot run of the same machinery with
oej moves collects the (theta, delta) pairs that train the GP surrogate.

Per-particle randomness comes from ``rng.substream(round, particle, move)``,
so results are independent of move scheduling (serial or worker pool).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import multiprocessing
import csv

import numpy as np

from .core import (
    DegeneracyError,
    KernelSpec,
    PriorSpec,
    ProposalSpec,
    RngStream,
    kernel_eval,
)
from .gp import DiscrepancySet
from .mcmc import (
    ChainState,
    IterationRecord,
    SamplerConfig,
    ej_mcmc_step,
    oej_mcmc_step,
)

__all__ = [
    "ParticleSet",
    "SmcConfig",
    "RoundReport",
    "SmcResult",
    "select_epsilon",
    "reweight",
    "adapt_proposal_cov",
    "effective_sample_size",
    "resample",
    "run_ejasmc",
    "collect_training_data",
    "collect_prior_training",
    "save_report_csv",
    "save_particles_csv",
    "load_particles_csv",
]


@dataclass
class ParticleSet:
    """Weighted particles; a weight of exactly 0 flags a dead particle."""

    thetas: np.ndarray  # (N, p)
    deltas: np.ndarray  # (N,)
    weights: np.ndarray  # (N,), normalized over the set
    h_vals: np.ndarray | None = None  # cached surrogate thresholds (ej moves)

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.deltas = np.asarray(self.deltas, dtype=float).ravel()
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        n = self.thetas.shape[0]
        if self.deltas.shape[0] != n or self.weights.shape[0] != n:
            raise ValueError("thetas, deltas and weights must have matching length")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        total = self.weights.sum()
        if total > 0 and abs(total - 1.0) > 1e-9:
            self.weights = self.weights / total

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    @property
    def alive(self) -> np.ndarray:
        return self.weights > 0

    def unique_alive_count(self) -> int:
        alive = self.alive
        if not np.any(alive):
            return 0
        return np.unique(self.thetas[alive], axis=0).shape[0]


@dataclass
class SmcConfig:
    """Settings of one adaptive SMC run.

    ``delta_fn(theta, rng)`` bundles simulator, discrepancy and observed
    data.  Exactly one stopping rule must be set (simulation budget,
    target tolerance, or maximum number of rounds); several may be
    combined, whichever fires first stops the run.
    """

    n_particles: int
    gamma: float
    kernel: KernelSpec
    prior: PriorSpec
    delta_fn: object
    move_sampler: str = "oej"  # oej | ej
    moves_per_round: int = 1
    sim_budget: int | None = None
    target_eps: float | None = None
    max_rounds: int | None = None
    resample_threshold: float = 0.5
    resample_scheme: str = "systematic"
    surrogate: object = None
    quantile_a: float | None = None
    h_fn: object = None

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.move_sampler not in ("oej", "ej"):
            raise ValueError("move_sampler must be 'oej' or 'ej'")
        if self.moves_per_round < 0:
            raise ValueError("moves_per_round must be >= 0")
        if self.resample_scheme not in ("systematic", "multinomial"):
            raise ValueError("resample_scheme must be 'systematic' or 'multinomial'")
        if self.sim_budget is None and self.target_eps is None and self.max_rounds is None:
            raise ValueError("set at least one stopping rule")
        if self.move_sampler == "ej" and self.h_fn is None:
            if self.surrogate is None or self.quantile_a is None:
                raise ValueError("ej moves need a fitted surrogate and quantile level a")
            from .gp import h_function

            self.h_fn = h_function(self.surrogate, self.quantile_a)


@dataclass
class RoundReport:
    round: int
    eps: float
    unique_alive: int
    accept_rate: float
    n_sim: int
    n_early1: int
    n_early2: int


@dataclass
class SmcResult:
    particles: ParticleSet
    rounds: list
    n_sim: int
    n_pre: int
    n_early1: int
    n_early2: int
    n_accept: int
    n_move_reject: int

    @property
    def final_eps(self) -> float:
        return self.rounds[-1].eps if self.rounds else math.inf


# ---------------------------------------------------------------------------
# Round primitives
# ---------------------------------------------------------------------------


def _alive_count_at(particles: ParticleSet, kernel: KernelSpec, eps: float) -> int:
    """Unique alive particles if the tolerance moved to ``eps``."""
    mask = particles.alive & (kernel_eval(kernel, particles.deltas, eps) > 0)
    if not np.any(mask):
        return 0
    return np.unique(particles.thetas[mask], axis=0).shape[0]


def select_epsilon(
    particles: ParticleSet, gamma: float, kernel: KernelSpec, eps_prev: float
) -> float:
    """Smallest tolerance keeping >= ceil(gamma N) unique particles alive.

    Uniform kernels use the exact order statistic of the unique alive
    discrepancies; other families bisect on [min delta, eps_prev] to a
    relative tolerance of 1e-6.  Raises DegeneracyError when even
    ``eps_prev`` cannot keep that many unique particles alive.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    target = math.ceil(gamma * particles.n)
    if _alive_count_at(particles, kernel, eps_prev) < target:
        raise DegeneracyError(
            f"fewer than {target} unique particles alive at eps_prev={eps_prev}"
        )

    alive = particles.alive & np.isfinite(particles.deltas)
    if kernel.family == "uniform":
        _, first = np.unique(particles.thetas[alive], axis=0, return_index=True)
        unique_deltas = np.sort(particles.deltas[alive][first])
        eps = float(unique_deltas[target - 1])
        return min(eps, eps_prev)

    lo = float(particles.deltas[alive].min())
    hi = eps_prev
    if math.isinf(hi):
        hi = float(particles.deltas[alive].max()) * (1.0 + 1e-6) + 1e-300
    for _ in range(200):
        if (hi - lo) <= 1e-6 * hi:
            break
        mid = 0.5 * (lo + hi)
        if _alive_count_at(particles, kernel, mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def reweight(
    particles: ParticleSet, eps_old: float, eps_new: float, kernel: KernelSpec
) -> ParticleSet:
    """Multiply weights by the kernel ratio K_new(delta)/K_old(delta)."""
    if eps_new > eps_old:
        raise ValueError("eps_new must not exceed eps_old")
    k_new = kernel_eval(kernel, particles.deltas, eps_new)
    k_old = kernel_eval(kernel, particles.deltas, eps_old)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(k_old > 0, k_new / np.where(k_old > 0, k_old, 1.0), 0.0)
    w = particles.weights * ratio
    total = w.sum()
    if total <= 0:
        raise DegeneracyError("all particle weights vanished during reweighting")
    return ParticleSet(particles.thetas, particles.deltas, w / total, particles.h_vals)


def adapt_proposal_cov(particles: ParticleSet) -> np.ndarray:
    """Weighted sample covariance of the alive particles, regularized SPD."""
    alive = particles.alive
    if particles.unique_alive_count() < 2:
        raise DegeneracyError("need >= 2 unique alive particles to adapt the proposal")
    w = particles.weights[alive]
    w = w / w.sum()
    x = particles.thetas[alive]
    mean = w @ x
    centered = x - mean
    cov = (centered * w[:, None]).T @ centered
    p = cov.shape[0]
    cov[np.diag_indices_from(cov)] += 1e-10 * np.trace(cov) / p
    return cov


def effective_sample_size(weights) -> float:
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if total <= 0:
        return 0.0
    w = weights / total
    return 1.0 / float(w @ w)


def resample(
    particles: ParticleSet,
    rng: RngStream,
    threshold: float = 0.5,
    scheme: str = "systematic",
) -> ParticleSet:
    """Equal-weight resampling, triggered when ESS <= threshold * N.

    The trigger is inclusive: a uniform kernel with gamma = 1/2 leaves the
    surviving half equally weighted, which puts the ESS exactly on the
    boundary; without resampling there the dead half would never be
    replaced and the tolerance ladder stalls.
    """
    n = particles.n
    if effective_sample_size(particles.weights) > threshold * n * (1.0 + 1e-12):
        return particles
    if scheme == "systematic":
        positions = (rng.uniform() + np.arange(n)) / n
        idx = np.searchsorted(np.cumsum(particles.weights), positions, side="right")
        idx = np.minimum(idx, n - 1)
    elif scheme == "multinomial":
        idx = np.searchsorted(np.cumsum(particles.weights), rng.random(n), side="right")
        idx = np.minimum(idx, n - 1)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    h_vals = particles.h_vals[idx] if particles.h_vals is not None else None
    return ParticleSet(
        particles.thetas[idx], particles.deltas[idx], np.full(n, 1.0 / n), h_vals
    )


# ---------------------------------------------------------------------------
# Move phase
# ---------------------------------------------------------------------------

_STEP = {"oej": oej_mcmc_step, "ej": ej_mcmc_step}

# worker-pool state (set once per worker via the initializer)
_POOL_CTX = {}


def _move_cfg(cfg: SmcConfig, eps: float, prop_cov) -> SamplerConfig:
    return SamplerConfig(
        sampler="oej_mcmc" if cfg.move_sampler == "oej" else "ej_mcmc",
        kernel=cfg.kernel,
        eps=eps,
        prior=cfg.prior,
        proposal=ProposalSpec(prop_cov),
        n_iterations=0,
        delta_fn=cfg.delta_fn,
        h_fn=cfg.h_fn if cfg.move_sampler == "ej" else None,
        surrogate=None,
        quantile_a=None,
    )


def _escape_step(state: ChainState, cfg: SamplerConfig, rng: RngStream):
    """Move attempt from a state the surrogate-modified target assigns zero
    mass (its cached min{K(delta), K(h)} hit 0 after the tolerance shrank).

    This is the denominator-to-zero limit of the staged test: any proposal
    with positive modified density is accepted outright.  Null states carry
    no stationary mass, so this cannot disturb the invariant distribution.
    """
    theta_star = cfg.proposal.sample(state.theta, rng)
    if cfg.prior.logpdf(theta_star) == -math.inf:
        return state, IterationRecord(0, "early_reject_stage1", theta_star, None, None, 0)
    h_star = float(cfg.h_fn(theta_star)) if cfg.h_fn is not None else 0.0
    kern_h_star = kernel_eval(cfg.kernel, max(h_star, 0.0), cfg.eps)
    if kern_h_star <= 0.0:
        return state, IterationRecord(0, "early_reject_stage2", theta_star, h_star, None, 0)
    delta_star = cfg.delta_fn(theta_star, rng)
    kern_delta_star = kernel_eval(cfg.kernel, delta_star, cfg.eps)
    if kern_delta_star > 0.0:
        new = ChainState(theta_star, delta_star, h_star, kern_delta_star, kern_h_star)
        return new, IterationRecord(0, "accept", theta_star, h_star, delta_star, 1)
    rec = IterationRecord(
        0, "sim_reject", theta_star, h_star, delta_star, 1, math.isinf(delta_star)
    )
    return state, rec


def _move_one(move_cfg, moves, seed, key, r, i, theta, delta, h_val):
    """Apply ``moves`` MCMC steps to one particle; returns the new state
    plus compact outcome counters (early1, early2, accept, reject, sims)."""
    needs_h = move_cfg.sampler == "ej_mcmc"
    kern_delta = kernel_eval(move_cfg.kernel, float(delta), move_cfg.eps)
    kern_h = 1.0
    if needs_h:
        if math.isnan(h_val):
            h_val = float(move_cfg.h_fn(theta))
        kern_h = kernel_eval(move_cfg.kernel, max(h_val, 0.0), move_cfg.eps)
    else:
        h_val = 0.0
    state = ChainState(np.asarray(theta, dtype=float), float(delta), h_val, kern_delta, kern_h)
    step = _STEP["ej" if needs_h else "oej"]
    counts = np.zeros(5, dtype=np.int64)
    for m in range(moves):
        rng = RngStream(seed, key + (r, i, m))
        if min(state.kern_delta, state.kern_h) <= 0.0:
            state, rec = _escape_step(state, move_cfg, rng)
        else:
            state, rec = step(state, move_cfg, rng)
        if rec.outcome == "early_reject_stage1":
            counts[0] += 1
        elif rec.outcome == "early_reject_stage2":
            counts[1] += 1
        elif rec.outcome == "accept":
            counts[2] += 1
        else:
            counts[3] += 1
        counts[4] += rec.sim_increment
    return i, state.theta, state.delta, state.h_val, counts


def _pool_move(task):
    move_cfg, moves, seed, key = _POOL_CTX["args"]
    r, i, theta, delta, h_val = task
    return _move_one(move_cfg, moves, seed, key, r, i, theta, delta, h_val)


def _move_particles(move_cfg, moves, rng, tasks, workers):
    """Run the move phase, serially or on a fork pool.

    Each particle owns the substream (round, index, move), so the results
    are identical for any worker count or scheduling order.
    """
    if workers <= 1 or len(tasks) < 2 * workers:
        return [_move_one(move_cfg, moves, rng.seed, rng.key, *t) for t in tasks]
    _POOL_CTX["args"] = (move_cfg, moves, rng.seed, rng.key)
    ctx = multiprocessing.get_context("fork")
    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_pool_move, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------


def run_ejasmc(cfg: SmcConfig, rng: RngStream, workers: int = 1, _extra_stop=None) -> SmcResult:
    """Adaptive SMC: tolerance selection, reweighting, resampling, MCMC moves.

    Round 0 draws the particles from the prior (tolerance infinity, equal
    weights) with one simulation each.  Stops when a configured rule fires;
    degeneracy failures carry the partial per-round report on the raised
    exception (``exc.report``).
    """
    n = cfg.n_particles
    needs_h = cfg.move_sampler == "ej"

    thetas = np.empty((n, cfg.prior.dim))
    deltas = np.empty(n)
    for i in range(n):
        sub = rng.substream(0, i)
        thetas[i] = cfg.prior.sample(sub)
        deltas[i] = cfg.delta_fn(thetas[i], sub)
    weights = np.where(np.isfinite(deltas), 1.0, 0.0)
    if weights.sum() == 0:
        raise DegeneracyError("every initial simulation failed")
    weights = weights / weights.sum()
    h_vals = np.full(n, np.nan) if needs_h else None
    particles = ParticleSet(thetas, deltas, weights, h_vals)

    totals = {"sim": n, "pre": 0, "e1": 0, "e2": 0, "acc": 0, "rej": 0}
    rounds = []
    eps = math.inf
    r = 0
    while True:
        if cfg.sim_budget is not None and totals["sim"] >= cfg.sim_budget:
            break
        if cfg.target_eps is not None and eps <= cfg.target_eps:
            break
        if cfg.max_rounds is not None and r >= cfg.max_rounds:
            break
        if _extra_stop is not None and _extra_stop():
            break
        r += 1

        try:
            prop_cov = adapt_proposal_cov(particles)
            eps_new = select_epsilon(particles, cfg.gamma, cfg.kernel, eps)
            particles = reweight(particles, eps, eps_new, cfg.kernel)
        except DegeneracyError as exc:
            exc.report = rounds
            raise
        eps = eps_new
        particles = resample(
            particles, rng.substream(r, n), cfg.resample_threshold, cfg.resample_scheme
        )

        move_cfg = _move_cfg(cfg, eps, prop_cov)
        if needs_h:
            alive_idx = np.flatnonzero(particles.alive)
            for i in alive_idx:
                if math.isnan(particles.h_vals[i]):
                    particles.h_vals[i] = float(cfg.h_fn(particles.thetas[i]))
                    totals["pre"] += 1

        counts = np.zeros(5, dtype=np.int64)
        if cfg.moves_per_round > 0:
            alive_idx = np.flatnonzero(particles.alive)
            tasks = [
                (
                    r,
                    int(i),
                    particles.thetas[i],
                    particles.deltas[i],
                    particles.h_vals[i] if needs_h else 0.0,
                )
                for i in alive_idx
            ]
            results = _move_particles(move_cfg, cfg.moves_per_round, rng, tasks, workers)
            for i, theta, delta, h_val, c in results:
                particles.thetas[i] = theta
                particles.deltas[i] = delta
                if needs_h:
                    particles.h_vals[i] = h_val
                counts += c
            if needs_h:
                # one threshold prediction per move that reached stage 2
                totals["pre"] += int(counts[1] + counts[2] + counts[3])

        totals["e1"] += int(counts[0])
        totals["e2"] += int(counts[1])
        totals["acc"] += int(counts[2])
        totals["rej"] += int(counts[3])
        totals["sim"] += int(counts[4])
        moves_total = int(counts[:4].sum())
        rounds.append(
            RoundReport(
                round=r,
                eps=eps,
                unique_alive=particles.unique_alive_count(),
                accept_rate=(counts[2] / moves_total) if moves_total else 0.0,
                n_sim=int(counts[4]),
                n_early1=int(counts[0]),
                n_early2=int(counts[1]),
            )
        )

    return SmcResult(
        particles,
        rounds,
        n_sim=totals["sim"],
        n_pre=totals["pre"],
        n_early1=totals["e1"],
        n_early2=totals["e2"],
        n_accept=totals["acc"],
        n_move_reject=totals["rej"],
    )


# ---------------------------------------------------------------------------
# Training-data collection
# ---------------------------------------------------------------------------


class _RecordingDelta:
    """Wraps a delta function, recording every finite (theta, delta) pair."""

    def __init__(self, delta_fn):
        self.delta_fn = delta_fn
        self.thetas = []
        self.deltas = []

    def __call__(self, theta, rng) -> float:
        d = self.delta_fn(theta, rng)
        if math.isfinite(d):
            self.thetas.append(np.asarray(theta, dtype=float).copy())
            self.deltas.append(d)
        return d

    def __len__(self):
        return len(self.deltas)


def collect_training_data(cfg: SmcConfig, budget: int, rng: RngStream) -> DiscrepancySet:
    """Pilot SMC run (oej moves) recording every simulated (theta, delta).

    Collection spans initialization and the move phase, so the pairs
    concentrate where discrepancies are small.  Returns exactly ``budget``
    pairs, or fewer (with a warning) if the pilot's own stopping rules end
    the run first.
    """
    if budget < 5:
        raise ValueError("budget must be at least 5 (minimum GP training size)")
    recorder = _RecordingDelta(cfg.delta_fn)
    pilot = replace(cfg, delta_fn=recorder, move_sampler="oej", h_fn=None, surrogate=None)
    try:
        run_ejasmc(pilot, rng, _extra_stop=lambda: len(recorder) >= budget)
    except DegeneracyError as exc:
        warnings.warn(f"pilot run collapsed early: {exc}", RuntimeWarning)
    if len(recorder) < budget:
        warnings.warn(
            f"pilot run ended after {len(recorder)} of {budget} requested pairs",
            RuntimeWarning,
        )
    thetas = np.asarray(recorder.thetas[:budget])
    deltas = np.asarray(recorder.deltas[:budget])
    return DiscrepancySet(thetas, deltas)


def collect_prior_training(
    n: int, prior: PriorSpec, delta_fn, rng: RngStream
) -> DiscrepancySet:
    """(theta, delta) pairs from plain prior sampling (cheap-model pilots)."""
    if n < 5:
        raise ValueError("need at least 5 training pairs")
    thetas, deltas = [], []
    attempts = 0
    while len(deltas) < n and attempts < 10 * n:
        sub = rng.substream(attempts)
        theta = prior.sample(sub)
        d = delta_fn(theta, sub)
        attempts += 1
        if math.isfinite(d):
            thetas.append(theta)
            deltas.append(d)
    if len(deltas) < n:
        warnings.warn(f"only {len(deltas)} of {n} prior simulations succeeded", RuntimeWarning)
    return DiscrepancySet(np.asarray(thetas), np.asarray(deltas))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_report_csv(rounds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "eps", "unique_alive", "accept_rate", "n_sim", "n_early1", "n_early2"]
        )
        for rep in rounds:
            writer.writerow(
                [
                    rep.round,
                    f"{rep.eps:.17g}",
                    rep.unique_alive,
                    f"{rep.accept_rate:.17g}",
                    rep.n_sim,
                    rep.n_early1,
                    rep.n_early2,
                ]
            )


def save_particles_csv(particles: ParticleSet, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        p = particles.thetas.shape[1]
        writer.writerow([f"theta_{j + 1}" for j in range(p)] + ["delta", "weight"])
        for theta, delta, w in zip(particles.thetas, particles.deltas, particles.weights):
            writer.writerow(
                [f"{v:.17g}" for v in theta] + [f"{delta:.17g}", f"{w:.17g}"]
            )


def load_particles_csv(path) -> ParticleSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["delta", "weight"]:
            raise ValueError(f"{path}: not a particles file")
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows, dtype=float)
    return ParticleSet(arr[:, :-2], arr[:, -2], arr[:, -1])
