"""Metropolis-Hastings ABC samplers with a uniform per-iteration trace.

Three step kernels share one state/record format:

* ``abc_mcmc_step``  -- simulate at every in-support proposal, accept with
  the standard kernel-weighted MH ratio.
* ``oej_mcmc_step``  -- draw the uniform variate first and reject before
  simulating whenever it already exceeds the prior/proposal bound on the
  acceptance ratio.
* ``ej_mcmc_step``   -- two early-rejection stages: first the bound above
  (no surrogate call, no simulation), then the surrogate-informed bound
  using the threshold prediction h(theta*); only survivors simulate.

A single uniform draw w is shared across the stages of one iteration, so
each staged test accepts exactly when w is below the final acceptance
probability.  Failed simulations enter as delta = +inf, whose kernel value
0 forces a rejection instead of crashing the chain.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    InitializationFailure,
    KernelSpec,
    PriorSpec,
    ProposalSpec,
    RngStream,
    kernel_eval,
)

__all__ = [
    "ChainState",
    "IterationRecord",
    "SamplerConfig",
    "ChainRun",
    "acceptance_ratio",
    "oej_early_bound",
    "ej_early_bound",
    "pseudo_acceptance_ratio",
    "abc_mcmc_step",
    "oej_mcmc_step",
    "ej_mcmc_step",
    "run_chain",
    "initialize_chain",
    "save_trace_csv",
    "load_trace_csv",
    "save_samples_csv",
    "load_samples_csv",
]

SAMPLERS = ("abc_mcmc", "oej_mcmc", "ej_mcmc")


@dataclass
class ChainState:
    """Current chain position with cached kernel values.

    ``h_val``/``kern_h`` are 0.0/1.0 for the samplers that carry no
    surrogate, which makes the shared formulas below degenerate correctly.
    """

    theta: np.ndarray
    delta: float
    h_val: float
    kern_delta: float
    kern_h: float


@dataclass
class IterationRecord:
    iteration: int
    outcome: str  # early_reject_stage1 | early_reject_stage2 | sim_reject | accept
    proposed: np.ndarray
    h: float | None
    delta: float | None
    sim_increment: int
    sim_failed: bool = False


@dataclass
class SamplerConfig:
    """Everything one chain needs; ``delta_fn(theta, rng)`` wraps simulator,
    discrepancy and observed data."""

    sampler: str
    kernel: KernelSpec
    eps: float
    prior: PriorSpec
    proposal: ProposalSpec
    n_iterations: int
    delta_fn: object
    init_theta: np.ndarray | None = None
    surrogate: object = None  # fitted GP (ej_mcmc)
    quantile_a: float | None = None
    h_fn: object = None  # overrides surrogate+quantile_a when given
    init_retry_cap: int = 10_000

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; choose from {SAMPLERS}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        if self.sampler == "ej_mcmc" and self.h_fn is None:
            if self.surrogate is None or self.quantile_a is None:
                raise ValueError("ej_mcmc needs a fitted surrogate and quantile level a")
            from .gp import h_function

            self.h_fn = h_function(self.surrogate, self.quantile_a)


# ---------------------------------------------------------------------------
# Acceptance-probability algebra (shared by steps and property tests)
# ---------------------------------------------------------------------------


def _log_prior_proposal_ratio(cfg: SamplerConfig, theta_n, theta_star) -> float:
    """log of pi(theta*) q(theta_n | theta*) / (pi(theta_n) q(theta* | theta_n))."""
    lp_star = cfg.prior.logpdf(theta_star)
    if lp_star == -math.inf:
        return -math.inf
    return (
        lp_star
        - cfg.prior.logpdf(theta_n)
        + cfg.proposal.logpdf(theta_n, theta_star)
        - cfg.proposal.logpdf(theta_star, theta_n)
    )


def acceptance_ratio(ratio: float, kern_delta_star: float, kern_delta_n: float) -> float:
    """Plain MH acceptance probability (kernel-weighted)."""
    return min(1.0, ratio * kern_delta_star / kern_delta_n)


def oej_early_bound(ratio: float, kern_delta_n: float) -> float:
    """Upper bound on the acceptance ratio that needs no simulation."""
    return ratio / kern_delta_n


def ej_early_bound(
    ratio: float, kern_h_star: float, kern_delta_n: float, kern_h_n: float
) -> float:
    """Surrogate-informed bound: still free of Delta(x*, y)."""
    return ratio * kern_h_star / min(kern_delta_n, kern_h_n)


def pseudo_acceptance_ratio(
    ratio: float,
    kern_delta_star: float,
    kern_h_star: float,
    kern_delta_n: float,
    kern_h_n: float,
) -> float:
    """Pseudo MH acceptance probability with min{K(Delta), K(h)} terms."""
    return min(
        1.0, ratio * min(kern_delta_star, kern_h_star) / min(kern_delta_n, kern_h_n)
    )


def _kern_h(cfg: SamplerConfig, h_val: float) -> float:
    # the threshold prediction may dip below zero; a negative predicted
    # discrepancy means "certainly inside the tolerance", i.e. kernel value 1
    return kernel_eval(cfg.kernel, max(float(h_val), 0.0), cfg.eps)


# ---------------------------------------------------------------------------
# Step kernels
# ---------------------------------------------------------------------------


def abc_mcmc_step(state: ChainState, cfg: SamplerConfig, rng: RngStream):
    """One plain ABC-MCMC iteration: always simulates inside the support.

    The uniform variate is drawn before the simulation (they are
    independent, so the order is immaterial distributionally); this keeps
    the three samplers exactly coupled on a shared random stream.
    """
    theta_star = cfg.proposal.sample(state.theta, rng)
    log_ratio = _log_prior_proposal_ratio(cfg, state.theta, theta_star)
    if log_ratio == -math.inf:
        rec = IterationRecord(0, "early_reject_stage1", theta_star, None, None, 0)
        return state, rec

    w = rng.uniform()
    delta_star = cfg.delta_fn(theta_star, rng)
    failed = math.isinf(delta_star)
    kern_star = kernel_eval(cfg.kernel, delta_star, cfg.eps)
    alpha = acceptance_ratio(math.exp(log_ratio), kern_star, state.kern_delta)
    if w < alpha:
        new = ChainState(theta_star, delta_star, 0.0, kern_star, 1.0)
        return new, IterationRecord(0, "accept", theta_star, None, delta_star, 1)
    return state, IterationRecord(0, "sim_reject", theta_star, None, delta_star, 1, failed)


def oej_mcmc_step(state: ChainState, cfg: SamplerConfig, rng: RngStream):
    """Early rejection from the prior/proposal bound alone."""
    theta_star = cfg.proposal.sample(state.theta, rng)
    log_ratio = _log_prior_proposal_ratio(cfg, state.theta, theta_star)
    if log_ratio == -math.inf:
        return state, IterationRecord(0, "early_reject_stage1", theta_star, None, None, 0)

    w = rng.uniform()
    bound = oej_early_bound(math.exp(log_ratio), state.kern_delta)
    if w > bound:
        return state, IterationRecord(0, "early_reject_stage1", theta_star, None, None, 0)

    delta_star = cfg.delta_fn(theta_star, rng)
    failed = math.isinf(delta_star)
    kern_star = kernel_eval(cfg.kernel, delta_star, cfg.eps)
    alpha = acceptance_ratio(math.exp(log_ratio), kern_star, state.kern_delta)
    if w < alpha:
        new = ChainState(theta_star, delta_star, 0.0, kern_star, 1.0)
        return new, IterationRecord(0, "accept", theta_star, None, delta_star, 1)
    return state, IterationRecord(0, "sim_reject", theta_star, None, delta_star, 1, failed)


def ej_mcmc_step(state: ChainState, cfg: SamplerConfig, rng: RngStream):
    """One iteration of the surrogate-based early-rejection sampler.

    Stage 1 needs neither the surrogate nor the simulator; stage 2 costs
    one surrogate prediction; only stage 3 simulates.  The one uniform
    draw w is reused, so acceptance is exactly w < pseudo-acceptance.
    """
    theta_star = cfg.proposal.sample(state.theta, rng)
    log_ratio = _log_prior_proposal_ratio(cfg, state.theta, theta_star)
    if log_ratio == -math.inf:
        return state, IterationRecord(0, "early_reject_stage1", theta_star, None, None, 0)

    w = rng.uniform()
    ratio = math.exp(log_ratio)
    denom = min(state.kern_delta, state.kern_h)
    if not w < ratio / denom:
        return state, IterationRecord(0, "early_reject_stage1", theta_star, None, None, 0)

    h_star = float(cfg.h_fn(theta_star))
    kern_h_star = _kern_h(cfg, h_star)
    if not w < ej_early_bound(ratio, kern_h_star, state.kern_delta, state.kern_h):
        return state, IterationRecord(0, "early_reject_stage2", theta_star, h_star, None, 0)

    delta_star = cfg.delta_fn(theta_star, rng)
    failed = math.isinf(delta_star)
    kern_delta_star = kernel_eval(cfg.kernel, delta_star, cfg.eps)
    alpha = pseudo_acceptance_ratio(
        ratio, kern_delta_star, kern_h_star, state.kern_delta, state.kern_h
    )
    if w < alpha:
        new = ChainState(theta_star, delta_star, h_star, kern_delta_star, kern_h_star)
        return new, IterationRecord(0, "accept", theta_star, h_star, delta_star, 1)
    return state, IterationRecord(0, "sim_reject", theta_star, h_star, delta_star, 1, failed)


_STEPS = {"abc_mcmc": abc_mcmc_step, "oej_mcmc": oej_mcmc_step, "ej_mcmc": ej_mcmc_step}


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------


@dataclass
class ChainRun:
    samples: np.ndarray  # (N, p) post-move states
    trace: list
    init_theta: np.ndarray | None = None
    init_sims: int = 0


def initialize_chain(cfg: SamplerConfig, rng: RngStream):
    """Find a starting state with positive kernel values.

    Tries ``cfg.init_theta`` first (if set), then prior draws, simulating at
    each candidate until K_eps(Delta_0) > 0 and, for the surrogate sampler,
    K_eps(h(theta_0)) > 0; gives up after ``init_retry_cap`` attempts.
    Returns (state, simulation count spent).
    """
    needs_h = cfg.sampler == "ej_mcmc"
    sims = 0
    for attempt in range(cfg.init_retry_cap):
        if attempt == 0 and cfg.init_theta is not None:
            theta0 = np.asarray(cfg.init_theta, dtype=float)
            if cfg.prior.logpdf(theta0) == -math.inf:
                raise ValueError("init_theta lies outside the prior support")
        else:
            theta0 = cfg.prior.sample(rng)
        h0, kern_h0 = 0.0, 1.0
        if needs_h:
            h0 = float(cfg.h_fn(theta0))
            kern_h0 = _kern_h(cfg, h0)
            if kern_h0 <= 0.0:
                continue
        delta0 = cfg.delta_fn(theta0, rng)
        sims += 1
        kern_delta0 = kernel_eval(cfg.kernel, delta0, cfg.eps)
        if kern_delta0 > 0.0:
            return ChainState(theta0, delta0, h0, kern_delta0, kern_h0), sims
    raise InitializationFailure(
        f"no valid initial state within {cfg.init_retry_cap} attempts (eps={cfg.eps})"
    )


def run_chain(cfg: SamplerConfig, rng: RngStream) -> ChainRun:
    """Run ``cfg.n_iterations`` steps; returns post-move samples and the trace."""
    if cfg.n_iterations == 0:
        return ChainRun(np.empty((0, cfg.prior.dim)), [])

    step = _STEPS[cfg.sampler]
    state, init_sims = initialize_chain(cfg, rng)
    init_theta = state.theta.copy()
    samples = np.empty((cfg.n_iterations, state.theta.shape[0]))
    trace = []
    for n in range(cfg.n_iterations):
        state, rec = step(state, cfg, rng)
        rec.iteration = n
        samples[n] = state.theta
        trace.append(rec)
    return ChainRun(samples, trace, init_theta, init_sims)


# ---------------------------------------------------------------------------
# Trace / sample persistence
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.17g}"


def save_trace_csv(trace, path, dim: int):
    """Write iteration,outcome,theta_1..theta_p,h,delta,sim rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "outcome"]
            + [f"theta_{j + 1}" for j in range(dim)]
            + ["h", "delta", "sim"]
        )
        for rec in trace:
            writer.writerow(
                [rec.iteration, rec.outcome]
                + [f"{v:.17g}" for v in rec.proposed]
                + [_fmt(rec.h), _fmt(rec.delta), rec.sim_increment]
            )


def load_trace_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["iteration", "outcome"] or header[-3:] != ["h", "delta", "sim"]:
            raise ValueError(f"{path}: not a trace file")
        p = len(header) - 5
        for row in reader:
            records.append(
                IterationRecord(
                    iteration=int(row[0]),
                    outcome=row[1],
                    proposed=np.array([float(v) for v in row[2 : 2 + p]]),
                    h=float(row[2 + p]) if row[2 + p] else None,
                    delta=float(row[3 + p]) if row[3 + p] else None,
                    sim_increment=int(row[4 + p]),
                )
            )
    return records


def save_samples_csv(samples, path):
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{j + 1}" for j in range(samples.shape[1])])
        for row in samples:
            writer.writerow([f"{v:.17g}" for v in row])


def load_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or not header[0].startswith("theta_"):
            raise ValueError(f"{path}: not a samples file")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.asarray(rows, dtype=float).reshape(len(rows), len(header))
