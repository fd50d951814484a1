"""Metrics and convergence checks for ABC runs.

Density comparisons go through :class:`DensityOnGrid`: estimate with
``kde_density``, compare with ``l1_distance``.  ``toy_posterior_oracle``
gives the closed-form ABC posterior of the built-in mixture model so toy
runs can be scored against an analytic reference instead of a second
sampler.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

__all__ = [
    "DensityOnGrid",
    "EffSummary",
    "kde_density",
    "l1_distance",
    "efficiency",
    "gelman_rubin",
    "toy_posterior_oracle",
    "toy_accept_probability",
    "silverman_bandwidth",
]


@dataclass
class DensityOnGrid:
    """A density tabulated on a strictly increasing 1-d grid."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.ndim != 1 or self.grid.shape != self.values.shape:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def normalized(self) -> "DensityOnGrid":
        z = self.integral()
        if z <= 0:
            raise ValueError("cannot normalize a zero density")
        return DensityOnGrid(self.grid, self.values / z)


def silverman_bandwidth(samples: np.ndarray) -> float:
    """Silverman's rule of thumb, 1.06 * sd * n^(-1/5)."""
    samples = np.asarray(samples, dtype=float)
    sd = float(np.std(samples))
    return 1.06 * sd * samples.size ** (-0.2)


def kde_density(samples, grid, bandwidth=None, weights=None) -> DensityOnGrid:
    """Gaussian-kernel density estimate of ``samples`` on ``grid``.

    Parameters
    ----------
    samples : array-like
        At least two real draws.
    grid : array-like
        Strictly increasing evaluation points; should span the sample
        range plus a few bandwidths so the estimate integrates to ~1.
    bandwidth : float, optional
        Kernel standard deviation; Silverman's rule when omitted.
    weights : array-like, optional
        Nonnegative sample weights (normalized internally); equal when
        omitted.

    All samples identical is degenerate: a warning is emitted and the
    returned density is a unit-mass spike at the nearest grid cell.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    grid = np.asarray(grid, dtype=float)
    if samples.size < 2:
        raise ValueError("need at least two samples for a density estimate")
    if weights is not None:
        weights = np.asarray(weights, dtype=float).ravel()
        if weights.shape != samples.shape or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("weights must be nonnegative with a positive sum")
        weights = weights / weights.sum()

    if bandwidth is None:
        bandwidth = silverman_bandwidth(samples)
    if bandwidth <= 0 or np.std(samples) == 0:
        warnings.warn("zero sample variance: returning a point-mass spike", RuntimeWarning)
        values = np.zeros_like(grid)
        i = int(np.argmin(np.abs(grid - samples[0])))
        cell = np.gradient(grid)[i]
        values[i] = 1.0 / cell
        return DensityOnGrid(grid, values)

    norm = 1.0 / (bandwidth * math.sqrt(2.0 * math.pi))
    values = np.zeros_like(grid)
    # chunk over samples to keep the (n x grid) kernel matrix bounded
    step = max(1, int(2e7) // max(grid.size, 1))
    for start in range(0, samples.size, step):
        block = samples[start : start + step, None]
        z = (grid[None, :] - block) / bandwidth
        k = np.exp(-0.5 * z * z)
        if weights is None:
            values += k.sum(axis=0) / samples.size
        else:
            values += weights[start : start + step] @ k
    return DensityOnGrid(grid, norm * values)


def l1_distance(f: DensityOnGrid, g: DensityOnGrid) -> float:
    """Trapezoid integral of |f - g| on the shared grid (0 to 2 for densities)."""
    if f.grid.shape != g.grid.shape or not np.array_equal(f.grid, g.grid):
        raise ValueError("densities must share the same grid")
    return float(np.trapezoid(np.abs(f.values - g.values), f.grid))


# ---------------------------------------------------------------------------
# Sampler-trace summaries
# ---------------------------------------------------------------------------

_EARLY = ("early_reject_stage1", "early_reject_stage2")


def _outcome(rec) -> str:
    return rec if isinstance(rec, str) else rec.outcome


@dataclass
class EffSummary:
    """Counters of one sampler trace (see the per-iteration trace format)."""

    n_early1: int
    n_early2: int
    n_sim_reject: int
    n_accept: int
    n_sim: int
    n_pre: int

    @property
    def n_early(self) -> int:
        return self.n_early1 + self.n_early2

    @property
    def n_iterations(self) -> int:
        return self.n_early + self.n_sim_reject + self.n_accept

    @classmethod
    def from_trace(cls, trace) -> "EffSummary":
        n1 = n2 = nr = na = ns = npre = 0
        for rec in trace:
            out = _outcome(rec)
            if out == "early_reject_stage1":
                n1 += 1
            elif out == "early_reject_stage2":
                n2 += 1
            elif out == "sim_reject":
                nr += 1
            elif out == "accept":
                na += 1
            else:
                raise ValueError(f"unknown trace outcome {out!r}")
            if not isinstance(rec, str):
                ns += rec.sim_increment
                npre += rec.h is not None
        return cls(n1, n2, nr, na, ns, npre)


def efficiency(trace) -> float:
    """Fraction of all rejected proposals that were rejected before simulating.

    0/0 (every proposal accepted) is defined as 0.
    """
    trace = list(trace)
    if not trace:
        raise ValueError("trace is empty")
    early = sum(1 for rec in trace if _outcome(rec) in _EARLY)
    rejected = sum(1 for rec in trace if _outcome(rec) != "accept")
    return early / rejected if rejected else 0.0


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for >= 2 equal-length 1-d chains."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise ValueError("need >= 2 equal-length chains")
    m, n = chains.shape
    if n < 10:
        raise ValueError("chains must have length >= 10")
    within = chains.var(axis=1, ddof=1)
    w = float(within.mean())
    if w == 0.0:
        raise ValueError("zero within-chain variance: statistic undefined")
    means = chains.mean(axis=1)
    b = n * float(means.var(ddof=1))
    var_plus = (n - 1) / n * w + b / n
    return math.sqrt(var_plus / w)


# ---------------------------------------------------------------------------
# Analytic oracle for the built-in mixture model
# ---------------------------------------------------------------------------

_TOY_SD = math.sqrt(0.6)
_TOY_OBS = 1.0
_TOY_LO, _TOY_HI = -6.0, 6.0


def toy_accept_probability(theta, eps: float):
    """P(|x - y0| <= eps | theta) for the built-in two-component mixture.

    Closed form via normal CDFs; the independent check for anything the
    samplers claim about the toy model.
    """
    theta = np.asarray(theta, dtype=float)
    hi, lo = _TOY_OBS + eps, _TOY_OBS - eps
    p = 0.0
    for mean_shift in (2.0, -1.0):
        mu = theta + mean_shift
        p = p + 0.5 * (ndtr((hi - mu) / _TOY_SD) - ndtr((lo - mu) / _TOY_SD))
    return p


def toy_posterior_oracle(grid, eps: float) -> DensityOnGrid:
    """Uniform-kernel ABC posterior of the toy mixture on its U(-6, 6) prior.

    Density proportional to the prior times the acceptance probability,
    normalized by trapezoid quadrature on ``grid``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    grid = np.asarray(grid, dtype=float)
    support = (grid >= _TOY_LO) & (grid <= _TOY_HI)
    values = np.where(support, toy_accept_probability(grid, eps), 0.0)
    return DensityOnGrid(grid, values).normalized()
