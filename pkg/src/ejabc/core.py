"""Shared domain types for likelihood-free inference.

Parameter vectors and datasets are plain numpy arrays validated by the
``param_vector`` / ``dataset`` constructors.  Kernels, priors and proposals
are small frozen dataclasses; every stochastic component draws from an
:class:`RngStream`, a counter-based named stream that makes whole pipelines
replayable bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SimulationFailure",
    "NumericalFailure",
    "DegeneracyError",
    "InitializationFailure",
    "ConfigError",
    "param_vector",
    "dataset",
    "KernelSpec",
    "KERNEL_FAMILIES",
    "kernel_eval",
    "rmse_discrepancy",
    "abs_discrepancy",
    "NormalizedRmse",
    "make_discrepancy",
    "Marginal",
    "PriorSpec",
    "prior_logdensity",
    "ProposalSpec",
    "RngStream",
]

_LOG_2PI = math.log(2.0 * math.pi)


class SimulationFailure(RuntimeError):
    """A simulator could not produce a finite dataset for the given draw."""


class NumericalFailure(RuntimeError):
    """A linear-algebra step failed beyond recoverable jitter."""


class DegeneracyError(RuntimeError):
    """A particle system has collapsed (too few alive/unique particles)."""


class InitializationFailure(RuntimeError):
    """No valid starting state was found within the retry cap."""


class ConfigError(ValueError):
    """An experiment configuration failed validation; message names the field."""


def param_vector(values, dim=None) -> np.ndarray:
    """Validate and return a 1-d float parameter vector.

    Raises ValueError if entries are non-finite or the length does not
    match ``dim`` when given.
    """
    theta = np.atleast_1d(np.asarray(values, dtype=float))
    if theta.ndim != 1:
        raise ValueError("parameter vector must be one-dimensional")
    if dim is not None and theta.shape[0] != dim:
        raise ValueError(f"parameter vector has length {theta.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector entries must be finite")
    return theta


def dataset(values, shape=None) -> np.ndarray:
    """Validate and return a d x T float data array (rows = coordinates)."""
    x = np.atleast_2d(np.asarray(values, dtype=float))
    if x.ndim != 2:
        raise ValueError("dataset must be a d x T array")
    if shape is not None and x.shape != tuple(shape):
        raise ValueError(f"dataset has shape {x.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("dataset entries must be finite")
    return x


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

# Base profiles K(z)/K(0) on z in [0, 1]; all compactly supported so that
# K_eps(u) = 0 for u > eps, which is what makes early rejection possible.
_KERNEL_PROFILES = {
    "uniform": lambda z: np.ones_like(z),
    "epanechnikov": lambda z: 1.0 - z**2,
    "triangle": lambda z: 1.0 - z,
    "quartic": lambda z: (1.0 - z**2) ** 2,
    "triweight": lambda z: (1.0 - z**2) ** 3,
    "tricube": lambda z: (1.0 - z**3) ** 3,
}

KERNEL_FAMILIES = tuple(sorted(_KERNEL_PROFILES))


@dataclass(frozen=True)
class KernelSpec:
    """Compact-support smoothing kernel, normalized so K_eps(0) = 1."""

    family: str = "uniform"

    def __post_init__(self):
        if self.family not in _KERNEL_PROFILES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; choose from {KERNEL_FAMILIES}"
            )

    def __call__(self, u, eps):
        return kernel_eval(self, u, eps)


def kernel_eval(kernel: KernelSpec, u, eps):
    """Evaluate K_eps(u) = K(u/eps)/K(0) for scalar or array ``u``.

    Exactly 1 at u = 0 and exactly 0 for u > eps.  The uniform kernel is the
    indicator of u <= eps; the other families vanish continuously at eps.
    ``u = +inf`` is allowed and yields 0 (failed-simulation sentinel);
    negative, NaN or -inf values are rejected.
    """
    if isinstance(u, (float, int)):
        # scalar fast path; samplers call this once or twice per iteration
        if math.isnan(u) or u < 0:
            raise ValueError("kernel argument u must be >= 0 and not NaN")
        if not eps > 0:
            raise ValueError("kernel tolerance eps must be positive")
        if math.isinf(u) or u > eps:
            return 0.0
        z = 0.0 if math.isinf(eps) else u / eps
        family = kernel.family
        if family == "uniform":
            return 1.0
        if family == "epanechnikov":
            return max(1.0 - z * z, 0.0)
        if family == "triangle":
            return max(1.0 - z, 0.0)
        if family == "quartic":
            return max((1.0 - z * z) ** 2, 0.0)
        if family == "triweight":
            return max((1.0 - z * z) ** 3, 0.0)
        return max((1.0 - z**3) ** 3, 0.0)  # tricube

    u_arr = np.asarray(u, dtype=float)
    if np.any(np.isnan(u_arr)) or np.any(u_arr < 0):
        raise ValueError("kernel argument u must be >= 0 and not NaN")
    if not eps > 0:
        raise ValueError("kernel tolerance eps must be positive")

    if math.isinf(eps):
        out = np.where(np.isinf(u_arr), 0.0, 1.0)
        return float(out) if np.isscalar(u) or u_arr.ndim == 0 else out

    with np.errstate(invalid="ignore"):
        z = u_arr / eps
    inside = u_arr <= eps
    profile = _KERNEL_PROFILES[kernel.family]
    out = np.where(inside, profile(np.where(inside, z, 0.0)), 0.0)
    if kernel.family != "uniform":
        # continuous families are zero on the boundary z = 1 up to rounding
        out = np.clip(out, 0.0, 1.0)
    return float(out) if np.isscalar(u) or u_arr.ndim == 0 else out


# ---------------------------------------------------------------------------
# Discrepancies
# ---------------------------------------------------------------------------


def rmse_discrepancy(x, y) -> float:
    """Root mean squared error over all d*T entries of two same-shape datasets."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def abs_discrepancy(x, y) -> float:
    """Absolute difference between two scalar (1x1) datasets."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != 1 or y.size != 1:
        raise ValueError("abs_discrepancy requires scalar (1x1) datasets")
    return float(abs(x.reshape(()) - y.reshape(())))


class NormalizedRmse:
    """RMSE after per-coordinate min-max scaling fixed by the observed data.

    Both arguments are scaled with the observed data's per-row (min, max)
    before the RMSE, so tolerances live on a [0, 1]-ish scale regardless of
    the raw units of each coordinate.
    """

    def __init__(self, observed):
        obs = dataset(observed)
        self.lo = obs.min(axis=1, keepdims=True)
        span = obs.max(axis=1, keepdims=True) - self.lo
        span[span <= 0] = 1.0
        self.span = span

    def __call__(self, x, y) -> float:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
        return rmse_discrepancy((x - self.lo) / self.span, (y - self.lo) / self.span)


def make_discrepancy(name: str, observed=None):
    """Return a discrepancy callable (x, y) -> float by name.

    Names: ``rmse``, ``abs``, ``normalized_rmse`` (requires ``observed`` for
    the scaling constants).
    """
    if name == "rmse":
        return rmse_discrepancy
    if name == "abs":
        return abs_discrepancy
    if name == "normalized_rmse":
        if observed is None:
            raise ValueError("normalized_rmse needs the observed dataset")
        return NormalizedRmse(observed)
    raise ValueError(f"unknown discrepancy {name!r}")


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Marginal:
    """One coordinate's prior: uniform(low, high), normal(mean, sd) or
    lognormal(mean, sd) where (mean, sd) parameterize log X."""

    dist: str
    a: float
    b: float

    def __post_init__(self):
        if self.dist not in ("uniform", "normal", "lognormal"):
            raise ValueError(f"unknown marginal distribution {self.dist!r}")
        if self.dist == "uniform" and not self.a < self.b:
            raise ValueError("uniform marginal requires low < high")
        if self.dist in ("normal", "lognormal") and not self.b > 0:
            raise ValueError("scale parameter must be positive")

    def logpdf(self, x: float) -> float:
        if self.dist == "uniform":
            return -math.log(self.b - self.a) if self.a <= x <= self.b else -math.inf
        if self.dist == "normal":
            z = (x - self.a) / self.b
            return -0.5 * z * z - math.log(self.b) - 0.5 * _LOG_2PI
        if x <= 0:
            return -math.inf
        lx = math.log(x)
        z = (lx - self.a) / self.b
        return -0.5 * z * z - math.log(self.b) - 0.5 * _LOG_2PI - lx

    def sample(self, rng: "RngStream") -> float:
        if self.dist == "uniform":
            return float(rng.uniform(self.a, self.b))
        if self.dist == "normal":
            return float(rng.normal(self.a, self.b))
        return float(math.exp(rng.normal(self.a, self.b)))


@dataclass(frozen=True)
class PriorSpec:
    """Product prior with independent coordinate marginals."""

    marginals: tuple

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if not self.marginals:
            raise ValueError("prior needs at least one marginal")

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def logpdf(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta has shape {theta.shape}, prior dimension is {self.dim}")
        total = 0.0
        for m, x in zip(self.marginals, theta):
            lp = m.logpdf(float(x))
            if lp == -math.inf:
                return -math.inf
            total += lp
        return total

    def sample(self, rng: "RngStream") -> np.ndarray:
        return np.array([m.sample(rng) for m in self.marginals])


def prior_logdensity(prior: PriorSpec, theta) -> float:
    """Sum of coordinate log-densities; -inf outside the support."""
    return prior.logpdf(theta)


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------


class ProposalSpec:
    """Gaussian random-walk proposal with a fixed SPD covariance."""

    def __init__(self, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("proposal covariance must be square")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("proposal covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("proposal covariance must be positive-definite") from exc
        self.cov = cov
        self.dim = cov.shape[0]
        self._log_norm = -0.5 * (
            self.dim * _LOG_2PI + 2.0 * np.sum(np.log(np.diag(self._chol)))
        )

    @classmethod
    def from_sd(cls, sd) -> "ProposalSpec":
        """Diagonal covariance from per-coordinate standard deviations."""
        sd = np.atleast_1d(np.asarray(sd, dtype=float))
        return cls(np.diag(sd**2))

    def sample(self, theta, rng: "RngStream") -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return theta + self._chol @ rng.standard_normal(self.dim)

    def logpdf(self, to, frm) -> float:
        d = np.asarray(to, dtype=float) - np.asarray(frm, dtype=float)
        z = np.linalg.solve(self._chol, d)
        return float(self._log_norm - 0.5 * z @ z)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class RngStream:
    """Named counter-based random stream.

    Built on the Philox generator keyed by ``(seed, key)`` where ``key`` is a
    tuple of stream ids; the same (seed, key, call sequence) always reproduces
    the same draws, and distinct keys give statistically independent streams.
    ``substream`` derives a child stream, which is how chains, particles and
    restarts each get their own reproducible randomness.
    """

    def __init__(self, seed: int, key=()):
        if isinstance(key, int):
            key = (key,)
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def substream(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(i) for i in ids))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"

    # draw helpers, delegated to the underlying generator
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)
