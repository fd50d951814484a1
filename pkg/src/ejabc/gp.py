"""Gaussian-process regression of simulation discrepancies on parameters.

The surrogate is a squared-exponential ARD GP with a fitted constant mean,
trained on (theta, delta) pairs.  It backs three things:

* ``gp_predict`` -- predictive mean/variance of the discrepancy at theta,
* ``h_quantile`` -- the lower a-quantile prediction used as the early
  rejection threshold function h(theta),
* ``gp_abc_logdensity`` -- the surrogate-only ABC posterior density
  log pi(theta) + log P(Delta_theta <= eps).

Hyperparameters are chosen by maximizing the log marginal likelihood with
multi-start Nelder-Mead searches on log-scale parameters; the constant mean
is profiled out analytically.  Everything is deterministic given the
training data and the RngStream driving the restarts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import log_ndtr, ndtri

from .core import NumericalFailure, PriorSpec, RngStream, param_vector

__all__ = [
    "DiscrepancySet",
    "GPConfig",
    "GPModel",
    "fit_gp",
    "gp_predict",
    "h_quantile",
    "h_function",
    "gp_abc_logdensity",
    "false_rejection_rate",
    "save_training_csv",
    "load_training_csv",
    "save_gp",
    "load_gp",
]

_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass
class DiscrepancySet:
    """Training pairs (theta_i, delta_i) with finite nonnegative deltas."""

    thetas: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.deltas = np.asarray(self.deltas, dtype=float).ravel()
        if self.thetas.shape[0] != self.deltas.shape[0]:
            raise ValueError("thetas and deltas must have the same length")
        if not np.all(np.isfinite(self.thetas)):
            raise ValueError("training thetas must be finite")
        if not np.all(np.isfinite(self.deltas)) or np.any(self.deltas < 0):
            raise ValueError("training deltas must be finite and >= 0")

    @property
    def size(self) -> int:
        return self.deltas.shape[0]

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]


@dataclass(frozen=True)
class GPConfig:
    """Fitting options for the discrepancy GP."""

    log_discrepancy: bool = False
    standardize_inputs: bool = True
    restarts: int = 5
    noise_floor_factor: float = 1e-8
    max_iter: int = 400


class GPModel:
    """Fitted GP: hyperparameters plus cached Cholesky factor and weights.

    Immutable after construction; predictions are safe to run concurrently.
    """

    def __init__(
        self,
        thetas,
        targets,
        lengthscales,
        signal_var,
        noise_var,
        mean_value,
        x_mean,
        x_sd,
        config: GPConfig,
        jitter: float = 0.0,
    ):
        self.thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        self.targets = np.asarray(targets, dtype=float).ravel()
        self.lengthscales = np.asarray(lengthscales, dtype=float).ravel()
        self.signal_var = float(signal_var)
        self.noise_var = float(noise_var)
        self.mean_value = float(mean_value)
        self.x_mean = np.asarray(x_mean, dtype=float).ravel()
        self.x_sd = np.asarray(x_sd, dtype=float).ravel()
        self.config = config
        self.jitter = float(jitter)

        self._X = (self.thetas - self.x_mean) / self.x_sd
        n = self.targets.shape[0]
        if n:
            K = self._kernel(self._X, self._X)
            K[np.diag_indices_from(K)] += self.noise_var + self.jitter
            try:
                self._L = np.linalg.cholesky(K)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailure("covariance matrix is not positive-definite") from exc
            resid = self.targets - self.mean_value
            self._alpha = solve_triangular(
                self._L.T,
                solve_triangular(self._L, resid, lower=True, check_finite=False),
                lower=False,
                check_finite=False,
            )
        else:
            self._L = np.zeros((0, 0))
            self._alpha = np.zeros(0)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_hyperparameters(
        cls,
        thetas,
        deltas,
        lengthscales,
        signal_var,
        noise_var,
        mean_value=0.0,
        log_discrepancy=False,
    ) -> "GPModel":
        """Build a model with given hyperparameters and raw inputs (no
        standardization, no fitting); mainly for analytic checks."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        deltas = np.asarray(deltas, dtype=float).ravel()
        targets = np.log(deltas) if log_discrepancy else deltas
        p = thetas.shape[1] if thetas.size else np.asarray(lengthscales).size
        cfg = GPConfig(log_discrepancy=log_discrepancy, standardize_inputs=False)
        return cls(
            thetas.reshape(-1, p),
            targets,
            np.broadcast_to(np.asarray(lengthscales, dtype=float), (p,)).copy(),
            signal_var,
            noise_var,
            mean_value,
            np.zeros(p),
            np.ones(p),
            cfg,
        )

    # -- covariance ---------------------------------------------------------

    def _kernel(self, A, B):
        d = A[:, None, :] / self.lengthscales - B[None, :, :] / self.lengthscales
        return self.signal_var * np.exp(-0.5 * np.sum(d * d, axis=2))

    def _cross_cov(self, Xq):
        if self.targets.shape[0] == 0:
            return np.zeros((Xq.shape[0], 0))
        return self._kernel(Xq, self._X)

    # -- prediction ---------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.x_mean.shape[0]

    def predict(self, theta):
        """Predictive mean and variance (on the modeled target scale)."""
        mu, v = self.predict_batch(np.asarray(theta, dtype=float)[None, :])
        return float(mu[0]), float(v[0])

    def predict_batch(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self.dim:
            raise ValueError(f"theta has dimension {thetas.shape[1]}, expected {self.dim}")
        Xq = (thetas - self.x_mean) / self.x_sd
        ks = self._cross_cov(Xq)
        if self.targets.shape[0] == 0:
            mu = np.full(Xq.shape[0], self.mean_value)
            return mu, np.full(Xq.shape[0], self.signal_var)
        mu = self.mean_value + ks @ self._alpha
        w = solve_triangular(self._L, ks.T, lower=True, check_finite=False)
        v = self.signal_var - np.sum(w * w, axis=0)
        return mu, np.maximum(v, 0.0)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _profiled_nll(z, sqdiffs, y, p):
    """Negative log marginal likelihood with the constant mean profiled out.

    ``sqdiffs`` holds the per-dimension squared input differences (p, n, n),
    precomputed once so each evaluation only rescales and factors.
    """
    inv_l2 = np.exp(-2.0 * z[:p])
    signal_var = math.exp(z[p])
    noise_var = math.exp(z[p + 1])
    n = y.shape[0]
    K = signal_var * np.exp(-0.5 * np.tensordot(inv_l2, sqdiffs, axes=1))
    K[np.diag_indices_from(K)] += noise_var
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return 1e25
    ones = np.ones(n)
    Li_y = solve_triangular(L, y, lower=True)
    Li_1 = solve_triangular(L, ones, lower=True)
    denom = Li_1 @ Li_1
    mean = (Li_1 @ Li_y) / denom if denom > 0 else 0.0
    r = Li_y - mean * Li_1
    return float(0.5 * (r @ r) + np.sum(np.log(np.diag(L))) + 0.5 * n * math.log(2 * math.pi))


def _gls_mean(X, y, lengthscales, signal_var, noise_var):
    d = X[:, None, :] / lengthscales - X[None, :, :] / lengthscales
    K = signal_var * np.exp(-0.5 * np.sum(d * d, axis=2))
    K[np.diag_indices_from(K)] += noise_var
    L = np.linalg.cholesky(K)
    ones = np.ones(y.shape[0])
    Li_y = solve_triangular(L, y, lower=True)
    Li_1 = solve_triangular(L, ones, lower=True)
    return float((Li_1 @ Li_y) / (Li_1 @ Li_1))


def fit_gp(train: DiscrepancySet, cfg: GPConfig, rng: RngStream) -> GPModel:
    """Fit the discrepancy GP by maximum marginal likelihood.

    Runs ``cfg.restarts`` Nelder-Mead searches on log-hyperparameters
    (per-dimension lengthscales, signal variance, noise variance), each
    initialized from data-driven heuristics perturbed by an independent
    substream of ``rng``, and keeps the best.  Inputs are standardized
    per-dimension; the constant mean is the GLS profile estimate.

    Raises ValueError for fewer than 5 points or nonpositive deltas under
    the log-discrepancy flag, and NumericalFailure if the final covariance
    cannot be factored even after jitter escalation.
    """
    if train.size < 5:
        raise ValueError("need at least 5 training points")
    y = train.deltas
    if cfg.log_discrepancy:
        if np.any(y <= 0):
            raise ValueError("log-discrepancy modeling requires all deltas > 0")
        y = np.log(y)

    p = train.dim
    if cfg.standardize_inputs:
        x_mean = train.thetas.mean(axis=0)
        x_sd = train.thetas.std(axis=0)
        x_sd[x_sd < 1e-12] = 1.0
    else:
        x_mean = np.zeros(p)
        x_sd = np.ones(p)
    X = (train.thetas - x_mean) / x_sd

    vy = float(np.var(y))
    vy_eff = max(vy, 1e-12)
    noise_floor = max(1e-12, cfg.noise_floor_factor * vy)

    # heuristics: median pairwise distance per dimension, target variance
    sub = X if X.shape[0] <= 500 else X[:: X.shape[0] // 500]
    pd = np.abs(sub[:, None, :] - sub[None, :, :])
    ell0 = np.array([np.median(pd[..., j][pd[..., j] > 0]) if np.any(pd[..., j] > 0) else 1.0 for j in range(p)])
    z0 = np.concatenate([np.log(ell0), [math.log(vy_eff), math.log(max(noise_floor, 0.05 * vy_eff))]])

    bounds = (
        [(math.log(1e-2), math.log(1e4))] * p
        + [(math.log(1e-8 * vy_eff), math.log(1e4 * vy_eff))]
        + [(math.log(noise_floor), math.log(max(10.0 * vy_eff, 2 * noise_floor)))]
    )
    z0 = np.clip(z0, [b[0] for b in bounds], [b[1] for b in bounds])

    diff = X[:, None, :] - X[None, :, :]
    sqdiffs = np.ascontiguousarray(np.moveaxis(diff * diff, 2, 0))

    best = None
    for i in range(max(1, cfg.restarts)):
        if i == 0:
            start = z0
        else:
            start = z0 + rng.substream(i).normal(0.0, 0.7, z0.shape[0])
            start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(
            _profiled_nll,
            start,
            args=(sqdiffs, y, p),
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxiter": cfg.max_iter * (p + 2), "xatol": 1e-6, "fatol": 1e-9},
        )
        if best is None or res.fun < best.fun:
            best = res

    lengthscales = np.exp(best.x[:p])
    signal_var = math.exp(best.x[p])
    noise_var = math.exp(best.x[p + 1])

    for jitter in _JITTERS:
        try:
            mean_value = _gls_mean(X, y, lengthscales, signal_var, noise_var + jitter)
            return GPModel(
                train.thetas,
                y,
                lengthscales,
                signal_var,
                noise_var,
                mean_value,
                x_mean,
                x_sd,
                cfg,
                jitter=jitter,
            )
        except (np.linalg.LinAlgError, NumericalFailure):
            continue
    raise NumericalFailure("covariance not positive-definite after jitter escalation")


# ---------------------------------------------------------------------------
# Prediction-level operations
# ---------------------------------------------------------------------------


def gp_predict(model: GPModel, theta):
    """Predictive mean and (nonnegative) variance at ``theta``."""
    return model.predict(param_vector(theta, dim=model.dim))


def h_quantile(model: GPModel, theta, a: float) -> float:
    """Lower a-quantile of the predictive discrepancy distribution.

    mu + Phi^{-1}(a) * sqrt(v + sigma^2), mapped back through exp() when the
    model was fitted to log-discrepancies.  Strictly increasing in ``a``.
    """
    if not 0.0 < a < 1.0:
        raise ValueError("quantile level a must lie in (0, 1)")
    mu, v = gp_predict(model, theta)
    q = mu + ndtri(a) * math.sqrt(v + model.noise_var)
    return math.exp(q) if model.config.log_discrepancy else q


class _QuantileFunction:
    """Picklable h(theta) = lower a-quantile of the predictive discrepancy."""

    def __init__(self, model: GPModel, a: float):
        self.model = model
        self.a = a
        self._za = float(ndtri(a))

    def __call__(self, theta) -> float:
        mu, v = self.model.predict(np.asarray(theta, dtype=float))
        q = mu + self._za * math.sqrt(v + self.model.noise_var)
        return math.exp(q) if self.model.config.log_discrepancy else q


def h_function(model: GPModel, a: float):
    """Bind (model, a) into the threshold function h(theta) used by samplers."""
    if not 0.0 < a < 1.0:
        raise ValueError("quantile level a must lie in (0, 1)")
    return _QuantileFunction(model, a)


def gp_abc_logdensity(model: GPModel, theta, eps: float, prior: PriorSpec) -> float:
    """Surrogate-only ABC posterior: log pi(theta) + log P(Delta_theta <= eps)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    lp = prior.logpdf(np.asarray(theta, dtype=float))
    if lp == -math.inf:
        return -math.inf
    mu, v = gp_predict(model, theta)
    level = math.log(eps) if model.config.log_discrepancy else eps
    return lp + float(log_ndtr((level - mu) / math.sqrt(v + model.noise_var)))


def false_rejection_rate(
    model: GPModel,
    simulate_delta,
    prior: PriorSpec,
    a: float,
    M: int,
    rng: RngStream,
) -> float:
    """Monte Carlo estimate of P(Delta <= h_a(theta)) under the prior.

    ``simulate_delta(theta, rng) -> float`` performs one simulation and
    returns its discrepancy to the observed data.  A calibrated surrogate
    gives an estimate close to ``a`` (Proposition-2-style check).
    """
    if M < 100:
        raise ValueError("M must be at least 100")
    h = h_function(model, a)
    hits = 0
    for j in range(M):
        sub = rng.substream(j)
        theta = prior.sample(sub)
        if simulate_delta(theta, sub) <= h(theta):
            hits += 1
    return hits / M


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_training_csv(train: DiscrepancySet, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{j + 1}" for j in range(train.dim)] + ["delta"])
        for theta, delta in zip(train.thetas, train.deltas):
            writer.writerow([f"{v:.17g}" for v in theta] + [f"{delta:.17g}"])


def load_training_csv(path) -> DiscrepancySet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "delta" or not header[0].startswith("theta_"):
            raise ValueError(f"{path}: expected header theta_1..theta_p,delta")
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows, dtype=float)
    return DiscrepancySet(arr[:, :-1], arr[:, -1])


def save_gp(model: GPModel, path):
    """Write a self-describing JSON snapshot that reloads bit-compatibly."""
    payload = {
        "kind": "ejabc-gp-model",
        "version": 1,
        "config": {
            "log_discrepancy": model.config.log_discrepancy,
            "standardize_inputs": model.config.standardize_inputs,
            "restarts": model.config.restarts,
            "noise_floor_factor": model.config.noise_floor_factor,
            "max_iter": model.config.max_iter,
        },
        "lengthscales": model.lengthscales.tolist(),
        "signal_var": model.signal_var,
        "noise_var": model.noise_var,
        "mean_value": model.mean_value,
        "jitter": model.jitter,
        "x_mean": model.x_mean.tolist(),
        "x_sd": model.x_sd.tolist(),
        "thetas": model.thetas.tolist(),
        "targets": model.targets.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_gp(path) -> GPModel:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("kind") != "ejabc-gp-model":
        raise ValueError(f"{path}: not a GP model file")
    cfg = GPConfig(**payload["config"])
    return GPModel(
        np.asarray(payload["thetas"], dtype=float),
        np.asarray(payload["targets"], dtype=float),
        np.asarray(payload["lengthscales"], dtype=float),
        payload["signal_var"],
        payload["noise_var"],
        payload["mean_value"],
        np.asarray(payload["x_mean"], dtype=float),
        np.asarray(payload["x_sd"], dtype=float),
        cfg,
        jitter=payload["jitter"],
    )
