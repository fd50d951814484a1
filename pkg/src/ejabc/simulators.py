"""Built-in generative models behind one contract: (theta, spec, rng) -> dataset.

Four models: a two-component normal mixture, a 2-d ODE system (RK4, fixed
step), a 4-species stochastic kinetic network (Euler-Maruyama on the
diffusion approximation), and the blowfly population DDE (Euler with a
lagged, linearly interpolated state).  Integrator hot loops are numba
kernels; all randomness (Wiener increments, observation noise, mixture
component picks) is drawn from the caller's RngStream outside the kernels,
so every simulator is a pure function of (theta, spec, rng state).

Simulators raise :class:`SimulationFailure` instead of returning garbage;
samplers map that to an infinite discrepancy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from numba import njit

from .core import SimulationFailure, dataset, param_vector

__all__ = [
    "ToySpec",
    "OdeSpec",
    "SdeScenario",
    "SdeSpec",
    "DdeSpec",
    "STOICHIOMETRY",
    "simulate_toy",
    "simulate_ode",
    "simulate_sde",
    "simulate_dde",
    "ode_trajectory",
    "sde_path",
    "dde_trajectory",
    "propensities",
    "simulate",
    "generate_observed",
    "observation_times",
    "make_delta_fn",
    "load_blowfly_data",
    "load_observed_csv",
    "save_observed_csv",
    "packaged_blowfly_path",
]

TOY_MIXTURE_SD = math.sqrt(0.6)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    """Two-component mixture 0.5 N(theta+2, 0.6) + 0.5 N(theta-1, 0.6)."""

    theta_true: tuple = (0.0,)
    dim = 1


@dataclass(frozen=True)
class OdeSpec:
    """Coupled 2-d ODE observed with independent Gaussian noise."""

    t_end: float = 60.0
    n_obs: int = 121
    dt: float = 0.05
    noise_sd: tuple = (1.0, 3.0)
    theta_box: tuple = ((1.0, 3.0), (0.5, 1.5))
    theta_true: tuple = (2.0, 1.0)
    dim = 2

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0 or self.n_obs < 2:
            raise ValueError("invalid ODE grid settings")
        interval = self.t_end / (self.n_obs - 1)
        if abs(interval / self.dt - round(interval / self.dt)) > 1e-9:
            raise ValueError("integrator step must divide the observation interval")


@dataclass(frozen=True)
class SdeScenario:
    """Observation scheme of the kinetic network (paper-style D1/D2/D3)."""

    name: str
    noise_var: float
    observed: tuple  # indices into the state (RNA, P, P2, DNA)
    sigma_inferred: bool

    @classmethod
    def from_name(cls, name: str) -> "SdeScenario":
        if name == "D1":
            return cls("D1", 0.0, (0, 1, 2, 3), False)
        if name == "D2":
            return cls("D2", 5.0, (0, 1, 2, 3), False)
        if name == "D3":
            return cls("D3", float("nan"), (0, 1, 2), True)  # DNA masked, sigma unknown
        raise ValueError(f"unknown SDE scenario {name!r}")


@dataclass(frozen=True)
class SdeSpec:
    """Diffusion approximation of the 8-reaction auto-regulation network.

    The generating constants (true rates, conservation constant k, initial
    state, time grid) are configuration inputs; the defaults below are this
    package's documented choices, not literature values.
    """

    scenario: SdeScenario = field(default_factory=lambda: SdeScenario.from_name("D1"))
    k: float = 10.0
    x0: tuple = (8.0, 8.0, 8.0, 5.0)
    t_end: float = 49.0
    obs_every: float = 1.0
    dt: float = 0.1
    theta_true: tuple = (0.1, 0.7, 0.35, 0.2, 0.1, 0.9, 0.3, 0.1)

    def __post_init__(self):
        if self.dt <= 0 or self.obs_every <= 0 or self.t_end <= 0:
            raise ValueError("invalid SDE grid settings")
        if abs(self.obs_every / self.dt - round(self.obs_every / self.dt)) > 1e-9:
            raise ValueError("integrator step must divide the observation interval")
        if self.k <= 0:
            raise ValueError("conservation constant k must be positive")
        if self.x0[3] > self.k:
            raise ValueError("initial DNA count exceeds the conservation constant k")

    @property
    def dim(self) -> int:
        return 9 if self.scenario.sigma_inferred else 8

    @property
    def n_obs(self) -> int:
        return int(round(self.t_end / self.obs_every)) + 1


def _default_blowfly_times():
    times, _ = load_observed_csv(packaged_blowfly_path())
    return tuple(times)


@dataclass(frozen=True)
class DdeSpec:
    """Delayed-logistic blowfly model with lognormal observation noise.

    log y(t) ~ N(log x(t), sigma^2) by default; ``natural_scale_noise``
    switches to the moment-matched parameterization with E[y] = x(t) and
    Var[y] = sigma_nat^2 (sigma then lives on the natural scale).
    """

    obs_times: tuple = None
    dt: float = 0.1
    sigma: float = 0.1
    infer_sigma: bool = False
    natural_scale_noise: bool = False
    theta_true: tuple = (4915.0, 0.26, 2.2, 9.5)

    def __post_init__(self):
        if self.obs_times is None:
            object.__setattr__(self, "obs_times", _default_blowfly_times())
        times = np.asarray(self.obs_times, dtype=float)
        if times.ndim != 1 or np.any(np.diff(times) <= 0) or times[0] < 0:
            raise ValueError("observation times must be strictly increasing and >= 0")
        if self.dt <= 0 or self.sigma <= 0:
            raise ValueError("dt and sigma must be positive")

    @property
    def dim(self) -> int:
        return 5 if self.infer_sigma else 4


# ---------------------------------------------------------------------------
# Toy mixture
# ---------------------------------------------------------------------------


def simulate_toy(theta, rng) -> np.ndarray:
    """One draw from the mixture, as a 1x1 dataset."""
    theta = param_vector(theta, dim=1)
    shift = 2.0 if rng.uniform() < 0.5 else -1.0
    return np.array([[rng.normal(theta[0] + shift, TOY_MIXTURE_SD)]])


# ---------------------------------------------------------------------------
# ODE system
# ---------------------------------------------------------------------------


@njit(cache=True)
def _rk4_ode(th1, th2, dt, n_obs, steps_per_obs):
    out = np.empty((2, n_obs))
    x1, x2 = 7.0, -10.0
    out[0, 0], out[1, 0] = x1, x2
    for i in range(1, n_obs):
        for _ in range(steps_per_obs):
            if abs(36.0 + x2) < 1e-6:
                return out, i
            k11 = 72.0 / (36.0 + x2) - th1
            k12 = th2 * x1 - 1.0
            a2 = x2 + 0.5 * dt * k12
            if abs(36.0 + a2) < 1e-6:
                return out, i
            k21 = 72.0 / (36.0 + a2) - th1
            k22 = th2 * (x1 + 0.5 * dt * k11) - 1.0
            b2 = x2 + 0.5 * dt * k22
            if abs(36.0 + b2) < 1e-6:
                return out, i
            k31 = 72.0 / (36.0 + b2) - th1
            k32 = th2 * (x1 + 0.5 * dt * k21) - 1.0
            c2 = x2 + dt * k32
            if abs(36.0 + c2) < 1e-6:
                return out, i
            k41 = 72.0 / (36.0 + c2) - th1
            k42 = th2 * (x1 + dt * k31) - 1.0
            x1 += dt * (k11 + 2.0 * k21 + 2.0 * k31 + k41) / 6.0
            x2 += dt * (k12 + 2.0 * k22 + 2.0 * k32 + k42) / 6.0
        out[0, i], out[1, i] = x1, x2
    return out, 0


def ode_trajectory(theta, spec: OdeSpec = OdeSpec(), dt=None) -> np.ndarray:
    """Noiseless RK4 trajectory at the observation times (2 x n_obs)."""
    theta = param_vector(theta, dim=2)
    dt = spec.dt if dt is None else dt
    (lo1, hi1), (lo2, hi2) = spec.theta_box
    if not (lo1 <= theta[0] <= hi1 and lo2 <= theta[1] <= hi2):
        raise SimulationFailure(f"theta {theta} outside the integrable box {spec.theta_box}")
    interval = spec.t_end / (spec.n_obs - 1)
    if abs(interval / dt - round(interval / dt)) > 1e-9:
        raise ValueError("integrator step must divide the observation interval")
    steps = int(round(interval / dt))
    traj, fail = _rk4_ode(theta[0], theta[1], dt, spec.n_obs, steps)
    if fail:
        raise SimulationFailure("ODE state approached the 36 + x2 = 0 singularity")
    return traj


def simulate_ode(theta, spec: OdeSpec, rng) -> np.ndarray:
    """Noisy observations of the ODE trajectory (2 x n_obs dataset)."""
    traj = ode_trajectory(theta, spec)
    sd = np.asarray(spec.noise_sd, dtype=float)[:, None]
    return dataset(traj + sd * rng.standard_normal(traj.shape))


# ---------------------------------------------------------------------------
# Stochastic kinetic network
# ---------------------------------------------------------------------------

# columns = reactions R1..R8, rows = (RNA, P, P2, DNA)
STOICHIOMETRY = np.array(
    [
        [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, -2.0, 2.0, 0.0, -1.0],
        [-1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0],
        [-1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    ]
)


def propensities(state, theta, k) -> np.ndarray:
    """Reaction propensity vector h(X, theta) of the auto-regulation network."""
    rna, p, p2, dna = state
    th = np.asarray(theta, dtype=float)
    return np.array(
        [
            th[0] * dna * p2,
            th[1] * (k - dna),
            th[2] * dna,
            th[3] * rna,
            th[4] * p * (p - 1) / 2.0,
            th[5] * p2,
            th[6] * rna,
            th[7] * p,
        ]
    )


@njit(cache=True)
def _euler_sde(x0, theta, k, dt, n_obs, steps_per_obs, dw):
    out = np.empty((4, n_obs))
    x = x0.copy()
    for j in range(4):
        out[j, 0] = x[j]
    step = 0
    for i in range(1, n_obs):
        for _ in range(steps_per_obs):
            h = np.empty(8)
            h[0] = theta[0] * x[3] * x[2]
            h[1] = theta[1] * (k - x[3])
            h[2] = theta[2] * x[3]
            h[3] = theta[3] * x[0]
            h[4] = theta[4] * x[1] * (x[1] - 1.0) / 2.0
            h[5] = theta[5] * x[2]
            h[6] = theta[6] * x[0]
            h[7] = theta[7] * x[1]
            for r in range(8):
                if h[r] < 0.0:
                    h[r] = 0.0
            for j in range(4):
                inc = 0.0
                for r in range(8):
                    inc += STOICHIOMETRY[j, r] * (h[r] * dt + math.sqrt(h[r]) * dw[step, r])
                x[j] += inc
                if not math.isfinite(x[j]):
                    return out, i
                if x[j] < 0.0:
                    x[j] = 0.0
            step += 1
        for j in range(4):
            out[j, i] = x[j]
    return out, 0


def sde_path(theta, spec: SdeSpec, dw) -> np.ndarray:
    """Latent 4 x n_obs path driven by the given Wiener increments.

    ``dw`` has shape (total_steps, 8); pass zeros to recover the
    deterministic Euler path of the drift.
    """
    rates = np.asarray(theta, dtype=float)[:8]
    if np.any(rates < 0):
        raise SimulationFailure("reaction rates must be nonnegative")
    steps_per_obs = int(round(spec.obs_every / spec.dt))
    total = (spec.n_obs - 1) * steps_per_obs
    dw = np.asarray(dw, dtype=float)
    if dw.shape != (total, 8):
        raise ValueError(f"dw must have shape {(total, 8)}")
    path, fail = _euler_sde(
        np.asarray(spec.x0, dtype=float), rates, spec.k, spec.dt, spec.n_obs, steps_per_obs, dw
    )
    if fail:
        raise SimulationFailure("SDE state became non-finite")
    return path


def simulate_sde(theta, spec: SdeSpec, rng) -> np.ndarray:
    """Observed coordinates with per-scenario noise and masking applied."""
    theta = param_vector(theta, dim=spec.dim)
    steps_per_obs = int(round(spec.obs_every / spec.dt))
    total = (spec.n_obs - 1) * steps_per_obs
    dw = rng.normal(0.0, math.sqrt(spec.dt), (total, 8))
    path = sde_path(theta, spec, dw)
    scen = spec.scenario
    obs = path[list(scen.observed), :]
    noise_var = theta[8] ** 2 if scen.sigma_inferred else scen.noise_var
    if noise_var > 0:
        obs = obs + math.sqrt(noise_var) * rng.standard_normal(obs.shape)
    return dataset(obs)


# ---------------------------------------------------------------------------
# Blowfly DDE
# ---------------------------------------------------------------------------


@njit(cache=True)
def _euler_dde(x0, nu, cap, tau, dt, n_steps):
    x = np.empty(n_steps + 1)
    x[0] = x0
    for j in range(n_steps):
        t = j * dt
        s = t - tau
        if s <= 0.0:
            lag = x0
        else:
            idx = s / dt
            i0 = int(math.floor(idx))
            if i0 >= j:
                lag = x[j]
            else:
                frac = idx - i0
                lag = x[i0] + frac * (x[i0 + 1] - x[i0])
        x[j + 1] = x[j] + dt * nu * x[j] * (1.0 - lag / cap)
        if not math.isfinite(x[j + 1]) or x[j + 1] <= 0.0:
            return x, j + 1
    return x, 0


def dde_trajectory(theta, spec: DdeSpec) -> np.ndarray:
    """Noiseless population path at the observation times (1 x T)."""
    th = np.asarray(theta, dtype=float)
    x0, nu, cap_p, tau = th[0], th[1], th[2], th[3]
    if x0 <= 0 or nu <= 0 or cap_p <= 0 or tau <= 0:
        raise SimulationFailure("blowfly parameters must be positive")
    times = np.asarray(spec.obs_times, dtype=float)
    n_steps = int(math.ceil(times[-1] / spec.dt + 1e-9))
    x, fail = _euler_dde(x0, nu, 1000.0 * cap_p, tau, spec.dt, n_steps)
    if fail:
        raise SimulationFailure("blowfly trajectory left (0, inf)")
    grid = np.arange(n_steps + 1) * spec.dt
    return np.interp(times, grid, x)[None, :]


def simulate_dde(theta, spec: DdeSpec, rng) -> np.ndarray:
    """Lognormal observations of the blowfly path (1 x T dataset)."""
    theta = param_vector(theta, dim=spec.dim)
    sigma = theta[4] if spec.infer_sigma else spec.sigma
    if sigma <= 0:
        raise SimulationFailure("observation sigma must be positive")
    x = dde_trajectory(theta[:4], spec)
    z = rng.standard_normal(x.shape)
    if spec.natural_scale_noise:
        s2 = np.log1p(sigma**2 / x**2)
        mean = np.log(x) - 0.5 * s2
        return dataset(np.exp(mean + np.sqrt(s2) * z))
    return dataset(np.exp(np.log(x) + sigma * z))


# ---------------------------------------------------------------------------
# Dispatch and data files
# ---------------------------------------------------------------------------

_MODEL_IDS = ("toy_mixture", "ode_system", "sde_network", "dde_blowfly")


def simulate(spec, theta, rng) -> np.ndarray:
    """Run the simulator matching ``spec``'s type."""
    if isinstance(spec, ToySpec):
        return simulate_toy(theta, rng)
    if isinstance(spec, OdeSpec):
        return simulate_ode(theta, spec, rng)
    if isinstance(spec, SdeSpec):
        return simulate_sde(theta, spec, rng)
    if isinstance(spec, DdeSpec):
        return simulate_dde(theta, spec, rng)
    raise ValueError(f"unknown simulator spec {type(spec).__name__}")


def generate_observed(spec, rng) -> np.ndarray:
    """Simulate one dataset at the spec's configured ground-truth theta."""
    return simulate(spec, np.asarray(spec.theta_true, dtype=float), rng)


def observation_times(spec) -> np.ndarray:
    if isinstance(spec, ToySpec):
        return np.zeros(1)
    if isinstance(spec, OdeSpec):
        return np.linspace(0.0, spec.t_end, spec.n_obs)
    if isinstance(spec, SdeSpec):
        return np.arange(spec.n_obs) * spec.obs_every
    if isinstance(spec, DdeSpec):
        return np.asarray(spec.obs_times, dtype=float)
    raise ValueError(f"unknown simulator spec {type(spec).__name__}")


class _DeltaFunction:
    """Picklable delta(theta, rng): simulate, then measure against observed."""

    def __init__(self, spec, observed, discrepancy):
        self.spec = spec
        self.observed = dataset(observed)
        self.discrepancy = discrepancy

    def __call__(self, theta, rng) -> float:
        try:
            x = simulate(self.spec, theta, rng)
        except SimulationFailure:
            return math.inf
        return self.discrepancy(x, self.observed)


def make_delta_fn(spec, observed, discrepancy):
    """Bind simulator + observed data + discrepancy into delta(theta, rng).

    Simulation failures come back as +inf, which the kernels turn into a
    rejection instead of crashing the chain.
    """
    return _DeltaFunction(spec, observed, discrepancy)


def save_observed_csv(path, times, values):
    """Write an observed-data file: time,value_1..value_d."""
    values = dataset(values)
    times = np.asarray(times, dtype=float)
    if times.shape[0] != values.shape[1]:
        raise ValueError("times and dataset length differ")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + [f"value_{j + 1}" for j in range(values.shape[0])])
        for i, t in enumerate(times):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in values[:, i]])


def load_observed_csv(path):
    """Read time,value_1..value_d (or time,count); returns (times, dataset)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "time" or len(header) < 2:
            raise ValueError(f"{path}: expected header time,value_1..value_d")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return arr[:, 0], dataset(arr[:, 1:].T)


def packaged_blowfly_path():
    """Path of the packaged (synthetic) blowfly record."""
    return resources.files("ejabc").joinpath("data/blowfly.csv")


def load_blowfly_data(path) -> np.ndarray:
    """Load a blowfly record (CSV time,count; exactly 137 positive rows)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["time", "count"]:
            raise ValueError(f"{path}: expected header time,count")
        rows = [[float(v) for v in row] for row in reader if row]
    if len(rows) != 137:
        raise ValueError(f"{path}: expected 137 observations, found {len(rows)}")
    arr = np.asarray(rows, dtype=float)
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ValueError(f"{path}: observation times must be strictly increasing")
    if np.any(arr[:, 1] <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: counts must be positive and finite")
    return dataset(arr[:, 1][None, :])
