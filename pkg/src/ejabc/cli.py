"""Config-driven experiment orchestration and the ``ejabc`` command.

A JSON config describes model, observed data, prior, kernel, sampler, GP
and pilot settings plus a seed; ``run`` executes the whole pipeline
(pilot -> GP fit -> sampler -> metrics) and every phase is also a
standalone subcommand operating on the persisted artifacts, so long
pipelines are resumable.  All numeric CSV/JSON output is printed with 17
significant digits; identical (config, seed) reruns reproduce identical
numeric content.

Exit codes: 0 success, 1 config validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import multiprocessing

import numpy as np

from .core import (
    ConfigError,
    KernelSpec,
    Marginal,
    PriorSpec,
    ProposalSpec,
    RngStream,
    make_discrepancy,
)
from .diagnostics import (
    EffSummary,
    gelman_rubin,
    kde_density,
    l1_distance,
    silverman_bandwidth,
    toy_posterior_oracle,
)
from .gp import (
    GPConfig,
    fit_gp,
    h_function,
    load_gp,
    load_training_csv,
    save_gp,
    save_training_csv,
)
from .mcmc import (
    SamplerConfig,
    load_samples_csv,
    load_trace_csv,
    run_chain,
    save_samples_csv,
    save_trace_csv,
)
from .simulators import (
    DdeSpec,
    OdeSpec,
    SdeScenario,
    SdeSpec,
    ToySpec,
    generate_observed,
    load_observed_csv,
    make_delta_fn,
    observation_times,
    save_observed_csv,
)
from .smc import (
    SmcConfig,
    collect_prior_training,
    collect_training_data,
    load_particles_csv,
    run_ejasmc,
    save_particles_csv,
    save_report_csv,
)

SCHEMA_VERSION = 1
MCMC_TYPES = ("abc_mcmc", "oej_mcmc", "ej_mcmc")

# substream indices of the pipeline phases
_S_OBSERVED, _S_PILOT, _S_GPFIT, _S_SAMPLER = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

_TOP_KEYS = {
    "schema_version",
    "model",
    "observed",
    "prior",
    "discrepancy",
    "kernel",
    "eps",
    "sampler",
    "gp",
    "pilot",
    "seed",
    "output_dir",
}
_MODEL_KEYS = {
    "toy_mixture": {"id", "theta_true"},
    "ode_system": {"id", "theta_true", "noise_sd", "t_end", "n_obs", "dt", "theta_box"},
    "sde_network": {"id", "scenario", "k", "x0", "t_end", "obs_every", "dt", "theta_true"},
    "dde_blowfly": {
        "id",
        "theta_true",
        "sigma",
        "dt",
        "infer_sigma",
        "natural_scale_noise",
        "obs_times_file",
    },
}
_SAMPLER_KEYS = {
    "type",
    "iterations",
    "proposal_sd",
    "proposal_cov",
    "init_theta",
    "chains",
    "quantile_a",
    "particles",
    "gamma",
    "move_sampler",
    "moves_per_round",
    "sim_budget",
    "target_eps",
    "max_rounds",
    "resample_threshold",
    "resample_scheme",
}
_GP_KEYS = {"quantile_a", "restarts", "log_discrepancy", "model_file"}
_PILOT_KEYS = {"source", "budget", "particles", "gamma", "sim_budget", "max_rounds"}
_OBSERVED_KEYS = {"path", "generate"}


def _reject_unknown(block: dict, allowed: set, where: str):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown field")


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"{where}.{key}: required field is missing")
    return block[key]


def validate_config(cfg: dict) -> dict:
    """Check structure, names and field compatibility; returns ``cfg``."""
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"config.schema_version: expected {SCHEMA_VERSION}")

    model = _require(cfg, "model", "config")
    model_id = _require(model, "id", "config.model")
    if model_id not in _MODEL_KEYS:
        raise ConfigError(
            f"config.model.id: unknown model {model_id!r}; choose from {sorted(_MODEL_KEYS)}"
        )
    _reject_unknown(model, _MODEL_KEYS[model_id], "config.model")

    observed = _require(cfg, "observed", "config")
    _reject_unknown(observed, _OBSERVED_KEYS, "config.observed")
    if ("path" in observed) == ("generate" in observed):
        raise ConfigError("config.observed: give exactly one of 'path' or 'generate'")
    if "generate" in observed:
        _reject_unknown(observed["generate"], {"seed"}, "config.observed.generate")

    kernel = cfg.get("kernel", {"family": "uniform"})
    _reject_unknown(kernel, {"family"}, "config.kernel")
    try:
        KernelSpec(kernel.get("family", "uniform"))
    except ValueError as exc:
        raise ConfigError(f"config.kernel.family: {exc}") from exc

    if "prior" in cfg:
        if not isinstance(cfg["prior"], list) or not cfg["prior"]:
            raise ConfigError("config.prior: expected a nonempty list of marginals")
        for i, marg in enumerate(cfg["prior"]):
            _reject_unknown(
                marg, {"dist", "low", "high", "mean", "sd"}, f"config.prior[{i}]"
            )
            if marg.get("dist") not in ("uniform", "normal", "lognormal"):
                raise ConfigError(f"config.prior[{i}].dist: unknown distribution")

    if "discrepancy" in cfg and cfg["discrepancy"] not in ("rmse", "abs", "normalized_rmse"):
        raise ConfigError(f"config.discrepancy: unknown name {cfg['discrepancy']!r}")

    sampler = _require(cfg, "sampler", "config")
    _reject_unknown(sampler, _SAMPLER_KEYS, "config.sampler")
    stype = _require(sampler, "type", "config.sampler")
    if stype not in MCMC_TYPES + ("smc",):
        raise ConfigError(f"config.sampler.type: unknown sampler {stype!r}")
    if stype in MCMC_TYPES:
        _require(sampler, "iterations", "config.sampler")
        if "proposal_sd" not in sampler and "proposal_cov" not in sampler:
            raise ConfigError("config.sampler: give proposal_sd or proposal_cov")
        if "eps" not in cfg:
            raise ConfigError("config.eps: required for MCMC samplers")
    else:
        _require(sampler, "particles", "config.sampler")
        if not any(k in sampler for k in ("sim_budget", "target_eps", "max_rounds")):
            raise ConfigError("config.sampler: smc needs a stopping rule")

    if "gp" in cfg:
        _reject_unknown(cfg["gp"], _GP_KEYS, "config.gp")
    if "pilot" in cfg:
        _reject_unknown(cfg["pilot"], _PILOT_KEYS, "config.pilot")
        if cfg["pilot"].get("source", "prior") not in ("prior", "smc"):
            raise ConfigError("config.pilot.source: must be 'prior' or 'smc'")
        _require(cfg["pilot"], "budget", "config.pilot")

    needs_gp = (stype == "ej_mcmc") or (
        stype == "smc" and sampler.get("move_sampler", "oej") == "ej"
    )
    if needs_gp:
        has_model_file = "model_file" in cfg.get("gp", {})
        if not has_model_file and "pilot" not in cfg:
            raise ConfigError(
                "config.pilot: required for ej samplers unless gp.model_file is given"
            )
    if "seed" not in cfg:
        raise ConfigError("config.seed: required field is missing")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})")
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Config -> objects
# ---------------------------------------------------------------------------


def build_model_spec(model: dict, config_dir: Path):
    kw = {k: v for k, v in model.items() if k != "id"}
    if "theta_box" in kw:
        kw["theta_box"] = tuple(tuple(side) for side in kw["theta_box"])
    for key in ("theta_true", "noise_sd", "x0"):
        if key in kw:
            kw[key] = tuple(kw[key])
    mid = model["id"]
    if mid == "toy_mixture":
        return ToySpec(**kw)
    if mid == "ode_system":
        return OdeSpec(**kw)
    if mid == "sde_network":
        if "scenario" in kw:
            kw["scenario"] = SdeScenario.from_name(kw["scenario"])
        return SdeSpec(**kw)
    if "obs_times_file" in kw:
        times, _ = load_observed_csv(config_dir / kw.pop("obs_times_file"))
        kw["obs_times"] = tuple(times)
    return DdeSpec(**kw)


def _marginal(block: dict) -> Marginal:
    if block["dist"] == "uniform":
        return Marginal("uniform", block["low"], block["high"])
    return Marginal(block["dist"], block["mean"], block["sd"])


def default_prior(spec) -> PriorSpec:
    if isinstance(spec, ToySpec):
        return PriorSpec([Marginal("uniform", -6.0, 6.0)])
    if isinstance(spec, OdeSpec):
        return PriorSpec([Marginal("uniform", 1.8, 2.2), Marginal("uniform", 0.8, 1.2)])
    if isinstance(spec, SdeSpec):
        margs = [Marginal("uniform", 0.1 * t, 3.0 * t) for t in spec.theta_true[:8]]
        if spec.scenario.sigma_inferred:
            margs.append(Marginal("uniform", 0.5, 5.0))
        return PriorSpec(margs)
    margs = [
        Marginal("lognormal", 8.5, 0.3),
        Marginal("lognormal", -1.35, 0.2),
        Marginal("lognormal", 0.8, 0.3),
        Marginal("lognormal", 2.25, 0.08),
    ]
    if spec.infer_sigma:
        margs.append(Marginal("lognormal", math.log(0.1), 0.5))
    return PriorSpec(margs)


_DEFAULT_DISCREPANCY = {
    ToySpec: "abs",
    OdeSpec: "rmse",
    SdeSpec: "normalized_rmse",
    DdeSpec: "rmse",
}


class Experiment:
    """One experiment: resolved config plus lazily materialized artifacts."""

    def __init__(self, cfg: dict, config_dir, seed=None, out_dir=None, workers=1):
        self.cfg = cfg
        self.config_dir = Path(config_dir)
        self.seed = int(seed if seed is not None else cfg["seed"])
        out = out_dir or os.environ.get("EJABC_OUT") or cfg.get("output_dir", "runs")
        self.out_dir = (Path(out) if os.path.isabs(out) else self.config_dir / out).resolve()
        self.workers = max(1, int(workers))
        self.spec = build_model_spec(cfg["model"], self.config_dir)
        self.prior = (
            PriorSpec([_marginal(m) for m in cfg["prior"]])
            if "prior" in cfg
            else default_prior(self.spec)
        )
        self.kernel = KernelSpec(cfg.get("kernel", {}).get("family", "uniform"))
        self.timings = {}
        self._observed = None
        self._gp_model = None

    # -- paths --------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out_dir / name

    # -- phases -------------------------------------------------------------

    def ensure_observed(self) -> np.ndarray:
        if self._observed is not None:
            return self._observed
        self.out_dir.mkdir(parents=True, exist_ok=True)
        obs_cfg = self.cfg["observed"]
        t0 = time.perf_counter()
        if "path" in obs_cfg:
            _, data = load_observed_csv(self.config_dir / obs_cfg["path"])
        elif self.path("observed.csv").exists():
            _, data = load_observed_csv(self.path("observed.csv"))
        else:
            gen_seed = obs_cfg["generate"].get("seed", self.seed)
            rng = RngStream(gen_seed, (_S_OBSERVED,))
            data = generate_observed(self.spec, rng)
            save_observed_csv(self.path("observed.csv"), observation_times(self.spec), data)
            with open(self.path("observed.meta.json"), "w") as fh:
                json.dump(
                    {
                        "model": self.cfg["model"]["id"],
                        "theta_true": list(self.spec.theta_true),
                        "seed": gen_seed,
                    },
                    fh,
                    indent=1,
                )
        self.timings["observed"] = time.perf_counter() - t0
        self._observed = data
        return data

    @property
    def discrepancy_name(self) -> str:
        return self.cfg.get("discrepancy", _DEFAULT_DISCREPANCY[type(self.spec)])

    def delta_fn(self):
        observed = self.ensure_observed()
        return make_delta_fn(
            self.spec, observed, make_discrepancy(self.discrepancy_name, observed)
        )

    def run_pilot(self):
        """Collect GP training pairs per the pilot block; writes training.csv."""
        pilot = self.cfg.get("pilot")
        if pilot is None:
            raise ConfigError("config.pilot: missing (nothing to run)")
        t0 = time.perf_counter()
        rng = RngStream(self.seed, (_S_PILOT,))
        if pilot.get("source", "prior") == "prior":
            train = collect_prior_training(pilot["budget"], self.prior, self.delta_fn(), rng)
        else:
            smc_cfg = SmcConfig(
                n_particles=pilot.get("particles", 500),
                gamma=pilot.get("gamma", 0.5),
                kernel=self.kernel,
                prior=self.prior,
                delta_fn=self.delta_fn(),
                move_sampler="oej",
                sim_budget=pilot.get("sim_budget", 2 * pilot["budget"]),
                max_rounds=pilot.get("max_rounds"),
            )
            train = collect_training_data(smc_cfg, pilot["budget"], rng)
        save_training_csv(train, self.path("training.csv"))
        self.timings["pilot"] = time.perf_counter() - t0
        return train

    def ensure_training(self):
        if self.path("training.csv").exists():
            return load_training_csv(self.path("training.csv"))
        return self.run_pilot()

    def fit_gp_phase(self):
        gp_cfg = self.cfg.get("gp", {})
        t0 = time.perf_counter()
        if "model_file" in gp_cfg:
            model = load_gp(self.config_dir / gp_cfg["model_file"])
        else:
            train = self.ensure_training()
            config = GPConfig(
                log_discrepancy=gp_cfg.get("log_discrepancy", False),
                restarts=gp_cfg.get("restarts", 5),
            )
            model = fit_gp(train, config, RngStream(self.seed, (_S_GPFIT,)))
            save_gp(model, self.path("gp_model.json"))
        self.timings["gp_fit"] = time.perf_counter() - t0
        self._gp_model = model
        return model

    def ensure_gp(self):
        if self._gp_model is not None:
            return self._gp_model
        gp_cfg = self.cfg.get("gp", {})
        if "model_file" not in gp_cfg and self.path("gp_model.json").exists():
            self._gp_model = load_gp(self.path("gp_model.json"))
            return self._gp_model
        return self.fit_gp_phase()

    def _needs_gp(self) -> bool:
        sampler = self.cfg["sampler"]
        return sampler["type"] == "ej_mcmc" or (
            sampler["type"] == "smc" and sampler.get("move_sampler", "oej") == "ej"
        )

    def _quantile_a(self) -> float:
        sampler = self.cfg["sampler"]
        return sampler.get("quantile_a", self.cfg.get("gp", {}).get("quantile_a", 0.05))

    def _proposal(self) -> ProposalSpec:
        sampler = self.cfg["sampler"]
        if "proposal_cov" in sampler:
            return ProposalSpec(np.asarray(sampler["proposal_cov"], dtype=float))
        sd = sampler["proposal_sd"]
        sd = np.full(self.prior.dim, sd) if np.isscalar(sd) else np.asarray(sd, float)
        return ProposalSpec.from_sd(sd)

    def mcmc_config(self) -> SamplerConfig:
        sampler = self.cfg["sampler"]
        h_fn = None
        if sampler["type"] == "ej_mcmc":
            h_fn = h_function(self.ensure_gp(), self._quantile_a())
        return SamplerConfig(
            sampler=sampler["type"],
            kernel=self.kernel,
            eps=float(self.cfg["eps"]),
            prior=self.prior,
            proposal=self._proposal(),
            n_iterations=int(sampler["iterations"]),
            delta_fn=self.delta_fn(),
            init_theta=np.asarray(sampler["init_theta"], float)
            if "init_theta" in sampler
            else None,
            h_fn=h_fn,
        )

    def smc_config(self) -> SmcConfig:
        sampler = self.cfg["sampler"]
        move = sampler.get("move_sampler", "oej")
        h_fn = h_function(self.ensure_gp(), self._quantile_a()) if move == "ej" else None
        return SmcConfig(
            n_particles=int(sampler["particles"]),
            gamma=sampler.get("gamma", 0.5),
            kernel=self.kernel,
            prior=self.prior,
            delta_fn=self.delta_fn(),
            move_sampler=move,
            moves_per_round=sampler.get("moves_per_round", 1),
            sim_budget=sampler.get("sim_budget"),
            target_eps=sampler.get("target_eps"),
            max_rounds=sampler.get("max_rounds"),
            resample_threshold=sampler.get("resample_threshold", 0.5),
            resample_scheme=sampler.get("resample_scheme", "systematic"),
            h_fn=h_fn,
        )

    def run_sampler(self) -> dict:
        """Run the configured sampler; returns the counter summary."""
        sampler = self.cfg["sampler"]
        self.out_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        if sampler["type"] == "smc":
            result = run_ejasmc(self.smc_config(), RngStream(self.seed, (_S_SAMPLER,)), self.workers)
            save_particles_csv(result.particles, self.path("particles.csv"))
            save_report_csv(result.rounds, self.path("report.csv"))
            counters = {
                "N_ite": int(
                    result.n_early1 + result.n_early2 + result.n_accept + result.n_move_reject
                ),
                "N_pre": result.n_pre,
                "N_sim": result.n_sim,
                "N_acc": result.n_accept,
                "n_early1": result.n_early1,
                "n_early2": result.n_early2,
                "final_eps": result.final_eps,
                "rounds": len(result.rounds),
                "Eff": (
                    (result.n_early1 + result.n_early2)
                    / (result.n_early1 + result.n_early2 + result.n_move_reject)
                    if (result.n_early1 + result.n_early2 + result.n_move_reject)
                    else 0.0
                ),
            }
        else:
            cfg = self.mcmc_config()
            n_chains = int(sampler.get("chains", 1))
            runs = _run_chains(cfg, self.seed, n_chains, self.workers)
            for k, run in enumerate(runs):
                suffix = "" if k == 0 else f"_chain{k + 1}"
                save_trace_csv(run.trace, self.path(f"trace{suffix}.csv"), self.prior.dim)
                save_samples_csv(run.samples, self.path(f"samples{suffix}.csv"))
            summary = EffSummary.from_trace(runs[0].trace)
            counters = {
                "N_ite": summary.n_iterations,
                "N_pre": summary.n_pre,
                "N_sim": summary.n_sim,
                "N_acc": summary.n_accept,
                "n_early1": summary.n_early1,
                "n_early2": summary.n_early2,
                "init_sims": runs[0].init_sims,
                "Eff": (
                    summary.n_early / (summary.n_iterations - summary.n_accept)
                    if summary.n_iterations - summary.n_accept
                    else 0.0
                ),
            }
        self.timings["sampler"] = time.perf_counter() - t0
        return counters

    # -- metrics ------------------------------------------------------------

    def compute_metrics(self) -> list:
        metrics = []
        sampler = self.cfg["sampler"]
        if sampler["type"] in MCMC_TYPES:
            trace = load_trace_csv(self.path("trace.csv"))
            summary = EffSummary.from_trace(trace)
            rejected = summary.n_iterations - summary.n_accept
            metrics.append(
                {
                    "name": "efficiency",
                    "value": summary.n_early / rejected if rejected else 0.0,
                    "config": {"n_iterations": summary.n_iterations},
                }
            )
            if isinstance(self.spec, ToySpec):
                samples = load_samples_csv(self.path("samples.csv"))
                grid = np.linspace(-6.0, 6.0, 512)
                dens = kde_density(samples[:, 0], grid)
                oracle = toy_posterior_oracle(grid, float(self.cfg["eps"]))
                metrics.append(
                    {
                        "name": "l1_to_oracle_theta1",
                        "value": l1_distance(dens, oracle),
                        "config": {
                            "grid": [-6.0, 6.0, 512],
                            "estimator": "kde",
                            "eps": float(self.cfg["eps"]),
                            "seed": self.seed,
                        },
                    }
                )
            n_chains = int(sampler.get("chains", 1))
            if n_chains >= 2:
                chains = [load_samples_csv(self.path("samples.csv"))]
                for k in range(1, n_chains):
                    chains.append(load_samples_csv(self.path(f"samples_chain{k + 1}.csv")))
                length = min(c.shape[0] for c in chains)
                for j in range(self.prior.dim):
                    stat = gelman_rubin(np.array([c[:length, j] for c in chains]))
                    metrics.append(
                        {
                            "name": f"gelman_rubin_theta{j + 1}",
                            "value": stat,
                            "config": {"chains": n_chains, "length": length},
                        }
                    )
        else:
            particles = load_particles_csv(self.path("particles.csv"))
            alive = particles.alive
            metrics.append(
                {
                    "name": "unique_alive",
                    "value": int(particles.unique_alive_count()),
                    "config": {"particles": particles.n},
                }
            )
            metrics.append(
                {
                    "name": "weighted_mean_delta",
                    "value": float(
                        np.average(particles.deltas[alive], weights=particles.weights[alive])
                    ),
                    "config": {},
                }
            )
        with open(self.path("metrics.json"), "w") as fh:
            json.dump({"metrics": metrics}, fh, indent=1)
        return metrics

    # -- manifest -----------------------------------------------------------

    def write_manifest(self, counters: dict, status="ok", error=None) -> dict:
        artifacts = sorted(
            p.name for p in self.out_dir.iterdir() if p.is_file() and p.name != "manifest.json"
        )
        manifest = {
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "status": status,
            "artifacts": artifacts,
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
            "counters": counters,
        }
        if error is not None:
            manifest["error"] = error
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)
        return manifest


def _chain_worker(args):
    cfg, seed, k = args
    return run_chain(cfg, RngStream(seed, (_S_SAMPLER, k)))


def _run_chains(cfg: SamplerConfig, seed: int, n_chains: int, workers: int):
    tasks = [(cfg, seed, k) for k in range(n_chains)]
    if workers > 1 and n_chains > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(workers, n_chains), mp_context=ctx) as pool:
            return list(pool.map(_chain_worker, tasks))
    return [_chain_worker(t) for t in tasks]


def run_experiment(config_path, seed=None, out_dir=None, workers=1) -> dict:
    """Full pipeline: observed -> pilot -> GP -> sampler -> metrics -> manifest."""
    cfg = load_config(config_path)
    exp = Experiment(cfg, Path(config_path).parent, seed, out_dir, workers)
    try:
        exp.ensure_observed()
        if exp._needs_gp():
            exp.ensure_gp()
        elif "pilot" in cfg and not exp.path("training.csv").exists():
            exp.run_pilot()
        counters = exp.run_sampler()
        exp.compute_metrics()
    except Exception as exc:
        exp.out_dir.mkdir(parents=True, exist_ok=True)
        exp.write_manifest({}, status="error", error=f"{type(exc).__name__}: {exc}")
        raise
    return exp.write_manifest(counters)


# ---------------------------------------------------------------------------
# Plot-ready data
# ---------------------------------------------------------------------------

PLOT_KINDS = ("marginal_density", "trace", "scatter2d", "gp_fit_1d")


def emit_plotdata(exp: Experiment, kind: str) -> list:
    """Write plot-ready CSVs derived from a run directory's artifacts."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"plotdata kind: unknown kind {kind!r}; choose from {PLOT_KINDS}")
    out = []
    if kind == "marginal_density":
        if exp.path("samples.csv").exists():
            samples = load_samples_csv(exp.path("samples.csv"))
            weights = None
        elif exp.path("particles.csv").exists():
            particles = load_particles_csv(exp.path("particles.csv"))
            samples, weights = particles.thetas, particles.weights
        else:
            raise FileNotFoundError("no samples.csv or particles.csv in the run directory")
        for j in range(samples.shape[1]):
            col = samples[:, j]
            lo, hi = col.min(), col.max()
            bw = silverman_bandwidth(col)
            pad = max(3.5 * bw, 0.05 * (hi - lo), 1e-6)
            grid = np.linspace(lo - pad, hi + pad, 512)
            dens = kde_density(col, grid, bandwidth=bw, weights=weights)
            path = exp.path(f"plot_marginal_theta{j + 1}.csv")
            _write_columns(path, ["theta", "density"], np.c_[grid, dens.values])
            out.append(path)
    elif kind == "trace":
        samples = load_samples_csv(exp.path("samples.csv"))
        path = exp.path("plot_trace.csv")
        cols = ["iteration"] + [f"theta_{j + 1}" for j in range(samples.shape[1])]
        _write_columns(path, cols, np.c_[np.arange(samples.shape[0]), samples])
        out.append(path)
    elif kind == "scatter2d":
        trace = load_trace_csv(exp.path("trace.csv"))
        accepted = np.array([rec.proposed for rec in trace if rec.outcome == "accept"])
        if accepted.size == 0:
            accepted = accepted.reshape(0, exp.prior.dim)
        if accepted.shape[1] < 2:
            raise ConfigError("scatter2d needs a model with at least 2 parameters")
        path = exp.path("plot_scatter2d.csv")
        _write_columns(path, ["theta_1", "theta_2"], accepted[:, :2])
        out.append(path)
    else:  # gp_fit_1d
        model = exp.ensure_gp()
        if model.dim != 1:
            raise ConfigError("gp_fit_1d needs a 1-d parameter space")
        marg = exp.prior.marginals[0]
        if marg.dist == "uniform":
            lo, hi = marg.a, marg.b
        else:
            lo, hi = model.thetas.min(), model.thetas.max()
        grid = np.linspace(lo, hi, 512)
        mu, v = model.predict_batch(grid[:, None])
        band = 1.96 * np.sqrt(v + model.noise_var)
        path = exp.path("plot_gp_fit_1d.csv")
        _write_columns(path, ["theta", "mean", "lo", "hi"], np.c_[grid, mu, mu - band, mu + band])
        out.append(path)
    return out


def _write_columns(path, names, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


def _experiment_from_args(args) -> Experiment:
    cfg = load_config(args.config)
    return Experiment(cfg, Path(args.config).parent, args.seed, args.out, args.workers)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ejabc",
        description="Early-rejection ABC samplers with a GP discrepancy surrogate",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "run": "run the whole pipeline from a config file",
        "pilot": "collect GP training data only",
        "fit-gp": "fit the GP surrogate from persisted training data",
        "sample": "run the configured MCMC sampler",
        "smc": "run the configured SMC sampler",
        "metrics": "compute metrics from persisted artifacts",
        "plotdata": "emit plot-ready CSV files",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.add_argument("--out", default=None, help="output directory (overrides EJABC_OUT)")
        if name == "plotdata":
            p.add_argument("--kind", required=True, choices=PLOT_KINDS)
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            manifest = run_experiment(args.config, args.seed, args.out, args.workers)
            print(json.dumps(manifest["counters"], indent=1))
        elif args.command == "pilot":
            exp = _experiment_from_args(args)
            train = exp.run_pilot()
            print(f"wrote {exp.path('training.csv')} ({train.size} pairs)")
        elif args.command == "fit-gp":
            exp = _experiment_from_args(args)
            model = exp.fit_gp_phase()
            print(f"wrote {exp.path('gp_model.json')} (lengthscales {model.lengthscales})")
        elif args.command in ("sample", "smc"):
            exp = _experiment_from_args(args)
            expected = "smc" if args.command == "smc" else "mcmc"
            actual = "smc" if exp.cfg["sampler"]["type"] == "smc" else "mcmc"
            if expected != actual:
                raise ConfigError(
                    f"config.sampler.type: {exp.cfg['sampler']['type']!r} does not match "
                    f"the {args.command!r} subcommand"
                )
            counters = exp.run_sampler()
            exp.write_manifest(counters)
            print(json.dumps(counters, indent=1))
        elif args.command == "metrics":
            exp = _experiment_from_args(args)
            metrics = exp.compute_metrics()
            print(json.dumps({"metrics": metrics}, indent=1))
        elif args.command == "plotdata":
            exp = _experiment_from_args(args)
            for path in emit_plotdata(exp, args.kind):
                print(f"wrote {path}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
