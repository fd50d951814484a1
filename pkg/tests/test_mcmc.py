import itertools
import math

import numpy as np
import pytest

from ejabc.core import (
    InitializationFailure,
    KernelSpec,
    Marginal,
    PriorSpec,
    ProposalSpec,
    RngStream,
    abs_discrepancy,
)
from ejabc.diagnostics import EffSummary, kde_density, l1_distance, toy_posterior_oracle
from ejabc.mcmc import (
    ChainState,
    SamplerConfig,
    abc_mcmc_step,
    acceptance_ratio,
    ej_early_bound,
    ej_mcmc_step,
    initialize_chain,
    load_samples_csv,
    load_trace_csv,
    oej_early_bound,
    oej_mcmc_step,
    pseudo_acceptance_ratio,
    run_chain,
    save_samples_csv,
    save_trace_csv,
)
from ejabc.simulators import ToySpec, make_delta_fn

TOY_PRIOR = PriorSpec([Marginal("uniform", -6, 6)])
TOY_DELTA = make_delta_fn(ToySpec(), [[1.0]], abs_discrepancy)


def toy_config(sampler="abc_mcmc", n=1000, eps=0.6, h_fn=None, delta_fn=TOY_DELTA, **kw):
    return SamplerConfig(
        sampler=sampler,
        kernel=KernelSpec("uniform"),
        eps=eps,
        prior=TOY_PRIOR,
        proposal=ProposalSpec.from_sd(0.3),
        n_iterations=n,
        delta_fn=delta_fn,
        h_fn=h_fn,
        **kw,
    )


def constant_delta(value):
    return lambda theta, rng: value


class TestPlainStep:
    def test_always_accept_inside_tolerance(self):
        # uniform prior, symmetric proposal, uniform kernel, delta* <= eps
        cfg = toy_config(delta_fn=constant_delta(0.1))
        state = ChainState(np.array([0.0]), 0.1, 0.0, 1.0, 1.0)
        rng = RngStream(1)
        for _ in range(200):
            state, rec = abc_mcmc_step(state, cfg, rng)
            assert rec.outcome == "accept"
            assert rec.sim_increment == 1

    def test_always_reject_outside_tolerance(self):
        cfg = toy_config(delta_fn=constant_delta(0.7))
        state = ChainState(np.array([0.0]), 0.1, 0.0, 1.0, 1.0)
        rng = RngStream(2)
        for _ in range(200):
            new, rec = abc_mcmc_step(state, cfg, rng)
            assert rec.outcome == "sim_reject"
            assert new is state

    def test_out_of_support_costs_no_simulation(self):
        calls = []

        def counting_delta(theta, rng):
            calls.append(theta)
            return 0.1

        prior = PriorSpec([Marginal("uniform", 0, 1)])
        cfg = SamplerConfig(
            "abc_mcmc",
            KernelSpec("uniform"),
            0.6,
            prior,
            ProposalSpec.from_sd(5.0),
            0,
            counting_delta,
        )
        state = ChainState(np.array([0.5]), 0.1, 0.0, 1.0, 1.0)
        rng = RngStream(3)
        early = 0
        for _ in range(300):
            _, rec = abc_mcmc_step(state, cfg, rng)
            if rec.outcome == "early_reject_stage1":
                early += 1
                assert rec.sim_increment == 0
        assert early > 50
        assert len(calls) == 300 - early

    def test_toy_chain_matches_analytic_posterior(self):
        # proposal sd 0.8 gives ~1400 mode crossings per 1e5 iterations,
        # enough for a single-run histogram comparison against the oracle
        cfg = toy_config(n=100_000)
        cfg.proposal = ProposalSpec.from_sd(0.8)
        run = run_chain(cfg, RngStream(4))
        edges = np.linspace(-6, 6, 61)
        centers = 0.5 * (edges[:-1] + edges[1:])
        dens, _ = np.histogram(run.samples[:, 0], bins=edges, density=True)
        oracle = toy_posterior_oracle(centers, 0.6)
        l1 = np.sum(np.abs(dens - oracle.values)) * (edges[1] - edges[0])
        assert l1 < 0.1


class TestOejStep:
    def test_no_early_rejection_with_uniform_prior(self):
        # bound = 1/K(delta_n) >= 1 inside the support, so stage 1 never fires
        cfg = toy_config("oej_mcmc", n=5000)
        run = run_chain(cfg, RngStream(5))
        summary = EffSummary.from_trace(run.trace)
        assert summary.n_early == 0
        assert summary.n_sim == len(run.trace)

    def test_out_of_support_early_rejected(self):
        prior = PriorSpec([Marginal("uniform", 0, 1)])
        cfg = SamplerConfig(
            "oej_mcmc",
            KernelSpec("uniform"),
            0.6,
            prior,
            ProposalSpec.from_sd(5.0),
            400,
            constant_delta(0.1),
            init_theta=np.array([0.5]),
        )
        run = run_chain(cfg, RngStream(6))
        summary = EffSummary.from_trace(run.trace)
        assert summary.n_early1 > 0
        assert summary.n_sim == len(run.trace) - summary.n_early1

    def test_equivalent_to_plain_sampler_on_coupled_seeds(self):
        # uniform prior + symmetric proposal: the single-w two-stage test
        # never fires early, so the coupled chains coincide exactly
        grid = np.linspace(-6, 6, 512)
        plain = run_chain(toy_config("abc_mcmc", n=20_000), RngStream(7))
        oej = run_chain(toy_config("oej_mcmc", n=20_000), RngStream(7))
        assert np.array_equal(plain.samples, oej.samples)
        d = l1_distance(
            kde_density(plain.samples[:, 0], grid), kde_density(oej.samples[:, 0], grid)
        )
        assert d < 0.05


class TestEjStep:
    def test_stage2_rejects_when_h_above_eps(self):
        # uniform kernel: K(h*) = 0 -> early rejection independent of priors
        h_fn = lambda th: 0.0 if abs(th[0]) < 0.1 else 10.0
        cfg = toy_config("ej_mcmc", n=0, h_fn=h_fn)
        state = ChainState(np.array([0.0]), 0.1, 0.0, 1.0, 1.0)
        rng = RngStream(8)
        outcomes = set()
        for _ in range(300):
            new, rec = ej_mcmc_step(state, cfg, rng)
            outcomes.add(rec.outcome)
            if abs(rec.proposed[0]) >= 0.1:
                assert rec.outcome == "early_reject_stage2"
                assert rec.sim_increment == 0
                assert rec.h == 10.0
        assert "early_reject_stage2" in outcomes

    def test_accepts_when_all_bounds_pass(self):
        # every in-support proposal has h < eps and delta <= eps, so the
        # pseudo acceptance probability is exactly 1
        cfg = toy_config("ej_mcmc", n=0, h_fn=lambda th: 0.0, delta_fn=constant_delta(0.1))
        state = ChainState(np.array([0.0]), 0.1, 0.0, 1.0, 1.0)
        rng = RngStream(9)
        accepted = 0
        for _ in range(100):
            state, rec = ej_mcmc_step(state, cfg, rng)
            if abs(rec.proposed[0]) <= 6.0:
                assert rec.outcome == "accept"
                accepted += 1
        assert accepted > 90

    def test_stage1_never_fires_with_uniform_prior(self):
        h_fn = lambda th: abs(th[0] - 1.0) - 0.4  # varies, sometimes above eps
        cfg = toy_config("ej_mcmc", n=4000, h_fn=h_fn)
        run = run_chain(cfg, RngStream(10))
        summary = EffSummary.from_trace(run.trace)
        assert summary.n_early1 == 0
        assert summary.n_early2 > 0
        # h recorded exactly for the records that reached stage 2
        assert summary.n_pre == sum(rec.h is not None for rec in run.trace)

    def test_degenerate_h_reproduces_oej_trace(self):
        n = 3000
        ej = run_chain(toy_config("ej_mcmc", n=n, h_fn=lambda th: 0.0), RngStream(11))
        oej = run_chain(toy_config("oej_mcmc", n=n), RngStream(11))
        assert np.array_equal(ej.samples, oej.samples)
        for a, b in zip(ej.trace, oej.trace):
            assert a.outcome == b.outcome
            assert np.array_equal(a.proposed, b.proposed)
            assert a.delta == b.delta and a.sim_increment == b.sim_increment

    def test_failed_simulation_rejects(self):
        cfg = toy_config("ej_mcmc", n=0, h_fn=lambda th: 0.0, delta_fn=constant_delta(math.inf))
        state = ChainState(np.array([0.0]), 0.1, 0.0, 1.0, 1.0)
        rng = RngStream(12)
        for _ in range(50):
            new, rec = ej_mcmc_step(state, cfg, rng)
            assert rec.outcome == "sim_reject" and rec.sim_failed
            assert new is state


class TestAcceptanceAlgebra:
    KERNS = (0.05, 0.3, 0.7, 1.0)
    RATIOS = (0.25, 1.0, 3.0)

    def test_staged_bounds_are_nested(self):
        for ratio, kd_n, kh_n, kh_s, kd_s in itertools.product(
            self.RATIOS, self.KERNS, self.KERNS, (0.0,) + self.KERNS, (0.0,) + self.KERNS
        ):
            stage1 = ratio / min(kd_n, kh_n)
            stage2 = ej_early_bound(ratio, kh_s, kd_n, kh_n)
            alpha = pseudo_acceptance_ratio(ratio, kd_s, kh_s, kd_n, kh_n)
            assert alpha <= stage2 + 1e-15
            assert stage2 <= stage1 + 1e-15

    def test_single_uniform_equals_direct_test(self):
        # staged accept (w below every bound) iff w < pseudo acceptance
        for ratio, kd_n, kh_n, kh_s, kd_s in itertools.product(
            self.RATIOS, self.KERNS, self.KERNS, (0.0,) + self.KERNS, (0.0,) + self.KERNS
        ):
            stage1 = ratio / min(kd_n, kh_n)
            stage2 = ej_early_bound(ratio, kh_s, kd_n, kh_n)
            alpha = pseudo_acceptance_ratio(ratio, kd_s, kh_s, kd_n, kh_n)
            for w in np.linspace(0.0, 1.0, 101):
                staged = w < stage1 and w < stage2 and w < alpha
                assert staged == (w < alpha)

    def test_dominance_uniform_kernel_states(self):
        # reachable uniform-kernel states have kernel values exactly 1
        for ratio, kh_s in itertools.product(self.RATIOS, (0.0, 1.0)):
            assert ej_early_bound(ratio, kh_s, 1.0, 1.0) <= oej_early_bound(ratio, 1.0) + 1e-15

    def test_dominance_when_h_below_delta(self):
        # any kernel family: h(theta_n) <= Delta_n means kern_h_n >= kern_delta_n
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            ratio = math.exp(rng.normal())
            kd_n = rng.uniform(0.05, 1.0)
            kh_n = rng.uniform(kd_n, 1.0)
            kh_s = rng.uniform(0.0, 1.0)
            assert (
                ej_early_bound(ratio, kh_s, kd_n, kh_n)
                <= oej_early_bound(ratio, kd_n) + 1e-12
            )

    def test_pseudo_acceptance_at_most_one(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            alpha = pseudo_acceptance_ratio(
                math.exp(rng.normal()),
                rng.uniform(0, 1),
                rng.uniform(0, 1),
                rng.uniform(0.01, 1),
                rng.uniform(0.01, 1),
            )
            assert 0.0 <= alpha <= 1.0

    def test_pseudo_equals_plain_when_h_conservative(self):
        # h <= Delta at both states: min{K(Delta), K(h)} = K(Delta)
        rng = np.random.default_rng(2)
        for _ in range(2000):
            ratio = math.exp(rng.normal())
            kd_n = rng.uniform(0.05, 1.0)
            kd_s = rng.uniform(0.0, 1.0)
            kh_n = rng.uniform(kd_n, 1.0)
            kh_s = rng.uniform(kd_s, 1.0)
            assert pseudo_acceptance_ratio(ratio, kd_s, kh_s, kd_n, kh_n) == pytest.approx(
                acceptance_ratio(ratio, kd_s, kd_n)
            )


class TestRunChain:
    def test_zero_iterations(self):
        run = run_chain(toy_config(n=0), RngStream(13))
        assert run.samples.shape == (0, 1)
        assert run.trace == []

    def test_deterministic_given_seed(self):
        a = run_chain(toy_config(n=500), RngStream(14))
        b = run_chain(toy_config(n=500), RngStream(14))
        assert np.array_equal(a.samples, b.samples)

    def test_initialization_counts_sims(self):
        state, sims = initialize_chain(toy_config(), RngStream(15))
        assert sims >= 1
        assert state.kern_delta > 0

    def test_initialization_failure(self):
        cfg = toy_config(eps=1e-9)
        cfg.init_retry_cap = 50
        with pytest.raises(InitializationFailure):
            initialize_chain(cfg, RngStream(16))

    def test_init_theta_outside_support_rejected(self):
        cfg = toy_config(init_theta=np.array([9.0]))
        with pytest.raises(ValueError):
            initialize_chain(cfg, RngStream(17))

    def test_ej_requires_surrogate(self):
        with pytest.raises(ValueError):
            toy_config("ej_mcmc")

    def test_ej_initial_state_respects_h(self):
        h_fn = lambda th: 0.0 if th[0] > 0 else 10.0
        cfg = toy_config("ej_mcmc", h_fn=h_fn)
        state, _ = initialize_chain(cfg, RngStream(18))
        assert state.theta[0] > 0
        assert state.kern_h == 1.0


class TestPersistence:
    def test_trace_roundtrip(self, tmp_path):
        run = run_chain(toy_config(n=50), RngStream(19))
        path = tmp_path / "trace.csv"
        save_trace_csv(run.trace, path, dim=1)
        back = load_trace_csv(path)
        assert len(back) == 50
        for a, b in zip(run.trace, back):
            assert a.outcome == b.outcome
            assert np.array_equal(a.proposed, b.proposed)
            assert a.delta == b.delta and a.h == b.h and a.sim_increment == b.sim_increment

    def test_samples_roundtrip(self, tmp_path):
        run = run_chain(toy_config(n=20), RngStream(20))
        path = tmp_path / "samples.csv"
        save_samples_csv(run.samples, path)
        assert np.array_equal(load_samples_csv(path), run.samples)
