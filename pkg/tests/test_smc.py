import math

import numpy as np
import pytest

from ejabc.core import (
    DegeneracyError,
    KernelSpec,
    Marginal,
    PriorSpec,
    RngStream,
    abs_discrepancy,
    kernel_eval,
)
from ejabc.smc import (
    ParticleSet,
    SmcConfig,
    adapt_proposal_cov,
    collect_prior_training,
    collect_training_data,
    effective_sample_size,
    load_particles_csv,
    resample,
    reweight,
    run_ejasmc,
    save_particles_csv,
    save_report_csv,
    select_epsilon,
)
from ejabc.simulators import ToySpec, make_delta_fn

TOY_PRIOR = PriorSpec([Marginal("uniform", -6, 6)])
TOY_DELTA = make_delta_fn(ToySpec(), [[1.0]], abs_discrepancy)
UNIFORM = KernelSpec("uniform")


def particle_set(deltas, thetas=None, weights=None):
    deltas = np.asarray(deltas, dtype=float)
    n = deltas.shape[0]
    if thetas is None:
        thetas = np.arange(n, dtype=float)[:, None]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    return ParticleSet(np.asarray(thetas, dtype=float), deltas, np.asarray(weights, float))


def toy_smc(move="oej", n_particles=128, gamma=0.5, h_fn=None, **kw):
    return SmcConfig(
        n_particles=n_particles,
        gamma=gamma,
        kernel=UNIFORM,
        prior=TOY_PRIOR,
        delta_fn=TOY_DELTA,
        move_sampler=move,
        h_fn=h_fn,
        **kw,
    )


class TestSelectEpsilon:
    def test_order_statistic(self):
        parts = particle_set([1.0, 2.0, 3.0, 4.0])
        assert select_epsilon(parts, 0.5, UNIFORM, math.inf) == 2.0

    def test_identical_deltas(self):
        parts = particle_set([3.3, 3.3, 3.3, 3.3])
        eps = select_epsilon(parts, 0.5, UNIFORM, math.inf)
        assert eps == 3.3
        re = reweight(parts, math.inf, eps, UNIFORM)
        assert re.unique_alive_count() == 4

    def test_keep_everyone_limit(self):
        parts = particle_set([1.0, 2.0, 3.0, 4.0])
        assert select_epsilon(parts, 0.999, UNIFORM, math.inf) == 4.0

    def test_degeneracy_when_cap_too_small(self):
        parts = particle_set([1.0, 2.0, 3.0, 4.0])
        with pytest.raises(DegeneracyError):
            select_epsilon(parts, 0.75, UNIFORM, 1.5)

    def test_bisection_matches_grid_scan(self):
        kernel = KernelSpec("epanechnikov")
        rng = np.random.default_rng(3)
        deltas = rng.uniform(0.5, 5.0, 40)
        parts = particle_set(deltas)
        gamma = 0.4
        eps = select_epsilon(parts, gamma, kernel, 6.0)
        target = math.ceil(gamma * parts.n)
        # oracle: scan a fine tolerance grid for the smallest feasible value
        grid = np.linspace(deltas.min(), 6.0, 500_000)
        counts = (deltas[None, :] < grid[:, None]).sum(axis=1)
        oracle = grid[np.argmax(counts >= target)]
        assert eps == pytest.approx(oracle, rel=1e-4)
        alive = (kernel_eval(kernel, deltas, eps) > 0).sum()
        assert alive >= target

    def test_respects_eps_prev(self):
        parts = particle_set([1.0, 2.0, 3.0, 4.0])
        assert select_epsilon(parts, 0.5, UNIFORM, 2.0) == 2.0


class TestReweight:
    def test_unchanged_when_eps_equal(self):
        parts = particle_set([0.2, 0.4, 0.6])
        out = reweight(parts, 1.0, 1.0, KernelSpec("triangle"))
        assert np.allclose(out.weights, parts.weights)

    def test_uniform_kernel_zeroes_dead(self):
        parts = particle_set([0.2, 0.5, 0.9])
        out = reweight(parts, 1.0, 0.6, UNIFORM)
        assert out.weights[2] == 0.0
        assert np.allclose(out.weights[:2], 0.5)

    def test_epanechnikov_hand_ratio(self):
        # single alive particle keeps weight 1; check the raw ratio instead
        parts = particle_set([0.5, 0.5], weights=[0.5, 0.5])
        out = reweight(parts, 1.0, 0.8, KernelSpec("epanechnikov"))
        assert np.allclose(out.weights, 0.5)  # common factor 0.8125 cancels
        k = KernelSpec("epanechnikov")
        ratio = kernel_eval(k, 0.5, 0.8) / kernel_eval(k, 0.5, 1.0)
        assert ratio == pytest.approx(0.8125)

    def test_all_dead_raises(self):
        parts = particle_set([2.0, 3.0])
        with pytest.raises(DegeneracyError):
            reweight(parts, 5.0, 1.0, UNIFORM)

    def test_eps_must_not_grow(self):
        parts = particle_set([0.2])
        with pytest.raises(ValueError):
            reweight(parts, 1.0, 2.0, UNIFORM)


class TestProposalCov:
    def test_equal_weights_match_unweighted(self):
        angles = np.linspace(0, 2 * math.pi, 16, endpoint=False)
        thetas = np.c_[np.cos(angles), np.sin(angles)]
        parts = particle_set(np.ones(16), thetas=thetas)
        cov = adapt_proposal_cov(parts)
        expected = np.cov(thetas.T, ddof=0)
        assert np.allclose(cov, expected, atol=1e-10)

    def test_weighted_pair_variance(self):
        parts = particle_set(
            [0.1, 0.1], thetas=[[0.0], [2.0]], weights=[0.75, 0.25]
        )
        cov = adapt_proposal_cov(parts)
        assert cov[0, 0] == pytest.approx(0.75, rel=1e-9)

    def test_single_unique_particle_degenerate(self):
        parts = particle_set([0.1, 0.1], thetas=[[1.0], [1.0]])
        with pytest.raises(DegeneracyError):
            adapt_proposal_cov(parts)

    def test_single_positive_weight_degenerate(self):
        parts = particle_set([0.1, 0.1], thetas=[[0.0], [2.0]], weights=[1.0, 0.0])
        with pytest.raises(DegeneracyError):
            adapt_proposal_cov(parts)


class TestResample:
    def test_equal_weights_identity(self):
        parts = particle_set([1.0, 2.0, 3.0, 4.0])
        assert resample(parts, RngStream(1)) is parts

    def test_degenerate_weight_copies(self):
        parts = particle_set([1.0, 2.0, 3.0], weights=[0.0, 1.0, 0.0])
        out = resample(parts, RngStream(2))
        assert np.all(out.thetas == 1.0)
        assert np.allclose(out.weights, 1 / 3)

    def test_expected_copy_counts(self):
        weights = np.array([0.5, 0.3, 0.15, 0.05])
        parts = particle_set([1.0, 2.0, 3.0, 4.0], weights=weights)
        n_trials = 10_000
        counts = np.zeros(4)
        root = RngStream(3)
        for t in range(n_trials):
            out = resample(parts, root.substream(t), threshold=2.0)
            for j in range(4):
                counts[j] += np.sum(out.thetas[:, 0] == j)
        mean_counts = counts / n_trials
        # systematic resampling: per-trial variance below 1, so 3 sigma of the
        # mean is at most 3/sqrt(trials)
        assert np.allclose(mean_counts, 4 * weights, atol=3 / math.sqrt(n_trials))

    def test_ess(self):
        assert effective_sample_size(np.full(8, 1 / 8)) == pytest.approx(8.0)
        assert effective_sample_size([1.0, 0.0]) == pytest.approx(1.0)


class TestRunEjasmc:
    def test_eps_nonincreasing_and_budget_stop(self):
        cfg = toy_smc(n_particles=128, sim_budget=2000)
        res = run_ejasmc(cfg, RngStream(4))
        eps_seq = [r.eps for r in res.rounds]
        assert all(a >= b for a, b in zip(eps_seq, eps_seq[1:]))
        assert res.n_sim >= 2000
        assert res.n_sim - res.rounds[-1].n_sim < 2000

    def test_report_counters_consistent(self):
        cfg = toy_smc(n_particles=64, sim_budget=1000)
        res = run_ejasmc(cfg, RngStream(5))
        assert res.n_sim == 64 + sum(r.n_sim for r in res.rounds)
        assert res.n_early1 == sum(r.n_early1 for r in res.rounds)
        for rep in res.rounds:
            assert rep.unique_alive >= math.ceil(cfg.gamma * cfg.n_particles)

    def test_weighted_delta_mean_decreases(self):
        cfg = toy_smc(n_particles=128, max_rounds=6)
        res = run_ejasmc(cfg, RngStream(6))
        assert len(res.rounds) == 6
        alive = res.particles.alive
        final_mean = np.average(res.particles.deltas[alive], weights=res.particles.weights[alive])
        assert final_mean <= res.rounds[0].eps

    def test_zero_moves_is_importance_reweighting(self):
        cfg = toy_smc(n_particles=256, moves_per_round=0, max_rounds=1, resample_threshold=0.0)
        res = run_ejasmc(cfg, RngStream(7))
        # reproduce round 0 draws and reweight them directly
        thetas = np.empty((256, 1))
        deltas = np.empty(256)
        rng = RngStream(7)
        for i in range(256):
            sub = rng.substream(0, i)
            thetas[i] = TOY_PRIOR.sample(sub)
            deltas[i] = TOY_DELTA(thetas[i], sub)
        eps = res.rounds[0].eps
        w = np.where(deltas <= eps, 1.0, 0.0)
        assert np.array_equal(res.particles.thetas, thetas)
        assert np.allclose(res.particles.weights, w / w.sum())

    def test_ej_with_zero_h_matches_oej(self):
        kw = dict(n_particles=64, sim_budget=600)
        oej = run_ejasmc(toy_smc("oej", **kw), RngStream(8))
        ej = run_ejasmc(toy_smc("ej", h_fn=lambda th: 0.0, **kw), RngStream(8))
        assert np.array_equal(oej.particles.thetas, ej.particles.thetas)
        assert np.array_equal(oej.particles.weights, ej.particles.weights)
        assert oej.n_sim == ej.n_sim

    def test_ej_moves_early_reject(self):
        # a surrogate that declares half the space hopeless must produce
        # stage-2 early rejections and save simulations
        h_fn = lambda th: 0.0 if th[0] < 0.5 else 10.0
        cfg = toy_smc("ej", h_fn=h_fn, n_particles=128, sim_budget=1500)
        res = run_ejasmc(cfg, RngStream(9))
        assert res.n_early2 > 0
        assert res.n_pre > 0
        # nearly all surviving mass concentrates where the surrogate allows
        alive = res.particles.alive
        blocked = res.particles.thetas[alive, 0] >= 0.5
        assert res.particles.weights[alive][blocked].sum() < 0.15

    def test_workers_match_serial(self):
        cfg = toy_smc("ej", h_fn=lambda th: 0.0 if th[0] < 0.5 else 10.0,
                      n_particles=96, sim_budget=800)
        serial = run_ejasmc(cfg, RngStream(10), workers=1)
        parallel = run_ejasmc(cfg, RngStream(10), workers=2)
        assert np.array_equal(serial.particles.thetas, parallel.particles.thetas)
        assert np.array_equal(serial.particles.deltas, parallel.particles.deltas)
        assert serial.n_sim == parallel.n_sim

    def test_needs_stopping_rule(self):
        with pytest.raises(ValueError):
            toy_smc()

    def test_target_eps_stop(self):
        cfg = toy_smc(n_particles=128, target_eps=1.5, sim_budget=50_000)
        res = run_ejasmc(cfg, RngStream(11))
        assert res.final_eps <= 1.5 or res.n_sim >= 50_000


class TestTrainingData:
    def test_budget_reached_exactly(self):
        cfg = toy_smc(n_particles=64, sim_budget=10_000)
        train = collect_training_data(cfg, 500, RngStream(12))
        assert train.size == 500
        assert train.dim == 1

    def test_pairs_concentrate_at_low_discrepancy(self):
        cfg = toy_smc(n_particles=64, sim_budget=10_000)
        train = collect_training_data(cfg, 800, RngStream(13))
        prior_pairs = collect_prior_training(800, TOY_PRIOR, TOY_DELTA, RngStream(14))
        assert np.median(train.deltas) < np.median(prior_pairs.deltas)

    def test_tiny_budget_valid(self):
        cfg = toy_smc(n_particles=64, sim_budget=10_000)
        train = collect_training_data(cfg, 5, RngStream(15))
        assert train.size == 5

    def test_unreachable_budget_warns(self):
        cfg = toy_smc(n_particles=16, max_rounds=1)
        with pytest.warns(RuntimeWarning):
            train = collect_training_data(cfg, 5000, RngStream(16))
        assert train.size < 5000

    def test_prior_training_deterministic(self):
        a = collect_prior_training(50, TOY_PRIOR, TOY_DELTA, RngStream(17))
        b = collect_prior_training(50, TOY_PRIOR, TOY_DELTA, RngStream(17))
        assert np.array_equal(a.thetas, b.thetas)
        assert np.array_equal(a.deltas, b.deltas)


class TestPersistence:
    def test_particles_roundtrip(self, tmp_path):
        cfg = toy_smc(n_particles=32, max_rounds=2)
        res = run_ejasmc(cfg, RngStream(18))
        path = tmp_path / "particles.csv"
        save_particles_csv(res.particles, path)
        back = load_particles_csv(path)
        assert np.array_equal(back.thetas, res.particles.thetas)
        assert np.array_equal(back.deltas, res.particles.deltas)
        assert np.allclose(back.weights, res.particles.weights)

    def test_report_csv_header(self, tmp_path):
        cfg = toy_smc(n_particles=32, max_rounds=2)
        res = run_ejasmc(cfg, RngStream(19))
        path = tmp_path / "report.csv"
        save_report_csv(res.rounds, path)
        header = path.read_text().splitlines()[0]
        assert header == "round,eps,unique_alive,accept_rate,n_sim,n_early1,n_early2"
