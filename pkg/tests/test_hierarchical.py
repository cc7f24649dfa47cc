import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hellbayes.density import DensityEnsemble, GaussianMixtureDensity
from hellbayes.dpmix import McmcConfig, run_blocked_gibbs
from hellbayes.estimators import data_grid
from hellbayes.exceptions import ConfigError
from hellbayes.family import normal_location, normal_location_scale
from hellbayes.hierarchical import (
    HierarchicalHellingerPosterior,
    PriorSpec,
    ThetaSamplePool,
    _loc_scale_logpost,
    clean_subset_reference_posterior,
    conjugate_normal_posterior,
    eap_and_ci,
    hellinger_log_kernel,
    hierarchical_posterior,
    location_affinity_table,
    metropolis_chain,
    random_walk_metropolis,
)
from hellbayes.quadrature import HellingerObjective, build_grid

N = GaussianMixtureDensity.normal
LOC = normal_location(1.0)
GRID = build_grid([5.0], margin=10)
SHORT = McmcConfig(4000, 2000, 2, seed=0)


def batch_means_se(x, batches=50):
    means = np.array([b.mean() for b in np.array_split(np.asarray(x), batches)])
    return means.std(ddof=1) / math.sqrt(batches)


class TestLogKernel:
    def test_zero_distance_at_prior_mode(self):
        prior = PriorSpec(5.0, 25.0)
        expected = -0.5 * math.log(2 * math.pi * 25.0)
        assert hellinger_log_kernel([5.0], N(5, 1), 20, prior, GRID, LOC) == pytest.approx(expected, abs=1e-8)

    def test_linear_in_n(self):
        prior = PriorSpec()
        g = GaussianMixtureDensity(np.array([0.7, 0.3]), np.array([4.0, 7.0]), np.array([1.0, 2.0]))
        d = HellingerObjective(LOC, g, GRID)([4.6])[0]
        k40 = hellinger_log_kernel([4.6], g, 40, prior, GRID, LOC)
        k20 = hellinger_log_kernel([4.6], g, 20, prior, GRID, LOC)
        assert k40 - k20 == pytest.approx(-2 * 20 * d, abs=1e-10)

    def test_flat_prior_maximiser(self):
        prior = PriorSpec(0.0, 1e6)
        thetas = np.arange(3.0, 7.0, 1e-3)
        vals = [hellinger_log_kernel([t], N(5, 1), 20, prior, GRID, LOC) for t in thetas]
        assert abs(thetas[int(np.argmax(vals))] - 5.0) <= 1e-2

    def test_out_of_bounds(self):
        fam = normal_location_scale()
        assert hellinger_log_kernel([0.0, -1.0], N(0, 1), 10, PriorSpec(), GRID, fam) == -math.inf


class TestAffinityTable:
    def test_matches_direct_quadrature(self):
        g = GaussianMixtureDensity(np.array([0.6, 0.4]), np.array([3.0, 8.0]), np.array([0.5, 2.0]))
        root = np.sqrt(g.pdf(GRID.nodes))
        t0, step, table = location_affinity_table(root, GRID, 1.0)
        obj = HellingerObjective(LOC, g, GRID)
        for theta in (2.0, 4.37, 5.0, 9.9):
            i = (theta - t0) / step
            lo = int(math.floor(i))
            interp = table[lo] + (i - lo) * (table[lo + 1] - table[lo])
            assert interp == pytest.approx(obj.affinity([theta])[0], abs=1e-5)


class TestMetropolis:
    def test_prior_recovery(self):
        prior = PriorSpec(2.0, 1.0)
        draws, rate = metropolis_chain(N(5, 1), 0, prior, LOC, GRID, proposal_sd=2.4,
                                       mcmc=McmcConfig(40000, 20000, 1, seed=5))
        assert draws.shape == (20000, 1)
        assert abs(draws.mean() - 2.0) <= 3 * batch_means_se(draws[:, 0])
        assert 0 < rate < 1

    def test_mode_region(self):
        prior = PriorSpec(0.0, 25.0)
        draws, _ = metropolis_chain(N(5, 1), 20, prior, LOC, GRID, proposal_sd=0.5,
                                    mcmc=McmcConfig(20000, 10000, 10, seed=1))
        thetas = np.arange(3.0, 7.0, 1e-3)
        vals = [hellinger_log_kernel([t], N(5, 1), 20, prior, GRID, LOC) for t in thetas]
        assert abs(draws.mean() - thetas[int(np.argmax(vals))]) <= 0.1

    def test_deterministic(self):
        a, ra = metropolis_chain(N(5, 1), 20, PriorSpec(), LOC, GRID, mcmc=SHORT)
        b, rb = metropolis_chain(N(5, 1), 20, PriorSpec(), LOC, GRID, mcmc=SHORT)
        np.testing.assert_array_equal(a, b)
        assert ra == rb

    def test_bad_proposal(self):
        with pytest.raises(ConfigError):
            metropolis_chain(N(5, 1), 20, PriorSpec(), LOC, GRID, proposal_sd=0.0, mcmc=SHORT)
        with pytest.raises(ConfigError):
            metropolis_chain(N(5, 1), 20, PriorSpec(), LOC, GRID, mcmc=McmcConfig(50, 10, 1))

    def test_location_scale_chain(self):
        fam = normal_location_scale()
        grid = build_grid([0.0], margin=20)
        draws, rate = metropolis_chain(N(0, 2), 50, PriorSpec(0.0, 25.0, 3.0, 0.5), fam, grid,
                                       mcmc=McmcConfig(20000, 10000, 5, seed=2))
        assert draws.shape[1] == 2 and np.all(draws[:, 1] > 0)
        assert abs(draws[:, 0].mean()) < 0.5
        assert abs(draws[:, 1].mean() - 2.0) < 0.5
        assert 0 < rate < 1

    def test_location_scale_kernel_agrees_with_quadrature(self):
        # chain acceptance uses a windowed sum; compare its target with the direct kernel
        fam = normal_location_scale()
        grid = build_grid([0.0], margin=20)
        prior = PriorSpec(0.0, 25.0, 3.0, 0.5)
        root = np.sqrt(N(0.5, 1.5).pdf(grid.nodes))
        for mu, s in [(0.0, 1.0), (0.7, 1.3), (-2.0, 0.4)]:
            direct = hellinger_log_kernel([mu, s], N(0.5, 1.5), 10, prior, grid, fam)
            fast = _loc_scale_logpost(mu, s * s, grid.a, grid.spacing, root * grid.weights, 20.0,
                                      0.0, 25.0, 3.0, 0.5, 1e-16)
            # both are log densities up to the same additive constant
            ref = hellinger_log_kernel([0.0, 1.0], N(0.5, 1.5), 10, prior, grid, fam)
            ref_fast = _loc_scale_logpost(0.0, 1.0, grid.a, grid.spacing, root * grid.weights, 20.0,
                                          0.0, 25.0, 3.0, 0.5, 1e-16)
            assert fast - ref_fast == pytest.approx(direct - ref, abs=1e-6)

    def test_discrete_target_detailed_balance(self):
        # five unit cells with target masses p; the chain must occupy them in proportion
        p = np.array([0.1, 0.3, 0.2, 0.25, 0.15])
        logp = np.log(p)

        def log_target(x):
            i = math.floor(x[0])
            return logp[i] if 0 <= i < 5 else -math.inf

        draws, _ = random_walk_metropolis(log_target, [2.5], 1_000_000, proposal_sd=1.5, seed=3,
                                          burn_in=1000)
        freq = np.bincount(np.floor(draws[:, 0]).astype(int), minlength=5) / draws.shape[0]
        assert 0.5 * np.abs(freq - p).sum() <= 0.02


class TestHierarchicalPosterior:
    def test_singleton_equals_chain(self):
        prior = PriorSpec()
        pool = hierarchical_posterior(DensityEnsemble((N(5, 1),)), 20, prior, LOC, SHORT, GRID)
        chain, rate = metropolis_chain(N(5, 1), 20, prior, LOC, GRID, mcmc=SHORT)
        np.testing.assert_array_equal(pool.samples, chain)
        assert pool.acceptance_rates[0] == rate

    def test_duplicates_with_equal_seeds(self):
        prior = PriorSpec()
        one = hierarchical_posterior(DensityEnsemble((N(5, 1),)), 20, prior, LOC, SHORT, GRID, chain_seeds=[7])
        two = hierarchical_posterior(DensityEnsemble((N(5, 1), N(5, 1))), 20, prior, LOC, SHORT, GRID,
                                     chain_seeds=[7, 7])
        assert two.samples.mean() == pytest.approx(one.samples.mean(), abs=1e-12)
        assert len(two) == 2 * len(one)

    def test_order_invariance(self):
        draws = (N(4.8, 1), N(5.3, 1.2), GaussianMixtureDensity(np.array([0.9, 0.1]), np.array([5.0, -3.0]),
                                                                 np.array([1.0, 1.0])))
        seeds = [11, 12, 13]
        a = hierarchical_posterior(DensityEnsemble(draws), 20, PriorSpec(), LOC, SHORT, GRID, chain_seeds=seeds)
        b = hierarchical_posterior(DensityEnsemble(draws[::-1]), 20, PriorSpec(), LOC, SHORT, GRID,
                                   chain_seeds=seeds[::-1])
        assert eap_and_ci(a).eap[0] == pytest.approx(eap_and_ci(b).eap[0], abs=1e-12)
        c = hierarchical_posterior(DensityEnsemble(draws[::-1]), 20, PriorSpec(), LOC, SHORT, GRID)
        assert abs(eap_and_ci(c).eap[0] - eap_and_ci(a).eap[0]) < 0.1

    def test_equal_counts(self):
        pool = hierarchical_posterior(DensityEnsemble((N(5, 1), N(4, 1))), 20, PriorSpec(), LOC, SHORT, GRID)
        assert list(pool.per_g_counts) == [1000, 1000]
        with pytest.raises(ConfigError):
            ThetaSamplePool(np.zeros((3, 1)), np.array([1, 2]), np.array([0.5, 0.5]), 0)
        with pytest.raises(ConfigError):
            ThetaSamplePool(np.zeros((2, 1)), np.array([1, 1]), np.array([0.5, 1.5]), 0)

    def test_full_pipeline_near_conjugate(self, rng):
        x = rng.normal(5, 1, 20)
        model = HierarchicalHellingerPosterior(random_state=3).fit(x)
        conj = conjugate_normal_posterior(x)
        assert abs(model.eap_[0] - conj.mean) <= 0.15
        assert model.ci_[0, 0] < model.eap_[0] < model.ci_[0, 1]
        assert len(model.pool_) == len(model.ensemble_) * 1000
        assert 0 < model.acceptance_rate_ < 1
        assert model.predict([model.eap_[0]])[0] == pytest.approx(1 / math.sqrt(2 * math.pi))
        assert model.get_params()["mh_steps"] == 20000


class TestSummary:
    def test_constant_pool(self):
        s = eap_and_ci(np.full(200, 3.5))
        assert s.eap[0] == 3.5 and s.ci_low[0] == 3.5 and s.ci_high[0] == 3.5 and s.sd[0] == 0.0

    def test_hand_interpolation(self):
        s = eap_and_ci(np.array([1.0, 2.0, 3.0, 4.0]), min_draws=1)
        assert s.eap[0] == 2.5
        assert s.ci_low[0] == pytest.approx(1.075) and s.ci_high[0] == pytest.approx(3.925)

    def test_normal_quantiles(self, rng):
        s = eap_and_ci(rng.standard_normal(100_000))
        assert abs(s.ci_low[0] + 1.96) <= 0.03 and abs(s.ci_high[0] - 1.96) <= 0.03

    def test_too_small(self):
        with pytest.raises(ConfigError):
            eap_and_ci(np.zeros(10))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=100, max_size=300))
    def test_ordering_flag(self, values):
        s = eap_and_ci(np.array(values))
        assert s.ordered == bool(s.ci_low[0] <= s.eap[0] <= s.ci_high[0])
        assert s.sd[0] >= 0


class TestConjugate:
    def test_section_six_values(self):
        x = np.full(20, 5.0)
        post = conjugate_normal_posterior(x, 0.0, 25.0, 1.0)
        assert post.mean == pytest.approx(4.990, abs=1e-3)
        assert post.sd == pytest.approx(0.2234, abs=1e-4)
        lo, hi = post.interval()
        assert hi - lo == pytest.approx(0.8756, abs=1e-4)

    def test_flat_limit(self, rng):
        x = rng.normal(3, 1, 15)
        assert conjugate_normal_posterior(x, 0.0, 1e12).mean == pytest.approx(x.mean(), abs=1e-6)

    def test_empty(self):
        with pytest.raises(ConfigError):
            conjugate_normal_posterior([])


class TestCleanSubsetReference:
    def test_requires_smaller_subset(self):
        with pytest.raises(ConfigError):
            clean_subset_reference_posterior(np.zeros(5), 5, PriorSpec(), LOC)

    def test_beta_mean(self, rng):
        x = rng.normal(5, 1, 15)
        ens = DensityEnsemble((N(5, 1),))
        pool = clean_subset_reference_posterior(x, 20, PriorSpec(), LOC, SHORT, GRID, beta_draws=400,
                                                ensemble=ens)
        b = pool.extras["b"]
        a, c = 16, 5
        se = math.sqrt(a * c / ((a + c) ** 2 * (a + c + 1)) / b.size)
        assert abs(b.mean() - 16 / 21) <= 3 * se

    def test_unit_b_matches_hierarchical(self, rng):
        x = rng.normal(5, 1, 15)
        grid = data_grid(x, LOC)
        ens = run_blocked_gibbs(x, mcmc=McmcConfig(seed=2))
        mh = McmcConfig(20000, 10000, 10, seed=4)
        ref = clean_subset_reference_posterior(x, 20, PriorSpec(), LOC, mh, grid, ensemble=ens,
                                               b_values=np.ones(3))
        direct = hierarchical_posterior(ens, 20, PriorSpec(), LOC, mh, grid)
        se = eap_and_ci(direct).sd[0] / math.sqrt(len(ens))
        assert abs(eap_and_ci(ref).eap[0] - eap_and_ci(direct).eap[0]) <= 3 * se
