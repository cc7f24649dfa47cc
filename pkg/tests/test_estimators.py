import math

import numpy as np
import pytest

from hellbayes.density import DensityEnsemble, GaussianMixtureDensity
from hellbayes.dpmix import McmcConfig, run_blocked_gibbs
from hellbayes.estimators import (
    EstimatorResult,
    MinimumHellingerEstimator,
    classical_mhde,
    data_grid,
    default_epsilon,
    estimate,
    theta_hat_1,
    theta_hat_2,
    theta_hat_3,
)
from hellbayes.exceptions import ConfigError
from hellbayes.family import normal_location, normal_location_scale
from hellbayes.quadrature import HellingerObjective, build_grid

N = GaussianMixtureDensity.normal
LOC = normal_location(1.0)
GRID = build_grid([0.0, 5.0], margin=10)
PAIR = DensityEnsemble((N(0, 1), N(4, 1)))


def brute_force(fun, lo=-2.0, hi=6.0, step=1e-3):
    pts = np.arange(lo, hi + step / 2, step)
    return pts[int(np.argmin(fun(pts)))]


class TestThetaHat1:
    def test_exact_member(self):
        r = theta_hat_1(DensityEnsemble((N(5, 1),)), LOC, GRID)
        assert r.theta[0] == pytest.approx(5.0, abs=1e-3)
        assert r.method == "theta1" and r.ensemble_size == 1

    def test_symmetric_pair(self):
        r = theta_hat_1(PAIR, LOC, GRID)
        mean = GaussianMixtureDensity(np.array([0.5, 0.5]), np.array([0.0, 4.0]), np.ones(2))
        target = brute_force(HellingerObjective(LOC, mean, GRID))
        assert abs(r.theta[0] - target) <= 0.02
        # the bimodal mean has two mirror-image minimisers; the smaller is returned
        obj = HellingerObjective(LOC, mean, GRID)
        assert obj(r.theta)[0] == pytest.approx(obj(4.0 - r.theta)[0], abs=1e-9)
        assert obj(r.theta)[0] < obj([2.0])[0]
        assert r.theta[0] <= 2.0

    def test_order_invariant(self):
        e = DensityEnsemble((N(0, 1), N(4, 1), N(1, 2)))
        r = DensityEnsemble(tuple(reversed(e.draws)))
        assert theta_hat_1(e, LOC, GRID).theta[0] == pytest.approx(theta_hat_1(r, LOC, GRID).theta[0], abs=1e-12)


class TestThetaHat2:
    def test_singleton_matches_theta1(self):
        g = GaussianMixtureDensity(np.array([0.8, 0.2]), np.array([5.0, 9.0]), np.array([1.0, 0.5]))
        e = DensityEnsemble((g,))
        assert theta_hat_2(e, LOC, GRID).theta[0] == pytest.approx(theta_hat_1(e, LOC, GRID).theta[0], abs=1e-6)

    def test_duplicates(self):
        one = theta_hat_2(DensityEnsemble((N(0, 1),)), LOC, GRID).theta[0]
        two = theta_hat_2(DensityEnsemble((N(0, 1), N(0, 1))), LOC, GRID).theta[0]
        assert two == pytest.approx(one, abs=1e-9)

    def test_symmetric_pair(self):
        objs = [HellingerObjective(LOC, g, GRID) for g in PAIR]
        target = brute_force(lambda t: np.mean([o(t) for o in objs], axis=0))
        r = theta_hat_2(PAIR, LOC, GRID)
        assert abs(r.theta[0] - target) <= 0.02
        assert abs(r.theta[0] - 2.0) <= 0.02

    def test_objective_is_average_distance(self):
        e = DensityEnsemble((N(0, 1), N(3, 2)))
        r = theta_hat_2(e, LOC, GRID)
        direct = np.mean([HellingerObjective(LOC, g, GRID)(r.theta)[0] for g in e])
        assert r.objective_value == pytest.approx(direct, abs=1e-12)


class TestThetaHat3:
    def test_plateau_tie_break(self):
        r = theta_hat_3(DensityEnsemble((N(5, 1),)), LOC, GRID, epsilon=0.5)
        assert r.objective_value == 0.0
        assert r.theta[0] == pytest.approx(5.0, abs=1e-3)
        assert r.epsilon == 0.5

    def test_full_plateau_equals_theta2(self):
        e = DensityEnsemble((N(0, 2), N(4, 0.5), N(1, 3)))
        r3 = theta_hat_3(e, LOC, GRID, epsilon=1e-9)
        assert r3.objective_value == 1.0
        assert r3.theta[0] == pytest.approx(theta_hat_2(e, LOC, GRID).theta[0], abs=1e-6)

    def test_dp_consistency(self, rng):
        x = rng.normal(5, 1, 200)
        ens = run_blocked_gibbs(x, mcmc=McmcConfig(seed=11))
        grid = data_grid(x, LOC)
        r = theta_hat_3(ens, LOC, grid, epsilon=default_epsilon(200))
        assert default_epsilon(200) == pytest.approx(0.3747, abs=1e-4)
        assert abs(r.theta[0] - 5.0) <= 0.3
        assert abs(r.theta[0] - theta_hat_1(ens, LOC, grid).theta[0]) <= 0.3

    def test_nonpositive_epsilon(self):
        with pytest.raises(ConfigError):
            theta_hat_3(PAIR, LOC, GRID, epsilon=0.0)

    def test_order_invariant(self):
        e = DensityEnsemble((N(0, 1), N(4, 1), N(1, 2), N(2.5, 0.7)))
        r = DensityEnsemble(tuple(reversed(e.draws)))
        a = theta_hat_3(e, LOC, GRID, epsilon=0.3)
        b = theta_hat_3(r, LOC, GRID, epsilon=0.3)
        assert a.theta[0] == pytest.approx(b.theta[0], abs=1e-12)


class TestClassical:
    def test_normal_sample(self, rng):
        x = rng.normal(5, 1, 200)
        assert abs(classical_mhde(x, LOC).theta[0] - 5.0) <= 0.25

    def test_robust_to_far_mass(self, rng):
        x = rng.normal(5, 1, 200)
        y = x.copy()
        y[:10] = 50.0
        shift = classical_mhde(y, LOC).theta[0] - classical_mhde(x, LOC).theta[0]
        assert abs(shift) < 0.15

    def test_symmetric_data(self):
        x = np.array([1.0, 2.0, 4.0, 5.0])
        assert classical_mhde(x, LOC).theta[0] == pytest.approx(3.0, abs=1e-6)

    def test_needs_two_points(self):
        with pytest.raises(ConfigError):
            classical_mhde([1.0], LOC)


class TestResultAndDispatch:
    def test_invariants(self):
        with pytest.raises(ConfigError):
            EstimatorResult(np.zeros(1), "theta1", -1.0, 1)
        with pytest.raises(ConfigError):
            EstimatorResult(np.zeros(1), "theta1", 0.1, 1, epsilon=0.5)
        with pytest.raises(ConfigError):
            EstimatorResult(np.zeros(1), "theta3", 0.1, 1)
        with pytest.raises(ConfigError):
            EstimatorResult(np.zeros(1), "theta9", 0.1, 1)

    def test_dispatch_aliases(self):
        x = np.array([1.0, 2.0, 4.0, 5.0])
        assert estimate("mhde", LOC, GRID, data=x).method == "classical-mhde"
        assert estimate("t2", LOC, GRID, ensemble=PAIR).method == "theta2"
        with pytest.raises(ConfigError):
            estimate("t1", LOC, GRID)
        with pytest.raises(ConfigError):
            estimate("t3", LOC, GRID, ensemble=PAIR)

    def test_default_epsilon(self):
        assert default_epsilon(20) == pytest.approx(math.log(20) / math.sqrt(20))

    def test_location_scale_member(self):
        fam = normal_location_scale()
        grid = build_grid([0.0], margin=20)
        r = theta_hat_1(DensityEnsemble((N(0, 2),)), fam, grid)
        np.testing.assert_allclose(r.theta, [0.0, 2.0], atol=1e-3)


class TestSklearnWrapper:
    def test_fit_predict(self, rng):
        x = rng.normal(5, 1, 40)
        model = MinimumHellingerEstimator(method="t1", dp_iter=400, dp_burn_in=100, dp_thin=10).fit(x)
        assert abs(model.theta_[0] - 5.0) < 0.6
        assert model.predict(np.array([model.theta_[0]]))[0] == pytest.approx(1 / math.sqrt(2 * math.pi))
        assert set(model.get_params()) >= {"method", "family", "epsilon"}

    def test_mhde_has_no_ensemble(self, rng):
        model = MinimumHellingerEstimator(method="mhde").fit(rng.normal(size=30))
        assert model.ensemble_ is None and model.result_.ensemble_size == 0


@pytest.mark.slow
@pytest.mark.parametrize("n", [50, 200])
def test_consistency_band(n):
    hits = np.zeros(3)
    for rep in range(50):
        x = np.random.default_rng([n, rep]).normal(5, 1, n)
        ens = run_blocked_gibbs(x, mcmc=McmcConfig(seed=rep))
        grid = data_grid(x, LOC)
        ests = [theta_hat_1(ens, LOC, grid), theta_hat_2(ens, LOC, grid),
                theta_hat_3(ens, LOC, grid, epsilon=default_epsilon(n))]
        hits += [abs(r.theta[0] - 5.0) <= 3 / math.sqrt(n) + 0.2 for r in ests]
    assert np.all(hits >= 0.95 * 50)
