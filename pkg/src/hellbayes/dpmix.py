"""Truncated stick-breaking blocked Gibbs sampler for a DP Gaussian mixture.

Model::

    x_i | z_i        ~ N(mu_{z_i}, var_{z_i})
    (mu_k, var_k)    ~ N(mu | m1, var / kappa0) InvGamma(var | nu1/2, psi1/2)
    w                = stick-breaking(v),  v_k ~ Beta(1, M)
    kappa0           ~ Gamma(shape, rate)

One sweep updates assignments, atoms, sticks and kappa0 in that order.
All randomness comes from a single ``numpy.random.Generator`` so a seed
fixes the whole ensemble.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .density import DensityEnsemble, GaussianMixtureDensity, posterior_mean_density
from .exceptions import ConfigError
from .quadrature import build_grid

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class DpPriorConfig:
    """Hyperparameters of the DP mixture prior.

    ``kappa0_fixed`` pins kappa0 instead of sampling it, which turns the
    K=1 sampler into an exact normal-inverse-gamma posterior sampler.
    """

    mass: float = 1.0
    m1: float = 0.0
    kappa0_shape: float = 0.5
    kappa0_rate: float = 50.0
    nu1: float = 4.0
    psi1: float = 2.0
    truncation: int = 30
    kappa0_fixed: float | None = None

    def __post_init__(self):
        for name in ("mass", "kappa0_shape", "kappa0_rate", "psi1"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.nu1 > 1:
            raise ConfigError("nu1 must exceed 1")
        if int(self.truncation) != self.truncation or self.truncation < 1:
            raise ConfigError("truncation must be a positive integer")
        if self.kappa0_fixed is not None and not self.kappa0_fixed > 0:
            raise ConfigError("kappa0_fixed must be positive")

    @property
    def var_shape(self) -> float:
        return self.nu1 / 2.0

    @property
    def var_scale(self) -> float:
        return self.psi1 / 2.0


@dataclass(frozen=True)
class McmcConfig:
    """Chain length, burn-in, thinning and seed."""

    iterations: int = 2000
    burn_in: int = 500
    thin: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")

    @property
    def n_kept(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass
class GibbsState:
    assignments: np.ndarray
    atom_means: np.ndarray
    atom_vars: np.ndarray
    sticks: np.ndarray
    kappa0: float

    @property
    def weights(self) -> np.ndarray:
        return stick_breaking_weights(self.sticks)

    def occupied(self) -> int:
        return int(np.unique(self.assignments).size)


def stick_breaking_weights(sticks) -> np.ndarray:
    """Weights ``w_k = v_k prod_{j<k} (1 - v_j)``; the last weight takes the rest.

    ``sticks`` has length K-1 and the result length K.
    """
    v = np.asarray(sticks, dtype=float).ravel()
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ConfigError("sticks must lie in [0, 1]")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - v)])
    w = np.empty(v.size + 1)
    w[:-1] = v * remaining[:-1]
    w[-1] = max(0.0, 1.0 - w[:-1].sum())
    return w


def _sample_sticks(counts: np.ndarray, mass: float, rng) -> np.ndarray:
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    return rng.beta(1.0 + counts[:-1], mass + tail[:-1])


def _draw_base(prior: DpPriorConfig, kappa0: float, size: int, rng):
    var = 1.0 / rng.gamma(prior.var_shape, 1.0 / prior.var_scale, size=size)
    mean = prior.m1 + np.sqrt(var / kappa0) * rng.standard_normal(size)
    return mean, var


def _update_atoms(x, z, prior: DpPriorConfig, kappa0: float, k: int, rng):
    counts = np.bincount(z, minlength=k).astype(float)
    sums = np.bincount(z, weights=x, minlength=k)
    xbar = np.divide(sums, counts, out=np.zeros(k), where=counts > 0)
    ss = np.bincount(z, weights=(x - xbar[z]) ** 2, minlength=k)
    kn = kappa0 + counts
    mn = (kappa0 * prior.m1 + sums) / kn
    an = prior.var_shape + counts / 2.0
    bn = prior.var_scale + 0.5 * ss + kappa0 * counts * (xbar - prior.m1) ** 2 / (2.0 * kn)
    var = bn / rng.gamma(an)
    floored = int(np.sum(var < VAR_FLOOR))
    var = np.maximum(var, VAR_FLOOR)
    mean = mn + np.sqrt(var / kn) * rng.standard_normal(k)
    return mean, var, counts, floored


def _sample_assignments(x, weights, means, variances, rng):
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    logp = (logw - 0.5 * np.log(variances))[None, :] - 0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(x.size) * cdf[:, -1]
    z = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(z, weights.size - 1)


def _initial_state(x, prior: DpPriorConfig, rng) -> GibbsState:
    k = prior.truncation
    kappa0 = prior.kappa0_fixed or prior.kappa0_shape / prior.kappa0_rate
    z = np.zeros(x.size, dtype=np.int64)
    mean, var, _, _ = _update_atoms(x, z, prior, kappa0, k, rng)
    sticks = np.full(k - 1, 0.5)
    return GibbsState(z, mean, var, sticks, kappa0)


def gibbs_sweep(x, state: GibbsState, prior: DpPriorConfig, rng) -> int:
    """One full sweep in place; returns the number of floored variances."""
    k = prior.truncation
    state.assignments = _sample_assignments(x, state.weights, state.atom_means, state.atom_vars, rng)
    state.atom_means, state.atom_vars, counts, floored = _update_atoms(
        x, state.assignments, prior, state.kappa0, k, rng
    )
    state.sticks = _sample_sticks(counts, prior.mass, rng) if k > 1 else np.empty(0)
    if prior.kappa0_fixed is None:
        resid = np.sum((state.atom_means - prior.m1) ** 2 / state.atom_vars)
        shape = prior.kappa0_shape + k / 2.0
        rate = prior.kappa0_rate + 0.5 * resid
        state.kappa0 = float(rng.gamma(shape, 1.0 / rate))
    return floored


def run_blocked_gibbs(data, prior: DpPriorConfig | None = None, mcmc: McmcConfig | None = None,
                      return_trace: bool = False):
    """Sample the DP mixture posterior and return the kept draws.

    With ``return_trace=True`` also returns a dict of per-iteration
    diagnostics (occupied cluster counts, kappa0, floored variance count).
    """
    prior = prior or DpPriorConfig()
    mcmc = mcmc or McmcConfig()
    x = np.asarray(data, dtype=float).ravel()
    if x.size == 0:
        raise ConfigError("the sampler needs at least one observation")
    if not np.all(np.isfinite(x)):
        raise ConfigError("data contain non-finite values")
    rng = np.random.default_rng(mcmc.seed)
    state = _initial_state(x, prior, rng)
    draws, kept_iters = [], []
    occupied = np.empty(mcmc.iterations, dtype=np.int64)
    kappa = np.empty(mcmc.iterations)
    floored = 0
    for it in range(mcmc.iterations):
        floored += gibbs_sweep(x, state, prior, rng)
        occupied[it] = state.occupied()
        kappa[it] = state.kappa0
        if it >= mcmc.burn_in and (it - mcmc.burn_in) % mcmc.thin == 0:
            draws.append(GaussianMixtureDensity(state.weights, state.atom_means.copy(), state.atom_vars.copy()))
            kept_iters.append(it)
    if floored:
        logger.warning("variance floor %.0e hit %d times", VAR_FLOOR, floored)
    meta = {
        "seed": mcmc.seed,
        "iterations": mcmc.iterations,
        "burn_in": mcmc.burn_in,
        "thin": mcmc.thin,
        "source_iterations": kept_iters,
        "prior": asdict(prior),
        "n": int(x.size),
        "floored_variances": floored,
    }
    ensemble = DensityEnsemble(tuple(draws), meta)
    if return_trace:
        return ensemble, {"occupied": occupied, "kappa0": kappa, "floored": floored}
    return ensemble


def prior_predictive_draw(prior: DpPriorConfig | None = None, seed=None) -> GaussianMixtureDensity:
    """One draw of g from the truncated DP mixture prior."""
    prior = prior or DpPriorConfig()
    rng = np.random.default_rng(seed)
    k = prior.truncation
    kappa0 = prior.kappa0_fixed or float(rng.gamma(prior.kappa0_shape, 1.0 / prior.kappa0_rate))
    sticks = rng.beta(1.0, prior.mass, size=k - 1)
    mean, var = _draw_base(prior, kappa0, k, rng)
    return GaussianMixtureDensity(stick_breaking_weights(sticks), mean, np.maximum(var, VAR_FLOOR))


class DirichletProcessMixture(BaseEstimator):
    """Estimator wrapper around :func:`run_blocked_gibbs`.

    After ``fit`` the posterior sample is in ``ensemble_``;
    ``score_samples`` evaluates the log posterior-mean density.
    """

    def __init__(self, mass=1.0, m1=0.0, kappa0_shape=0.5, kappa0_rate=50.0, nu1=4.0, psi1=2.0,
                 truncation=30, n_iter=2000, burn_in=500, thin=15, random_state=0):
        self.mass = mass
        self.m1 = m1
        self.kappa0_shape = kappa0_shape
        self.kappa0_rate = kappa0_rate
        self.nu1 = nu1
        self.psi1 = psi1
        self.truncation = truncation
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.random_state = random_state

    def _configs(self):
        prior = DpPriorConfig(self.mass, self.m1, self.kappa0_shape, self.kappa0_rate,
                              self.nu1, self.psi1, self.truncation)
        mcmc = McmcConfig(self.n_iter, self.burn_in, self.thin, int(self.random_state))
        return prior, mcmc

    def fit(self, X, y=None):
        x = _as_1d(X)
        prior, mcmc = self._configs()
        self.ensemble_ = run_blocked_gibbs(x, prior, mcmc)
        self.data_ = x
        self.n_features_in_ = 1
        return self

    def score_samples(self, X):
        check_is_fitted(self, "ensemble_")
        x = _as_1d(X)
        dens = np.mean([g.pdf(x) for g in self.ensemble_], axis=0)
        with np.errstate(divide="ignore"):
            return np.log(dens)

    def posterior_mean(self, grid=None):
        check_is_fitted(self, "ensemble_")
        if grid is None:
            grid = build_grid(self.data_)
        return posterior_mean_density(self.ensemble_, grid)


def _as_1d(X) -> np.ndarray:
    """Accept a 1-d vector or an (n, 1) matrix of observations."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    arr = check_array(arr, ensure_2d=True)
    if arr.shape[1] != 1:
        raise ConfigError("only univariate data are supported")
    return arr[:, 0]
