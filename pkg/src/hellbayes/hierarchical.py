"""Hierarchical Hellinger posterior.

For every nonparametric draw ``g_j`` a random-walk Metropolis chain targets

    pi(theta) * exp(-2 n D_H(g_j, theta)),

and the post-burn-in draws of all chains are pooled, which marginalises
over ``g``.  The pooled mean is the EAP estimate and the 2.5%/97.5%
empirical quantiles give the credible interval.

Location family chains look the affinity up in a table computed once per
draw by FFT correlation of sqrt(g) with sqrt(f_0); location-scale chains
sum over a window of grid nodes around the proposal.  Both are compiled
with numba.  For the location-scale family the chain runs on
``(mu, sigma^2)`` with the scale prior placed on ``sigma^2``; samples are
reported as ``(mu, sigma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.signal import fftconvolve
from scipy.special import gammaln, ndtri
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .density import DensityEnsemble
from .dpmix import DpPriorConfig, McmcConfig, _as_1d, run_blocked_gibbs
from .estimators import data_grid
from .exceptions import ConfigError
from .family import LOG_SQRT_2PI, ParametricFamily, get_family
from .quadrature import QuadratureGrid, density_on_grid, density_starts

DEFAULT_METROPOLIS = McmcConfig(iterations=20000, burn_in=10000, thin=10, seed=0)


@dataclass(frozen=True)
class PriorSpec:
    """Normal prior on the location; gamma prior on sigma^2 when present."""

    location_mean: float = 0.0
    location_var: float = 25.0
    scale_shape: float = 3.0
    scale_rate: float = 0.5

    def __post_init__(self):
        if not self.location_var > 0:
            raise ConfigError("prior variance must be positive")
        if not (self.scale_shape > 0 and self.scale_rate > 0):
            raise ConfigError("scale prior shape and rate must be positive")

    def log_density(self, family: ParametricFamily, theta) -> float:
        """log prior in chain coordinates: (mu,) or (mu, sigma^2)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        mu = theta[0]
        lp = -0.5 * (mu - self.location_mean) ** 2 / self.location_var
        lp -= 0.5 * math.log(self.location_var) + LOG_SQRT_2PI
        if family.has_scale:
            v = theta[1] ** 2
            a, r = self.scale_shape, self.scale_rate
            lp += a * math.log(r) - gammaln(a) + (a - 1.0) * math.log(v) - r * v
        return float(lp)


@dataclass(frozen=True, eq=False)
class ThetaSamplePool:
    """Pooled Metropolis draws; rows are draws, columns coordinates."""

    samples: np.ndarray
    per_g_counts: np.ndarray
    acceptance_rates: np.ndarray
    seed: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.asarray(self.per_g_counts)
        if counts.size and np.any(counts != counts[0]):
            raise ConfigError("every density draw must contribute the same number of samples")
        rates = np.asarray(self.acceptance_rates)
        if np.any((rates < 0) | (rates > 1)):
            raise ConfigError("acceptance rates must lie in [0, 1]")

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class PosteriorSummary:
    eap: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    sd: np.ndarray
    ordered: bool

    def to_dict(self) -> dict:
        return {
            "eap": self.eap.tolist(),
            "ci": [[lo, hi] for lo, hi in zip(self.ci_low.tolist(), self.ci_high.tolist())],
            "sd": self.sd.tolist(),
        }


# -- numba kernels ------------------------------------------------------------


@njit(cache=True)
def _table_affinity(theta, t0, step, table):
    pos = (theta - t0) / step
    if pos < 0.0 or pos >= table.size - 1:
        return 0.0
    i = int(pos)
    frac = pos - i
    return table[i] + frac * (table[i + 1] - table[i])


@njit(cache=True)
def _location_chain(x0, t0, step, table, two_n, pm, pv, incr, logu, burn, thin):
    steps = incr.size
    n_keep = 0
    if steps > burn:
        n_keep = (steps - burn - 1) // thin + 1
    out = np.empty(n_keep)
    cur = x0
    d = min(2.0, max(0.0, 2.0 - 2.0 * _table_affinity(cur, t0, step, table)))
    cur_lp = -0.5 * (cur - pm) ** 2 / pv - two_n * d
    accepted = 0
    k = 0
    for t in range(steps):
        prop = cur + incr[t]
        d = min(2.0, max(0.0, 2.0 - 2.0 * _table_affinity(prop, t0, step, table)))
        lp = -0.5 * (prop - pm) ** 2 / pv - two_n * d
        if logu[t] < lp - cur_lp:
            cur = prop
            cur_lp = lp
            accepted += 1
        if t >= burn and (t - burn) % thin == 0:
            out[k] = cur
            k += 1
    return out, accepted


@njit(cache=True)
def _window_affinity(mu, sigma, a, h, wroot):
    # exp(-(x - mu)^2 / (4 sigma^2)) by multiplicative recurrence from the
    # node nearest mu outwards, within 12 sigma.
    n = wroot.size
    reach = int(math.ceil(12.0 * sigma / h))
    i0 = int(round((mu - a) / h))
    inv = 1.0 / (4.0 * sigma * sigma)
    dx0 = a + i0 * h - mu
    e0 = math.exp(-dx0 * dx0 * inv)
    q = math.exp(-2.0 * h * h * inv)
    s = 0.0
    if 0 <= i0 < n:
        s += wroot[i0] * e0
    e = e0
    r = math.exp(-(2.0 * dx0 * h + h * h) * inv)
    for i in range(i0 + 1, min(i0 + reach, n - 1) + 1):
        e *= r
        r *= q
        if i >= 0:
            s += wroot[i] * e
    e = e0
    r = math.exp(-(-2.0 * dx0 * h + h * h) * inv)
    for i in range(i0 - 1, max(i0 - reach, 0) - 1, -1):
        e *= r
        r *= q
        if i < n:
            s += wroot[i] * e
    return (2.0 * math.pi * sigma * sigma) ** -0.25 * s


@njit(cache=True)
def _loc_scale_logpost(mu, v, a, h, wroot, two_n, pm, pv, shape, rate, v_min):
    if v <= v_min:
        return -np.inf
    sigma = math.sqrt(v)
    d = 2.0 - 2.0 * _window_affinity(mu, sigma, a, h, wroot)
    d = min(2.0, max(0.0, d))
    return -0.5 * (mu - pm) ** 2 / pv + (shape - 1.0) * math.log(v) - rate * v - two_n * d


@njit(cache=True)
def _loc_scale_chain(mu0, v0, a, h, wroot, two_n, pm, pv, shape, rate, v_min, incr, logu, burn, thin):
    steps = incr.shape[0]
    n_keep = 0
    if steps > burn:
        n_keep = (steps - burn - 1) // thin + 1
    out = np.empty((n_keep, 2))
    mu, v = mu0, v0
    cur_lp = _loc_scale_logpost(mu, v, a, h, wroot, two_n, pm, pv, shape, rate, v_min)
    accepted = 0
    k = 0
    for t in range(steps):
        pmu = mu + incr[t, 0]
        pvv = v + incr[t, 1]
        lp = _loc_scale_logpost(pmu, pvv, a, h, wroot, two_n, pm, pv, shape, rate, v_min)
        if logu[t] < lp - cur_lp:
            mu, v, cur_lp = pmu, pvv, lp
            accepted += 1
        if t >= burn and (t - burn) % thin == 0:
            out[k, 0] = mu
            out[k, 1] = math.sqrt(v)
            k += 1
    return out, accepted


# -- affinity helpers -----------------------------------------------------------


def location_affinity_table(root: np.ndarray, grid: QuadratureGrid, sigma: float):
    """Affinity A(theta) = int sqrt(g) sqrt(f_theta) on the shifted node lattice.

    Returns ``(theta0, step, table)`` with ``table[k] = A(theta0 + k*step)``.
    At theta on a grid node the value equals the Simpson sum exactly.
    """
    n = grid.nodes.size
    h = grid.spacing
    offsets = h * np.arange(-(n - 1), n)
    kernel = (2.0 * math.pi * sigma**2) ** -0.25 * np.exp(-(offsets**2) / (4.0 * sigma**2))
    table = fftconvolve(root * grid.weights, kernel, mode="full")
    return grid.a - (n - 1) * h, h, np.clip(table, 0.0, None)


def _roots(ensemble, grid: QuadratureGrid) -> np.ndarray:
    draws = ensemble.draws if isinstance(ensemble, DensityEnsemble) else ensemble
    return np.sqrt(np.stack([density_on_grid(g, grid) for g in draws]))


def _chain_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), int(index)]))


# -- public operations ------------------------------------------------------------


def hellinger_log_kernel(theta, g, n: float, prior: PriorSpec, grid: QuadratureGrid,
                         family: ParametricFamily) -> float:
    """log pi(theta) - 2 n D_H(g, theta); -inf outside the parameter domain.

    The prior density is expressed in chain coordinates, i.e. on sigma^2
    for the location-scale family.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not family.in_bounds(theta):
        return -math.inf
    root = np.sqrt(density_on_grid(g, grid))
    sf = family.sqrt_pdf(theta, grid.nodes)
    d = min(2.0, max(0.0, 2.0 - 2.0 * float(grid.weights @ (root * sf))))
    return prior.log_density(family, theta) - 2.0 * n * d


def _run_chain(root, grid, n_eff, prior, family, proposal_sd, mcmc, rng, start=None):
    steps = mcmc.iterations
    sd = np.broadcast_to(np.asarray(proposal_sd, dtype=float), (family.dimension,))
    if np.any(~(sd > 0)):
        raise ConfigError("proposal sd must be positive")
    incr = rng.standard_normal((steps, family.dimension)) * sd
    logu = np.log(rng.random(steps))
    two_n = 2.0 * float(n_eff)
    if not family.has_scale:
        t0, step, table = location_affinity_table(root, grid, family.sigma)
        if start is None:
            thetas = t0 + step * np.arange(table.size)
            lp = -0.5 * (thetas - prior.location_mean) ** 2 / prior.location_var
            lp -= two_n * np.clip(2.0 - 2.0 * table, 0.0, 2.0)
            start = thetas[int(np.argmax(lp))]
        draws, acc = _location_chain(float(np.atleast_1d(start)[0]), t0, step, table, two_n,
                                     prior.location_mean, prior.location_var,
                                     np.ascontiguousarray(incr[:, 0]), logu, mcmc.burn_in, mcmc.thin)
        return draws[:, None], acc / steps
    if start is None:
        start = density_starts(family, root**2, grid)[2]
    mu0, s0 = np.asarray(start, dtype=float)
    wroot = root * grid.weights
    draws, acc = _loc_scale_chain(mu0, s0 * s0, grid.a, grid.spacing, wroot, two_n,
                                  prior.location_mean, prior.location_var,
                                  prior.scale_shape, prior.scale_rate, family.scale_lower**2,
                                  incr, logu, mcmc.burn_in, mcmc.thin)
    return draws, acc / steps


def metropolis_chain(g, n: float, prior: PriorSpec, family: ParametricFamily, grid: QuadratureGrid,
                     proposal_sd=0.5, mcmc: McmcConfig = DEFAULT_METROPOLIS, start=None):
    """Random-walk Metropolis on the Hellinger posterior for one density ``g``.

    Returns ``(draws, acceptance_rate)``; ``draws`` has one row per kept
    step (after ``mcmc.burn_in``, every ``mcmc.thin``-th).
    """
    if mcmc.iterations < 100:
        raise ConfigError("a Metropolis chain needs at least 100 steps")
    root = np.sqrt(density_on_grid(g, grid))
    rng = _chain_rng(mcmc.seed, 0)
    return _run_chain(root, grid, n, prior, family, proposal_sd, mcmc, rng, start)


def random_walk_metropolis(log_target, start, steps: int, proposal_sd=0.5, seed=0,
                           burn_in: int | None = None, thin: int = 1):
    """Generic random-walk Metropolis for an arbitrary log density.

    ``log_target`` maps a parameter vector to a log density (``-inf`` means
    outside the support).  Burn-in defaults to half the chain.  Returns
    ``(draws, acceptance_rate)``.
    """
    if steps < 100:
        raise ConfigError("a Metropolis chain needs at least 100 steps")
    x = np.atleast_1d(np.asarray(start, dtype=float)).copy()
    sd = np.broadcast_to(np.asarray(proposal_sd, dtype=float), x.shape)
    if np.any(~(sd > 0)):
        raise ConfigError("proposal sd must be positive")
    burn_in = steps // 2 if burn_in is None else burn_in
    rng = _chain_rng(seed, 0)
    incr = rng.standard_normal((steps, x.size)) * sd
    logu = np.log(rng.random(steps))
    lp = float(log_target(x))
    if not math.isfinite(lp):
        raise ConfigError("the chain must start inside the support")
    kept, accepted = [], 0
    for t in range(steps):
        y = x + incr[t]
        lq = float(log_target(y))
        if logu[t] < lq - lp:
            x, lp = y, lq
            accepted += 1
        if t >= burn_in and (t - burn_in) % thin == 0:
            kept.append(x.copy())
    return np.array(kept), accepted / steps


def hierarchical_posterior(ensemble, n: float, prior: PriorSpec, family: ParametricFamily,
                           mcmc: McmcConfig = DEFAULT_METROPOLIS, grid: QuadratureGrid | None = None,
                           proposal_sd=0.5, chain_seeds=None, n_eff=None) -> ThetaSamplePool:
    """Pool one Metropolis chain per ensemble draw.

    Chain ``j`` is seeded from ``(mcmc.seed, j)`` unless ``chain_seeds``
    overrides it.  ``n_eff`` optionally replaces ``n`` per chain (used for
    tempered reference posteriors).
    """
    if mcmc.iterations < 100:
        raise ConfigError("a Metropolis chain needs at least 100 steps")
    if grid is None:
        raise ConfigError("a quadrature grid is required")
    roots = _roots(ensemble, grid)
    J = roots.shape[0]
    if J == 0:
        raise ConfigError("empty ensemble")
    if chain_seeds is None:
        rngs = [_chain_rng(mcmc.seed, j) for j in range(J)]
    else:
        if len(chain_seeds) != J:
            raise ConfigError("need one chain seed per density draw")
        rngs = [_chain_rng(s, 0) for s in chain_seeds]
    n_eff = np.full(J, float(n)) if n_eff is None else np.asarray(n_eff, dtype=float)
    chunks, rates = [], []
    for j in range(J):
        draws, rate = _run_chain(roots[j], grid, n_eff[j], prior, family, proposal_sd, mcmc, rngs[j])
        chunks.append(draws)
        rates.append(rate)
    counts = np.array([c.shape[0] for c in chunks])
    return ThetaSamplePool(np.concatenate(chunks, axis=0), counts, np.array(rates), mcmc.seed)


def eap_and_ci(pool, level: float = 0.95, min_draws: int = 100) -> PosteriorSummary:
    """Posterior mean, central credible interval and sd of a sample pool."""
    samples = pool.samples if isinstance(pool, ThetaSamplePool) else np.asarray(pool, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] < max(min_draws, 1):
        raise ConfigError(f"need at least {min_draws} draws, got {samples.shape[0]}")
    tail = (1.0 - level) / 2.0
    eap = samples.mean(axis=0)
    lo, hi = np.quantile(samples, [tail, 1.0 - tail], axis=0)
    sd = samples.std(axis=0, ddof=1) if samples.shape[0] > 1 else np.zeros(samples.shape[1])
    ordered = bool(np.all(lo <= eap) and np.all(eap <= hi))
    return PosteriorSummary(eap, lo, hi, sd, ordered)


@dataclass(frozen=True)
class ConjugateNormalPosterior:
    """Normal posterior of a normal mean with known variance."""

    mean: float
    sd: float

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        z = float(ndtri(0.5 + level / 2.0))
        return self.mean - z * self.sd, self.mean + z * self.sd

    def sample(self, size: int, random_state=None) -> np.ndarray:
        rng = np.random.default_rng(random_state)
        return self.mean + self.sd * rng.standard_normal(size)


def conjugate_normal_posterior(data, prior_mean: float = 0.0, prior_var: float = 25.0,
                               known_sigma: float = 1.0) -> ConjugateNormalPosterior:
    x = np.asarray(data, dtype=float).ravel()
    if x.size == 0:
        raise ConfigError("conjugate posterior needs at least one observation")
    if not known_sigma > 0 or not prior_var > 0:
        raise ConfigError("sigma and prior variance must be positive")
    precision = 1.0 / prior_var + x.size / known_sigma**2
    mean = (prior_mean / prior_var + x.sum() / known_sigma**2) / precision
    return ConjugateNormalPosterior(float(mean), float(math.sqrt(1.0 / precision)))


def clean_subset_reference_posterior(clean_data, n_total: int, prior: PriorSpec, family: ParametricFamily,
                                     mcmc: McmcConfig = DEFAULT_METROPOLIS, grid: QuadratureGrid | None = None,
                                     beta_draws: int = 50, dp_prior: DpPriorConfig | None = None,
                                     dp_mcmc: McmcConfig | None = None, proposal_sd=0.5,
                                     b_values=None, ensemble=None) -> ThetaSamplePool:
    """Limit posterior when the outlying groups recede to infinity.

    ``b ~ Beta(n1 + 1, n_total - n1)`` tempers the distance term, which
    becomes ``2 sqrt(b) n_total D_H``.  For each b one hierarchical posterior
    is run on the clean data and everything is pooled.  The sampled b values
    are stored in ``pool.extras["b"]``.
    """
    x = np.asarray(clean_data, dtype=float).ravel()
    n1 = x.size
    if n1 >= n_total:
        raise ConfigError("the clean subset must be strictly smaller than the full sample")
    if n1 == 0:
        raise ConfigError("the clean subset is empty")
    if grid is None:
        grid = data_grid(x, family)
    if ensemble is None:
        dp_mcmc = dp_mcmc or McmcConfig(seed=mcmc.seed)
        ensemble = run_blocked_gibbs(x, dp_prior, dp_mcmc)
    if b_values is None:
        rng = np.random.default_rng(np.random.SeedSequence([mcmc.seed, 0xB]))
        b_values = rng.beta(n1 + 1, n_total - n1, size=beta_draws)
    b_values = np.asarray(b_values, dtype=float)
    J = len(ensemble)
    chunks, counts, rates = [], [], []
    for m, b in enumerate(b_values):
        sub = McmcConfig(mcmc.iterations, mcmc.burn_in, mcmc.thin,
                         int(np.random.SeedSequence([mcmc.seed, m]).generate_state(1)[0]))
        pool = hierarchical_posterior(ensemble, n_total, prior, family, sub, grid, proposal_sd,
                                      n_eff=np.full(J, math.sqrt(b) * n_total))
        chunks.append(pool.samples)
        counts.extend(pool.per_g_counts.tolist())
        rates.extend(pool.acceptance_rates.tolist())
    return ThetaSamplePool(np.concatenate(chunks), np.array(counts), np.array(rates), mcmc.seed,
                           extras={"b": b_values})


class HierarchicalHellingerPosterior(BaseEstimator):
    """DP mixture posterior followed by the pooled Hellinger posterior.

    Fitted attributes: ``ensemble_``, ``pool_``, ``summary_``, ``eap_``,
    ``ci_`` (shape ``(p, 2)``) and ``acceptance_rate_``.
    """

    def __init__(self, family="normal-loc", sigma=1.0, prior_mean=0.0, prior_var=25.0,
                 scale_shape=3.0, scale_rate=0.5, dp_mass=1.0, truncation=30,
                 dp_iter=2000, dp_burn_in=500, dp_thin=15, mh_steps=20000, mh_thin=10,
                 proposal_sd=0.5, n_nodes=4097, margin=10.0, random_state=0):
        self.family = family
        self.sigma = sigma
        self.prior_mean = prior_mean
        self.prior_var = prior_var
        self.scale_shape = scale_shape
        self.scale_rate = scale_rate
        self.dp_mass = dp_mass
        self.truncation = truncation
        self.dp_iter = dp_iter
        self.dp_burn_in = dp_burn_in
        self.dp_thin = dp_thin
        self.mh_steps = mh_steps
        self.mh_thin = mh_thin
        self.proposal_sd = proposal_sd
        self.n_nodes = n_nodes
        self.margin = margin
        self.random_state = random_state

    def fit(self, X, y=None):
        x = _as_1d(X)
        fam = get_family(self.family, sigma=self.sigma)
        dp_seed, mh_seed = derive_seeds(self.random_state, 2)
        self.ensemble_ = run_blocked_gibbs(
            x, DpPriorConfig(mass=self.dp_mass, truncation=self.truncation),
            McmcConfig(self.dp_iter, self.dp_burn_in, self.dp_thin, dp_seed),
        )
        self.grid_ = data_grid(x, fam, self.margin, self.n_nodes)
        prior = PriorSpec(self.prior_mean, self.prior_var, self.scale_shape, self.scale_rate)
        mh = McmcConfig(self.mh_steps, self.mh_steps // 2, self.mh_thin, mh_seed)
        self.pool_ = hierarchical_posterior(self.ensemble_, x.size, prior, fam, mh, self.grid_,
                                            self.proposal_sd)
        self.summary_ = eap_and_ci(self.pool_)
        self.eap_ = self.summary_.eap
        self.ci_ = np.stack([self.summary_.ci_low, self.summary_.ci_high], axis=1)
        self.acceptance_rate_ = float(np.mean(self.pool_.acceptance_rates))
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        """Family density at the posterior mean ``eap_``, evaluated at ``X``."""
        check_is_fitted(self, "eap_")
        return get_family(self.family, sigma=self.sigma).pdf(self.eap_, _as_1d(X))

    def sample(self):
        check_is_fitted(self, "pool_")
        return self.pool_.samples


def derive_seeds(seed, count: int) -> list[int]:
    """Independent 63-bit child seeds from one master seed."""
    ss = np.random.SeedSequence(int(seed) & (2**63 - 1))
    return [int(s.generate_state(2, np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(count)]
