"""One-step minimum Hellinger estimators built on a density posterior.

``t1``
    project the posterior mean density onto the family.
``t2``
    minimise the posterior expected distance.  Because
    ``mean_j D_H(g_j, f) = 2 - 2 int sqrt(f) mean_j sqrt(g_j)`` this is a
    single projection of the averaged root density.
``t3``
    minimise the posterior probability that the distance exceeds epsilon.
    The objective is a step function, so it is searched on a fixed lattice
    and ties are broken by the ``t2`` objective.
``mhde``
    the classical estimator with a kernel density in place of the posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .density import DensityEnsemble, kde, posterior_mean_density
from .dpmix import DpPriorConfig, McmcConfig, _as_1d, run_blocked_gibbs
from .exceptions import ConfigError
from .family import ParametricFamily, get_family
from .quadrature import (
    HellingerObjective,
    QuadratureGrid,
    build_grid,
    clip_to_box,
    coordinate_minimize,
    default_search_box,
    density_on_grid,
    minimize_hellinger,
)

METHODS = ("theta1", "theta2", "theta3", "classical-mhde")
_METHOD_ALIASES = {"t1": "theta1", "t2": "theta2", "t3": "theta3", "mhde": "classical-mhde"}


@dataclass(frozen=True)
class EstimatorResult:
    theta: np.ndarray
    method: str
    objective_value: float
    ensemble_size: int
    epsilon: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if (self.epsilon is not None) != (self.method == "theta3"):
            raise ConfigError("epsilon is set exactly for theta3")
        if self.objective_value < 0:
            raise ConfigError("objective value must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta": np.asarray(self.theta).tolist(),
            "objective_value": self.objective_value,
            "ensemble_size": self.ensemble_size,
            "epsilon": self.epsilon,
        }


def canonical_method(name: str) -> str:
    name = _METHOD_ALIASES.get(name, name)
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(_METHOD_ALIASES)}")
    return name


def data_grid(data, family: ParametricFamily, margin: float = 10.0, n_nodes: int = 4097) -> QuadratureGrid:
    """Grid reaching ``margin`` scale units past the data range.

    The scale unit is the known sigma for the location family and the
    sample sd (1 if undefined) for the location-scale family.
    """
    data = np.asarray(data, dtype=float).ravel()
    if family.has_scale:
        unit = float(np.std(data, ddof=1)) if data.size > 1 else 1.0
        unit = unit if unit > 0 else 1.0
    else:
        unit = family.sigma
    return build_grid(data, margin=margin * unit, n_nodes=n_nodes)


def _draws(ensemble):
    draws = ensemble.draws if isinstance(ensemble, DensityEnsemble) else tuple(ensemble)
    if not draws:
        raise ConfigError("empty ensemble")
    return draws


def _box(family, grid, search_box):
    return list(search_box) if search_box is not None else default_search_box(family, grid)


def theta_hat_1(ensemble, family: ParametricFamily, grid: QuadratureGrid, search_box=None) -> EstimatorResult:
    draws = _draws(ensemble)
    gstar = posterior_mean_density(DensityEnsemble(draws), grid)
    theta, value = minimize_hellinger(family, gstar, grid, _box(family, grid, search_box))
    return EstimatorResult(theta, "theta1", value, len(draws))


def _mean_root_objective(draws, family, grid):
    roots = np.sqrt(np.stack([density_on_grid(g, grid) for g in draws]))
    obj = HellingerObjective(family, None, grid, root=roots.mean(axis=0))
    return obj, roots


def theta_hat_2(ensemble, family: ParametricFamily, grid: QuadratureGrid, search_box=None) -> EstimatorResult:
    draws = _draws(ensemble)
    obj, _ = _mean_root_objective(draws, family, grid)
    theta, value = minimize_hellinger(family, None, grid, _box(family, grid, search_box), objective=obj)
    return EstimatorResult(theta, "theta2", value, len(draws))


def _lattice(box, dimension: int):
    per_coord = 2001 if dimension == 1 else 201
    axes = [np.linspace(lo, hi, per_coord) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    steps = np.array([(hi - lo) / (per_coord - 1) for lo, hi in box])
    return np.stack([m.ravel() for m in mesh], axis=1), steps


def _chunked(fun, pts, size: int = 1024) -> np.ndarray:
    return np.concatenate([fun(pts[i:i + size]) for i in range(0, len(pts), size)])


def theta_hat_3(ensemble, family: ParametricFamily, grid: QuadratureGrid, search_box=None,
                epsilon: float | None = None) -> EstimatorResult:
    """Minimise the fraction of draws farther than ``epsilon`` from f_theta.

    Among lattice points attaining the smallest fraction, the one with the
    smallest mean distance is refined by a local minimisation of the mean
    distance, kept only if it stays on the minimal plateau.
    """
    draws = _draws(ensemble)
    if epsilon is None or not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    box = _box(family, grid, search_box)
    mean_obj, roots = _mean_root_objective(draws, family, grid)
    wroots = roots * grid.weights

    def exceed(points):
        points = np.asarray(points, dtype=float).reshape(-1, family.dimension)
        ok = family.batch_in_bounds(points)
        frac = np.ones(points.shape[0])
        if ok.any():
            sf = family.sqrt_pdf_batch(points[ok], grid.nodes)
            d = np.clip(2.0 - 2.0 * (sf @ wroots.T), 0.0, 2.0)
            frac[ok] = np.mean(d > epsilon, axis=1)
        return frac

    pts, steps = _lattice(box, family.dimension)
    frac = _chunked(exceed, pts)
    best = frac.min()
    plateau = pts[frac == best]
    mean_d = _chunked(mean_obj, plateau)
    i = int(np.argmin(mean_d))
    theta, value = plateau[i], float(mean_d[i])
    local = [(max(lo, t - s), min(hi, t + s)) for t, s, (lo, hi) in zip(theta, steps, box)]
    if all(hi > lo for lo, hi in local):
        refined, refined_value = coordinate_minimize(mean_obj, local, [theta], n_scan=21)
        refined = clip_to_box(refined, box)
        if refined_value <= value and exceed(refined)[0] == best:
            theta = refined
    return EstimatorResult(np.asarray(theta, dtype=float), "theta3", float(best), len(draws), float(epsilon))


def classical_mhde(data, family: ParametricFamily, bandwidth_rule="silverman",
                   grid: QuadratureGrid | None = None, search_box=None) -> EstimatorResult:
    data = np.asarray(data, dtype=float).ravel()
    if data.size < 2:
        raise ConfigError("classical MHDE needs at least 2 observations")
    if grid is None:
        grid = data_grid(data, family)
    g = kde(data, bandwidth_rule)
    theta, value = minimize_hellinger(family, g, grid, _box(family, grid, search_box))
    return EstimatorResult(theta, "classical-mhde", value, 0)


def default_epsilon(n: int) -> float:
    """log(n) / sqrt(n)."""
    if n < 2:
        raise ConfigError("default epsilon needs n >= 2")
    return math.log(n) / math.sqrt(n)


def estimate(method: str, family: ParametricFamily, grid: QuadratureGrid, data=None, ensemble=None,
             search_box=None, epsilon=None, bandwidth_rule="silverman") -> EstimatorResult:
    """Dispatch to one of the four estimators by name."""
    method = canonical_method(method)
    if method == "classical-mhde":
        if data is None:
            raise ConfigError("classical MHDE needs data")
        return classical_mhde(data, family, bandwidth_rule, grid, search_box)
    if ensemble is None:
        raise ConfigError(f"{method} needs a density ensemble")
    if method == "theta1":
        return theta_hat_1(ensemble, family, grid, search_box)
    if method == "theta2":
        return theta_hat_2(ensemble, family, grid, search_box)
    if epsilon is None:
        n = ensemble.meta.get("n") if isinstance(ensemble, DensityEnsemble) else None
        if n is None and data is not None:
            n = len(data)
        if n is None:
            raise ConfigError("theta3 needs epsilon or the sample size")
        epsilon = default_epsilon(int(n))
    return theta_hat_3(ensemble, family, grid, search_box, epsilon)


class MinimumHellingerEstimator(BaseEstimator):
    """Minimum Hellinger distance estimation of a Gaussian family.

    Parameters
    ----------
    method : {"t1", "t2", "t3", "mhde"}
        Which estimator to compute.  The first three use a Dirichlet process
        mixture posterior for the density; ``"mhde"`` uses a Gaussian KDE.
    family : {"normal-loc", "normal-loc-scale"}
    sigma : float
        Known scale for the location family.
    epsilon : float or None
        Threshold for ``t3``; defaults to ``log(n)/sqrt(n)``.
    bandwidth : "silverman" or float
        KDE bandwidth rule for ``mhde``.

    Attributes
    ----------
    theta_ : ndarray
    result_ : EstimatorResult
    ensemble_ : DensityEnsemble or None
    """

    def __init__(self, method="t1", family="normal-loc", sigma=1.0, epsilon=None, bandwidth="silverman",
                 dp_mass=1.0, truncation=30, dp_iter=2000, dp_burn_in=500, dp_thin=15,
                 n_nodes=4097, margin=10.0, random_state=0):
        self.method = method
        self.family = family
        self.sigma = sigma
        self.epsilon = epsilon
        self.bandwidth = bandwidth
        self.dp_mass = dp_mass
        self.truncation = truncation
        self.dp_iter = dp_iter
        self.dp_burn_in = dp_burn_in
        self.dp_thin = dp_thin
        self.n_nodes = n_nodes
        self.margin = margin
        self.random_state = random_state

    def fit(self, X, y=None, ensemble=None):
        x = _as_1d(X)
        fam = get_family(self.family, sigma=self.sigma)
        method = canonical_method(self.method)
        self.grid_ = data_grid(x, fam, self.margin, self.n_nodes)
        self.ensemble_ = None
        if method != "classical-mhde":
            if ensemble is None:
                ensemble = run_blocked_gibbs(
                    x, DpPriorConfig(mass=self.dp_mass, truncation=self.truncation),
                    McmcConfig(self.dp_iter, self.dp_burn_in, self.dp_thin, int(self.random_state)),
                )
            self.ensemble_ = ensemble
        eps = self.epsilon
        if method == "theta3" and eps is None:
            eps = default_epsilon(x.size)
        self.result_ = estimate(method, fam, self.grid_, data=x, ensemble=self.ensemble_,
                                epsilon=eps, bandwidth_rule=self.bandwidth)
        self.theta_ = self.result_.theta
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        """Fitted family density evaluated at ``X``."""
        check_is_fitted(self, "theta_")
        fam = get_family(self.family, sigma=self.sigma)
        return fam.pdf(self.theta_, _as_1d(X))
