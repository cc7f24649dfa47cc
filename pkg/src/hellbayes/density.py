"""Nonparametric density representations.

* :class:`GaussianMixtureDensity` - one posterior draw ``g`` of a Dirichlet
  process mixture.
* :class:`DensityEnsemble` - a sample of such draws standing in for the
  posterior over densities.
* :class:`KdeDensity` - Gaussian kernel density estimate.
* :class:`RandomHistogramDensity` / :class:`RandomHistogramPosterior` -
  the Dirichlet random histogram and its conjugate posterior.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .exceptions import ConfigError
from .quadrature import GridDensity, QuadratureGrid

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixtureDensity:
    """Finite Gaussian mixture ``sum_k w_k N(mean_k, var_k)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_1d(np.asarray(self.means, dtype=float))
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if not (w.shape == m.shape == v.shape) or w.ndim != 1 or w.size == 0:
            raise ConfigError("weights, means and variances must be equal-length vectors")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must lie on the simplex (sum={w.sum()!r})")
        if np.any(~np.isfinite(m)) or np.any(~(v > 0)) or np.any(~np.isfinite(v)):
            raise ConfigError("means must be finite and variances positive")
        for arr in (w, m, v):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self) -> int:
        return self.weights.size

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        out = np.zeros(flat.size)
        sd = np.sqrt(self.variances)
        coef = self.weights / (sd * math.sqrt(2.0 * math.pi))
        for k in np.flatnonzero(self.weights > 0):
            z = (flat - self.means[k]) / sd[k]
            out += coef[k] * np.exp(-0.5 * z * z)
        return out.reshape(x.shape)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureDensity":
        extra = set(d) - {"weights", "means", "variances"}
        if extra:
            raise ConfigError(f"unknown mixture keys: {sorted(extra)}")
        try:
            return cls(np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["variances"]))
        except KeyError as exc:
            raise ConfigError(f"mixture is missing key {exc}") from None

    @classmethod
    def normal(cls, mean: float, sd: float) -> "GaussianMixtureDensity":
        return cls(np.array([1.0]), np.array([mean]), np.array([sd * sd]))


@dataclass(frozen=True, eq=False)
class DensityEnsemble:
    """Ordered posterior draws plus bookkeeping about how they were made."""

    draws: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        draws = tuple(self.draws)
        if not draws:
            raise ConfigError("a density ensemble needs at least one draw")
        object.__setattr__(self, "draws", draws)

    def __len__(self):
        return len(self.draws)

    def __iter__(self):
        return iter(self.draws)

    def __getitem__(self, i):
        return self.draws[i]

    def values_on_grid(self, grid: QuadratureGrid) -> np.ndarray:
        """Matrix of draw evaluations, one row per draw."""
        return np.stack([np.asarray(g.pdf(grid.nodes), dtype=float) for g in self.draws])

    def to_json(self) -> dict:
        return {"draws": [g.to_dict() for g in self.draws], "meta": dict(self.meta)}

    @classmethod
    def from_json(cls, obj) -> "DensityEnsemble":
        if isinstance(obj, list):
            obj = {"draws": obj}
        extra = set(obj) - {"draws", "meta"}
        if extra:
            raise ConfigError(f"unknown ensemble keys: {sorted(extra)}")
        draws = [GaussianMixtureDensity.from_dict(d) for d in obj.get("draws", [])]
        return cls(tuple(draws), dict(obj.get("meta", {})))

    @classmethod
    def load(cls, path) -> "DensityEnsemble":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj)


def posterior_mean_density(ensemble: DensityEnsemble, grid: QuadratureGrid) -> GridDensity:
    """Pointwise average of the draws: the posterior mean density g*_n."""
    if len(ensemble) == 0:
        raise ConfigError("empty ensemble")
    return GridDensity(grid, ensemble.values_on_grid(grid).mean(axis=0))


# -- kernel density ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KdeDensity:
    data: np.ndarray
    bandwidth: float
    kernel: str = "gaussian"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if self.kernel != "gaussian":
            raise ConfigError("only the gaussian kernel is supported")
        data = np.asarray(self.data, dtype=float).ravel()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        out = np.zeros(flat.size)
        h = self.bandwidth
        for xi in self.data:
            z = (flat - xi) / h
            out += np.exp(-0.5 * z * z)
        out /= self.data.size * h * math.sqrt(2.0 * math.pi)
        return out.reshape(x.shape)


def silverman_bandwidth(data) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5)."""
    data = np.asarray(data, dtype=float).ravel()
    sd = np.std(data, ddof=1)
    q75, q25 = np.percentile(data, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    return 0.9 * spread * data.size ** (-0.2)


def kde(data, bandwidth_rule="silverman") -> KdeDensity:
    """Gaussian KDE with a Silverman or fixed bandwidth.

    ``bandwidth_rule`` is ``"silverman"`` or a positive number.  Constant
    data give a zero Silverman bandwidth; 1e-3 is used instead, with a
    warning.
    """
    data = np.asarray(data, dtype=float).ravel()
    if data.size == 0:
        raise ConfigError("kde needs data")
    if isinstance(bandwidth_rule, str):
        if bandwidth_rule != "silverman":
            raise ConfigError(f"unknown bandwidth rule {bandwidth_rule!r}")
        if data.size < 2:
            raise ConfigError("silverman bandwidth needs at least 2 points")
        bw = silverman_bandwidth(data)
        if not bw > 0:
            warnings.warn("silverman bandwidth is zero; falling back to 1e-3", RuntimeWarning)
            bw = 1e-3
    else:
        bw = float(bandwidth_rule)
    return KdeDensity(data, bw)


# -- random histogram --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RandomHistogramDensity:
    """Histogram density with bins ``(origin + i h, origin + (i+1) h]``."""

    bin_width: float
    origin: float
    bin_probs: np.ndarray

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ConfigError("bin width must be positive")
        p = np.asarray(self.bin_probs, dtype=float)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError("bin probabilities must lie on the simplex")
        p.setflags(write=False)
        object.__setattr__(self, "bin_probs", p)

    @property
    def edges(self) -> np.ndarray:
        return self.origin + self.bin_width * np.arange(self.bin_probs.size + 1)

    def bin_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.ceil((x - self.origin) / self.bin_width).astype(np.int64) - 1

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        idx = self.bin_index(x)
        inside = (idx >= 0) & (idx < self.bin_probs.size)
        out = np.zeros(x.shape)
        out[inside] = self.bin_probs[idx[inside]] / self.bin_width
        return out


@dataclass(frozen=True, eq=False)
class RandomHistogramPosterior:
    """Dirichlet posterior over histogram bin probabilities."""

    bin_width: float
    origin: float
    alpha: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.alpha.size

    def mean(self) -> RandomHistogramDensity:
        return RandomHistogramDensity(self.bin_width, self.origin, self.alpha / self.alpha.sum())

    def sample(self, size: int, random_state=None) -> list[RandomHistogramDensity]:
        rng = np.random.default_rng(random_state)
        draws = rng.dirichlet(self.alpha, size=size)
        out = []
        for p in draws:
            p = p / p.sum()
            out.append(RandomHistogramDensity(self.bin_width, self.origin, p))
        return out


def _histogram_layout(data: np.ndarray, h: float, origin, n_bins):
    if origin is None or n_bins is None:
        if data.size == 0:
            raise ConfigError("origin and n_bins are required without data")
        lo_idx = int(math.ceil((data.min() - h) / h)) - 1
        hi_idx = int(math.ceil((data.max() + h) / h)) - 1
        origin = lo_idx * h if origin is None else origin
        n_bins = hi_idx - int(round(origin / h)) + 1 if n_bins is None else n_bins
    if n_bins < 1:
        raise ConfigError("need at least one bin")
    return float(origin), int(n_bins)


def random_histogram_posterior(data, h: float, base_weight=1.0, origin: float | None = None,
                               n_bins: int | None = None) -> RandomHistogramPosterior:
    """Conjugate Dirichlet update of the random histogram prior.

    By default bins run over ``[min(data) - h, max(data) + h]`` aligned to
    multiples of ``h``.  ``base_weight`` is a scalar or a per-bin vector.
    """
    if not h > 0:
        raise ConfigError(f"bin width must be positive, got {h}")
    data = np.asarray(data, dtype=float).ravel()
    origin, n_bins = _histogram_layout(data, h, origin, n_bins)
    base = np.broadcast_to(np.asarray(base_weight, dtype=float), (n_bins,)).copy()
    if np.any(base <= 0):
        raise ConfigError("base weights must be positive")
    counts = np.zeros(n_bins)
    if data.size:
        idx = np.ceil((data - origin) / h).astype(np.int64) - 1
        if np.any((idx < 0) | (idx >= n_bins)):
            raise ConfigError("data fall outside the histogram bins")
        np.add.at(counts, idx, 1.0)
    return RandomHistogramPosterior(float(h), origin, base + counts)


def histogram_log_marginal(data, h: float, base_weight=1.0) -> float:
    """log p(data | h) under the Dirichlet random histogram."""
    data = np.asarray(data, dtype=float).ravel()
    post = random_histogram_posterior(data, h, base_weight)
    base = post.alpha - np.bincount(
        np.ceil((data - post.origin) / h).astype(np.int64) - 1, minlength=post.n_bins
    )
    n = data.size
    return float(
        -n * math.log(h)
        + gammaln(base.sum()) - gammaln(base.sum() + n)
        + np.sum(gammaln(post.alpha) - gammaln(base))
    )


def select_bin_width(data, candidates=(0.1, 0.25, 0.5), base_weight=1.0) -> float:
    """Candidate bin width with the largest marginal likelihood."""
    scores = [histogram_log_marginal(data, h, base_weight) for h in candidates]
    return float(candidates[int(np.argmax(scores))])
