"""Gaussian parametric families used as the model f_theta.

Two families are supported:

``normal-location``
    theta = (mu,), scale fixed at ``sigma``.
``normal-location-scale``
    theta = (mu, sigma) with ``sigma > scale_lower``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ParameterDomainError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

NORMAL_LOCATION = "normal-location"
NORMAL_LOCATION_SCALE = "normal-location-scale"

_ALIASES = {
    "normal-loc": NORMAL_LOCATION,
    "normal-location": NORMAL_LOCATION,
    "normal-loc-scale": NORMAL_LOCATION_SCALE,
    "normal-location-scale": NORMAL_LOCATION_SCALE,
}


@dataclass(frozen=True)
class ParametricFamily:
    """A univariate Gaussian family.

    Parameters
    ----------
    id : str
        ``"normal-location"`` or ``"normal-location-scale"``.
    sigma : float
        Known scale for the location family; ignored otherwise.
    scale_lower : float
        Open lower bound on the scale coordinate.
    """

    id: str
    sigma: float = 1.0
    scale_lower: float = 1e-8

    def __post_init__(self):
        if self.id not in (NORMAL_LOCATION, NORMAL_LOCATION_SCALE):
            raise ConfigError(f"unknown family {self.id!r}")
        if not self.sigma > 0:
            raise ConfigError(f"known scale must be positive, got {self.sigma}")
        if not self.scale_lower >= 0:
            raise ConfigError("scale_lower must be nonnegative")

    @property
    def dimension(self) -> int:
        return 1 if self.id == NORMAL_LOCATION else 2

    @property
    def has_scale(self) -> bool:
        return self.id == NORMAL_LOCATION_SCALE

    @property
    def param_bounds(self) -> list[tuple[float, float]]:
        """Open interval per coordinate."""
        if self.has_scale:
            return [(-math.inf, math.inf), (self.scale_lower, math.inf)]
        return [(-math.inf, math.inf)]

    @property
    def param_names(self) -> list[str]:
        return ["mu", "sigma"] if self.has_scale else ["mu"]

    # -- parameters --------------------------------------------------------

    def validate_params(self, theta) -> list[str]:
        """Return a list of violations; an empty list means ``theta`` is valid."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.dimension,):
            return [f"expected {self.dimension} coordinate(s), got shape {theta.shape}"]
        problems = []
        for name, value, (lo, hi) in zip(self.param_names, theta, self.param_bounds):
            if not np.isfinite(value):
                problems.append(f"{name}={value} is not finite")
            elif not lo < value < hi:
                problems.append(f"{name}={value} outside ({lo}, {hi})")
        return problems

    def check_params(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        problems = self.validate_params(theta)
        if problems:
            raise ParameterDomainError("; ".join(problems))
        return theta

    def in_bounds(self, theta) -> bool:
        return not self.validate_params(theta)

    def _loc_scale(self, theta) -> tuple[float, float]:
        theta = self.check_params(theta)
        if self.has_scale:
            return float(theta[0]), float(theta[1])
        return float(theta[0]), self.sigma

    # -- densities ---------------------------------------------------------

    def log_density(self, theta, x):
        """log f_theta(x), vectorised over ``x``."""
        mu, s = self._loc_scale(theta)
        z = (np.asarray(x, dtype=float) - mu) / s
        return -0.5 * z * z - math.log(s) - LOG_SQRT_2PI

    def pdf(self, theta, x):
        return np.exp(self.log_density(theta, x))

    def sqrt_pdf(self, theta, x):
        return np.exp(0.5 * self.log_density(theta, x))

    def sqrt_pdf_batch(self, thetas, x) -> np.ndarray:
        """sqrt f_theta(x) for many parameter vectors: returns (m, len(x))."""
        thetas = np.asarray(thetas, dtype=float).reshape(-1, self.dimension)
        x = np.asarray(x, dtype=float)
        mu = thetas[:, :1]
        s = thetas[:, 1:2] if self.has_scale else np.full_like(mu, self.sigma)
        z = (x[None, :] - mu) / s
        return np.exp(-0.25 * z * z - 0.5 * np.log(s) - 0.5 * LOG_SQRT_2PI)

    def batch_in_bounds(self, thetas) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float).reshape(-1, self.dimension)
        ok = np.all(np.isfinite(thetas), axis=1)
        if self.has_scale:
            ok &= thetas[:, 1] > self.scale_lower
        return ok

    def fisher_information(self, theta) -> np.ndarray:
        """Per-observation Fisher information matrix."""
        _, s = self._loc_scale(theta)
        if self.has_scale:
            return np.diag([1.0 / s**2, 2.0 / s**2])
        return np.array([[1.0 / s**2]])

    def mean_sd(self, theta) -> tuple[float, float]:
        return self._loc_scale(theta)

    def spec_string(self) -> str:
        if self.has_scale:
            return "normal-loc-scale"
        return f"normal-loc(sigma={self.sigma:g})"


def normal_location(sigma: float = 1.0) -> ParametricFamily:
    return ParametricFamily(NORMAL_LOCATION, sigma=sigma)


def normal_location_scale(scale_lower: float = 1e-8) -> ParametricFamily:
    return ParametricFamily(NORMAL_LOCATION_SCALE, scale_lower=scale_lower)


def get_family(name: str, sigma: float = 1.0, scale_lower: float = 1e-8) -> ParametricFamily:
    """Look up a family by its CLI or canonical name."""
    try:
        canonical = _ALIASES[name]
    except KeyError:
        raise ConfigError(
            f"unknown family {name!r}; choose from {sorted(_ALIASES)}"
        ) from None
    return ParametricFamily(canonical, sigma=sigma, scale_lower=scale_lower)
