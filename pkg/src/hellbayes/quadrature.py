"""Quadrature grids, squared Hellinger distance and the projection T(g).

The squared Hellinger distance between two probability densities is
computed in its affinity form,

    D_H(g, f) = 2 - 2 * integral sqrt(g) sqrt(f),

which only needs the overlap of the two densities to lie inside the grid.
By Cauchy-Schwarz the overlap missed outside ``[a, b]`` is at most
``sqrt(leak_g * leak_f)``, where ``leak`` is a density's mass outside the
range, so that product is what gets checked against ``LEAK_TOL``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .exceptions import ConfigError, DensityContractError, GridRangeError
from .family import ParametricFamily

DEFAULT_NODES = 4097
LEAK_TOL = 5e-3
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Uniform nodes on ``[a, b]`` carrying composite Simpson weights."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or nodes.size < 3:
            raise ConfigError("nodes and weights must be 1-d arrays of equal length >= 3")
        if np.any(np.diff(nodes) <= 0):
            raise ConfigError("grid nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ConfigError("quadrature weights must be positive")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def a(self) -> float:
        return float(self.nodes[0])

    @property
    def b(self) -> float:
        return float(self.nodes[-1])

    @property
    def range(self) -> tuple[float, float]:
        return self.a, self.b

    @property
    def spacing(self) -> float:
        return (self.b - self.a) / (self.nodes.size - 1)

    def __len__(self):
        return self.nodes.size

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def refine(self) -> "QuadratureGrid":
        """Same range with twice as many intervals."""
        return simpson_grid(self.a, self.b, 2 * (self.nodes.size - 1) + 1)


def simpson_grid(a: float, b: float, n_nodes: int = DEFAULT_NODES) -> QuadratureGrid:
    """Composite Simpson rule with ``n_nodes`` (forced odd) nodes on [a, b]."""
    if not b > a:
        raise ConfigError(f"empty integration range [{a}, {b}]")
    n_nodes = int(n_nodes)
    if n_nodes < 3:
        raise ConfigError("need at least 3 nodes")
    if n_nodes % 2 == 0:
        n_nodes += 1
    nodes = np.linspace(a, b, n_nodes)
    h = (b - a) / (n_nodes - 1)
    weights = np.empty(n_nodes)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights[0] = weights[-1] = 1.0
    weights *= h / 3.0
    return QuadratureGrid(nodes, weights)


def build_grid(data, nodes_per_unit: int | None = None, margin: float = 10.0,
               n_nodes: int = DEFAULT_NODES) -> QuadratureGrid:
    """Simpson grid on ``[min(data) - margin, max(data) + margin]``.

    If ``nodes_per_unit`` is given it sets the density of nodes, otherwise
    ``n_nodes`` nodes are used regardless of the width.
    """
    data = np.asarray(data, dtype=float).ravel()
    if data.size == 0:
        raise ConfigError("cannot build a grid from empty data")
    if not np.all(np.isfinite(data)):
        raise ConfigError("data contain non-finite values")
    if not margin > 0:
        raise ConfigError("margin must be positive")
    a = float(data.min()) - margin
    b = float(data.max()) + margin
    if nodes_per_unit is not None:
        if nodes_per_unit < 8:
            raise ConfigError("nodes_per_unit must be at least 8")
        n_nodes = int(math.ceil((b - a) * nodes_per_unit)) + 1
    return simpson_grid(a, b, n_nodes)


@dataclass(frozen=True, eq=False)
class GridDensity:
    """A density known only through its values at the nodes of ``grid``."""

    grid: QuadratureGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.nodes.shape:
            raise ConfigError("values must match the grid nodes")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise DensityContractError("grid density values must be finite and nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def pdf(self, x):
        """Linear interpolation between nodes, zero outside the grid."""
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.grid.nodes, self.values, left=0.0, right=0.0)

    def on_grid(self, grid: QuadratureGrid) -> np.ndarray:
        if grid is self.grid:
            return self.values
        return self.pdf(grid.nodes)

    def to_csv(self) -> str:
        rows = ["node,value"]
        rows += [f"{x:.17g},{v:.17g}" for x, v in zip(self.grid.nodes, self.values)]
        return "\n".join(rows) + "\n"


def evaluate_density(g, x) -> np.ndarray:
    """Evaluate any density-like object at ``x``.

    Accepts objects with an ``on_grid``/``pdf`` method or plain callables.
    """
    if hasattr(g, "pdf"):
        values = g.pdf(x)
    elif callable(g):
        values = g(x)
    else:
        raise ConfigError(f"{type(g).__name__} is not a density evaluator")
    values = np.asarray(values, dtype=float)
    if values.shape != np.shape(x):
        values = np.broadcast_to(values, np.shape(x)).astype(float)
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise DensityContractError("density evaluator returned negative or non-finite values")
    return values


def density_on_grid(g, grid: QuadratureGrid) -> np.ndarray:
    if isinstance(g, GridDensity):
        return g.on_grid(grid)
    return evaluate_density(g, grid.nodes)


def _leak(mass: float) -> float:
    return max(0.0, 1.0 - mass)


def hellinger_sq(g, f, grid: QuadratureGrid) -> float:
    """Squared Hellinger distance between two density evaluators.

    Returns a value clamped to ``[0, 2]``.  Raises
    :class:`GridRangeError` when both densities leak enough mass outside the
    grid that the missed overlap could exceed ``LEAK_TOL``.
    """
    gv = density_on_grid(g, grid)
    fv = density_on_grid(f, grid)
    w = grid.weights
    bound = 2.0 * math.sqrt(_leak(w @ gv) * _leak(w @ fv))
    if bound > LEAK_TOL:
        raise GridRangeError(
            f"densities leak mass outside [{grid.a:g}, {grid.b:g}]; "
            f"distance error could reach {bound:.3g}"
        )
    affinity = float(w @ np.sqrt(gv * fv))
    return min(2.0, max(0.0, 2.0 - 2.0 * affinity))


def normal_hellinger_sq(mu1, sd1, mu2, sd2):
    """Closed form squared Hellinger distance between two normals."""
    s2 = sd1**2 + sd2**2
    bc = np.sqrt(2.0 * sd1 * sd2 / s2) * np.exp(-((mu1 - mu2) ** 2) / (4.0 * s2))
    return 2.0 * (1.0 - bc)


class HellingerObjective:
    """theta -> D_H(g, f_theta) with sqrt(g) cached on the grid.

    ``g`` may also be a 2-d array of root densities (one row per draw),
    in which case calls return one distance per row.
    """

    def __init__(self, family: ParametricFamily, g, grid: QuadratureGrid, root=None):
        self.family = family
        self.grid = grid
        if root is None:
            gv = density_on_grid(g, grid)
            root = np.sqrt(gv)
        self.root = np.asarray(root, dtype=float)
        self.weighted_root = self.root * grid.weights
        self.leak = np.maximum(0.0, 1.0 - (self.root**2) @ grid.weights)

    def affinity(self, thetas) -> np.ndarray:
        """Affinity for each theta (rows); shape (m,) or (m, J)."""
        thetas = np.asarray(thetas, dtype=float).reshape(-1, self.family.dimension)
        out_shape = (thetas.shape[0],) + self.weighted_root.shape[:-1]
        aff = np.zeros(out_shape)
        ok = self.family.batch_in_bounds(thetas)
        if ok.any():
            sf = self.family.sqrt_pdf_batch(thetas[ok], self.grid.nodes)
            aff[ok] = sf @ self.weighted_root.T
        return aff

    def __call__(self, thetas) -> np.ndarray:
        """D_H per theta; out-of-bounds thetas get +inf."""
        thetas = np.asarray(thetas, dtype=float).reshape(-1, self.family.dimension)
        d = np.clip(2.0 - 2.0 * self.affinity(thetas), 0.0, 2.0)
        ok = self.family.batch_in_bounds(thetas)
        d[~ok] = np.inf
        return d

    def family_leak(self, theta) -> float:
        mu, s = self.family.mean_sd(theta)
        return float(ndtr((self.grid.a - mu) / s) + ndtr((mu - self.grid.b) / s))

    def error_bound(self, theta) -> float:
        lg = float(np.max(self.leak))
        return 2.0 * math.sqrt(lg * self.family_leak(theta))


# -- minimisation ---------------------------------------------------------


def golden_section(fun, lo: float, hi: float, tol: float = 1e-7, max_iter: int = 200):
    """Minimise a scalar function on [lo, hi]; returns (x, f(x)).

    The best point evaluated is returned, endpoints included, so the result
    never exceeds ``min(fun(lo), fun(hi))``.
    """
    f_lo, f_hi = fun(lo), fun(hi)
    best = min((f_lo, lo), (f_hi, hi))
    x1 = hi - INV_PHI * (hi - lo)
    x2 = lo + INV_PHI * (hi - lo)
    f1, f2 = fun(x1), fun(x2)
    it = 0
    while hi - lo > tol and it < max_iter:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - INV_PHI * (hi - lo)
            f1 = fun(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + INV_PHI * (hi - lo)
            f2 = fun(x2)
        it += 1
    best = min(best, (f1, x1), (f2, x2))
    return best[1], best[0]


def _descend(values: np.ndarray, i: int) -> int:
    """Walk downhill on a 1-d scan until a local minimum."""
    n = values.size
    while True:
        j = i
        if i > 0 and values[i - 1] < values[j]:
            j = i - 1
        if i < n - 1 and values[i + 1] < values[j]:
            j = i + 1
        if j == i:
            return i
        i = j


def minimize_1d(fun, lo: float, hi: float, starts: Sequence[float] = (),
                n_scan: int = 200, tol: float = 1e-7):
    """Multi-start scan + golden-section minimisation on [lo, hi].

    ``fun`` must accept an array of points and return an array of values.
    Returns ``(x, value)``; ties are broken towards the smaller ``x``.
    """
    if not hi > lo:
        raise ConfigError(f"degenerate search interval [{lo}, {hi}]")
    scan = np.linspace(lo, hi, n_scan)
    vals = np.asarray(fun(scan), dtype=float)
    candidates = {int(np.argmin(vals))}
    for s in starts:
        i = int(np.clip(np.searchsorted(scan, s), 0, n_scan - 1))
        candidates.add(_descend(vals, i))

    def scalar(x):
        return float(fun(np.array([x]))[0])

    results = []
    for i in sorted(candidates):
        left = scan[max(i - 1, 0)]
        right = scan[min(i + 1, n_scan - 1)]
        x, v = golden_section(scalar, left, right, tol=tol)
        if vals[i] < v:
            x, v = scan[i], vals[i]
        results.append((v, x))
    v, x = min(results)
    return float(x), float(v)


def default_search_box(family: ParametricFamily, grid: QuadratureGrid) -> list[tuple[float, float]]:
    box = [(grid.a, grid.b)]
    if family.has_scale:
        lower = max(4.0 * grid.spacing, family.scale_lower * 10)
        box.append((lower, (grid.b - grid.a) / 4.0))
    return box


def density_starts(family: ParametricFamily, values: np.ndarray, grid: QuadratureGrid):
    """Start points from the quantiles (and MAD) of a grid density."""
    mass = np.cumsum(values * grid.weights)
    if mass[-1] <= 0:
        q = np.quantile(grid.nodes, [0.1, 0.3, 0.5, 0.7, 0.9])
        mad_sd = (grid.b - grid.a) / 8.0
    else:
        cdf = mass / mass[-1]
        q = np.interp([0.1, 0.3, 0.5, 0.7, 0.9], cdf, grid.nodes)
        med = q[2]
        dev = np.abs(grid.nodes - med)
        order = np.argsort(dev)
        cdf_dev = np.cumsum((values * grid.weights)[order]) / mass[-1]
        mad = float(dev[order][min(np.searchsorted(cdf_dev, 0.5), dev.size - 1)])
        mad_sd = max(1.4826 * mad, 4.0 * grid.spacing)
    if family.has_scale:
        return [np.array([m, mad_sd]) for m in q]
    return [np.array([m]) for m in q]


def clip_to_box(theta, box):
    return np.array([min(max(t, lo), hi) for t, (lo, hi) in zip(theta, box)])


def coordinate_minimize(fun, box, starts, n_scan: int = 200, tol: float = 1e-7,
                        max_cycles: int = 50):
    """Multi-start coordinate descent, each coordinate by :func:`minimize_1d`.

    ``fun`` maps an (m, p) array of points to m values.  Returns
    ``(theta, value)`` with ties broken lexicographically.
    """
    for lo, hi in box:
        if not hi > lo:
            raise ConfigError(f"degenerate search interval [{lo}, {hi}]")
    p = len(box)
    results = []
    for start in starts:
        theta = clip_to_box(np.asarray(start, dtype=float), box)
        value = float(fun(theta[None, :])[0])
        for _ in range(max_cycles):
            previous = theta.copy()
            for c in range(p):
                def line(xs, c=c, theta=theta):
                    pts = np.repeat(theta[None, :], len(xs), axis=0)
                    pts[:, c] = xs
                    return fun(pts)
                x, v = minimize_1d(line, *box[c], starts=[theta[c]], n_scan=n_scan, tol=tol)
                if v <= value:
                    theta[c], value = x, v
            if p == 1 or np.max(np.abs(theta - previous)) < tol:
                break
        results.append((value, tuple(theta)))
    value, theta = min(results)
    return np.array(theta), float(value)


def verification_points(box, n_per_coord: int = 200) -> np.ndarray:
    axes = [np.linspace(lo, hi, n_per_coord) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def minimize_objective(fun, box, starts, n_verify: int = 200, tol: float = 1e-7):
    """Coordinate minimisation followed by a grid check over ``box``.

    If any verification point beats the optimum by more than 1e-12 the
    descent restarts from it, so the result is never beaten by the
    verification grid.
    """
    theta, value = coordinate_minimize(fun, box, starts, n_scan=n_verify, tol=tol)
    if len(box) > 1:
        pts = verification_points(box, n_verify)
        vals = fun(pts)
        i = int(np.argmin(vals))
        if vals[i] < value - 1e-12:
            theta, value = coordinate_minimize(fun, box, [pts[i]], n_scan=n_verify, tol=tol)
            if vals[i] < value:
                theta, value = pts[i], float(vals[i])
    return theta, value


def minimize_hellinger(family: ParametricFamily, g, grid: QuadratureGrid,
                       search_box=None, starts=None, objective=None):
    """T(g): the family member closest to ``g`` in Hellinger distance.

    Returns ``(theta, distance)``.
    """
    if objective is None:
        objective = HellingerObjective(family, g, grid)
    box = list(search_box) if search_box is not None else default_search_box(family, grid)
    if len(box) != family.dimension:
        raise ConfigError("search box dimension does not match the family")
    for (lo, hi), (blo, bhi) in zip(box, family.param_bounds):
        if not hi > lo:
            raise ConfigError(f"degenerate search interval [{lo}, {hi}]")
        if lo < blo:
            raise ConfigError(f"search interval [{lo}, {hi}] leaves the parameter domain")
    if starts is None:
        starts = density_starts(family, objective.root**2, grid)
    theta, value = minimize_objective(objective, box, starts)
    if objective.error_bound(theta) > LEAK_TOL:
        raise GridRangeError("optimum sits where the grid cannot resolve the distance")
    return theta, value
