"""Monte-Carlo simulation study and the parasite egg-count analysis.

Every replication draws one clean N(theta0, sigma0^2) data set and then
analyses it once per contamination cell, so the cells are paired as in
the original design.  Seeds are derived from ``(master_seed, index, cell)``
only, which makes each replication independent of execution order.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from joblib import Parallel, delayed

from .density import DensityEnsemble
from .dpmix import DpPriorConfig, McmcConfig, run_blocked_gibbs
from .estimators import canonical_method, data_grid, default_epsilon, estimate
from .exceptions import ConfigError
from .family import normal_location, normal_location_scale
from .hierarchical import (
    PriorSpec,
    conjugate_normal_posterior,
    eap_and_ci,
    hierarchical_posterior,
)

logger = logging.getLogger(__name__)

METHODS = ("conjugate", "hierarchical", "t1", "t2", "t3", "mhde")


@dataclass(frozen=True)
class ContaminationSpec:
    """Shift the last ``k`` observations by ``shift`` (down by default)."""

    k: int
    shift: float
    direction: str = "down"

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError("contamination k must be a positive integer")
        if not self.shift >= 0:
            raise ConfigError("contamination shift must be nonnegative")
        if self.direction not in ("down", "up"):
            raise ConfigError("direction must be 'down' or 'up'")

    @property
    def signed_shift(self) -> float:
        return -self.shift if self.direction == "down" else self.shift

    @classmethod
    def from_dict(cls, d) -> "ContaminationSpec":
        _reject_unknown(d, {"k", "shift", "direction"}, "contamination")
        return cls(int(d["k"]), float(d["shift"]), d.get("direction", "down"))


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 20
    theta0: float = 5.0
    sigma0: float = 1.0
    replications: int = 200
    methods: tuple = ("conjugate", "hierarchical")
    contamination: tuple = ()
    include_clean: bool = True
    master_seed: int = 0
    prior_mean: float = 0.0
    prior_var: float = 25.0
    dp_mass: float = 1.0
    truncation: int = 30
    dp_iter: int = 2000
    dp_burn_in: int = 500
    dp_thin: int = 15
    mh_steps: int = 20000
    mh_thin: int = 10
    proposal_sd: float = 0.5
    n_nodes: int = 4097
    margin: float = 10.0
    epsilon: float | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if not self.sigma0 > 0:
            raise ConfigError("sigma0 must be positive")
        methods = tuple(self.methods)
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        cont = self.contamination
        if cont is None:
            cont = ()
        elif isinstance(cont, (ContaminationSpec, dict)):
            cont = (cont,)
        cont = tuple(c if isinstance(c, ContaminationSpec) else ContaminationSpec.from_dict(c) for c in cont)
        for c in cont:
            if c.k >= self.n:
                raise ConfigError(f"cannot contaminate {c.k} of {self.n} observations")
        if not cont and not self.include_clean:
            raise ConfigError("no cells to simulate")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "contamination", cont)

    @property
    def cells(self) -> list:
        cells = [None] if self.include_clean else []
        return cells + list(self.contamination)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        allowed = {f.name for f in fields(cls)}
        _reject_unknown(d, allowed, "simulation config")
        d = dict(d)
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["contamination"] = [asdict(c) for c in self.contamination]
        return d

    def full_scale(self) -> "SimulationConfig":
        """1000 replications and 2,000,000 Metropolis steps per data set."""
        n_draws = McmcConfig(self.dp_iter, self.dp_burn_in, self.dp_thin).n_kept
        return replace(self, replications=1000, mh_steps=int(math.ceil(2_000_000 / n_draws)))


@dataclass(frozen=True)
class ReplicationRecord:
    index: int
    method: str
    k: int
    shift: float
    estimate: float
    ci_low: float
    ci_high: float


@dataclass
class SummaryRow:
    method: str
    k: int
    shift: float
    bias: float
    sd: float
    coverage: float
    length: float
    reps: int


@dataclass
class SummaryTable:
    rows: list = field(default_factory=list)

    COLUMNS = ("method", "k", "shift", "bias", "sd", "coverage", "length", "reps")

    def get(self, method: str, k: int = 0, shift: float = 0.0) -> SummaryRow:
        for r in self.rows:
            if r.method == method and r.k == k and r.shift == shift:
                return r
        raise KeyError((method, k, shift))

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows:
            lines.append("\t".join([
                r.method, str(r.k), _fmt(r.shift), _fmt(r.bias), _fmt(r.sd),
                _fmt(r.coverage), _fmt(r.length), str(r.reps),
            ]))
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _reject_unknown(d, allowed, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown {what} keys: {sorted(extra)}")


# -- operations ---------------------------------------------------------------


def simulate_dataset(n: int, theta0: float = 5.0, sigma0: float = 1.0, seed=0) -> np.ndarray:
    if n < 1:
        raise ConfigError("n must be positive")
    return np.random.default_rng(seed).normal(theta0, sigma0, size=n)


def contaminate(data, spec: ContaminationSpec) -> np.ndarray:
    """Copy of ``data`` with its last ``spec.k`` entries shifted."""
    x = np.array(data, dtype=float).ravel()
    if spec.k >= x.size:
        raise ConfigError(f"cannot contaminate {spec.k} of {x.size} observations")
    x[-spec.k:] += spec.signed_shift
    return x


def _seed(*parts) -> int:
    ss = np.random.SeedSequence([int(p) & (2**63 - 1) for p in parts])
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


def _cell_key(cell) -> tuple:
    if cell is None:
        return (0, 0, 0)
    return (cell.k, int(round(cell.shift * 1000)), 0 if cell.direction == "down" else 1)


def analyse_dataset(x, config: SimulationConfig, dp_seed: int, mh_seed: int) -> dict:
    """Run every requested method on one data set: method -> (estimate, lo, hi)."""
    out = {}
    methods = set(config.methods)
    if "conjugate" in methods:
        post = conjugate_normal_posterior(x, config.prior_mean, config.prior_var, config.sigma0)
        out["conjugate"] = (post.mean, *post.interval(0.95))
    needs_dp = methods & {"hierarchical", "t1", "t2", "t3"}
    family = normal_location(config.sigma0)
    grid = data_grid(x, family, config.margin, config.n_nodes)
    ensemble = None
    if needs_dp:
        ensemble = run_blocked_gibbs(
            x, DpPriorConfig(mass=config.dp_mass, truncation=config.truncation),
            McmcConfig(config.dp_iter, config.dp_burn_in, config.dp_thin, dp_seed),
        )
    if "hierarchical" in methods:
        prior = PriorSpec(config.prior_mean, config.prior_var)
        mh = McmcConfig(config.mh_steps, config.mh_steps // 2, config.mh_thin, mh_seed)
        pool = hierarchical_posterior(ensemble, x.size, prior, family, mh, grid, config.proposal_sd)
        s = eap_and_ci(pool)
        out["hierarchical"] = (float(s.eap[0]), float(s.ci_low[0]), float(s.ci_high[0]))
    for m in ("t1", "t2", "t3", "mhde"):
        if m in methods:
            eps = config.epsilon if config.epsilon is not None else default_epsilon(x.size)
            r = estimate(canonical_method(m), family, grid, data=x, ensemble=ensemble,
                         epsilon=eps if m == "t3" else None)
            out[m] = (float(r.theta[0]), math.nan, math.nan)
    return out


def run_replication(config: SimulationConfig, index: int) -> list[ReplicationRecord]:
    """All methods on all cells for one replication index."""
    clean = simulate_dataset(config.n, config.theta0, config.sigma0, _seed(config.master_seed, index))
    records = []
    for cell in config.cells:
        x = clean if cell is None else contaminate(clean, cell)
        key = _cell_key(cell)
        dp_seed = _seed(config.master_seed, index, *key, 1)
        mh_seed = _seed(config.master_seed, index, *key, 2)
        results = analyse_dataset(x, config, dp_seed, mh_seed)
        k = 0 if cell is None else cell.k
        shift = 0.0 if cell is None else cell.signed_shift
        for m in config.methods:
            est, lo, hi = results[m]
            records.append(ReplicationRecord(index, m, k, shift, est, lo, hi))
    return records


def run_simulation(config: SimulationConfig, n_jobs: int = 1, indices=None) -> list[ReplicationRecord]:
    """Run replications (optionally in parallel); records come back in index order."""
    indices = range(config.replications) if indices is None else indices
    if n_jobs == 1:
        chunks = [run_replication(config, i) for i in indices]
    else:
        chunks = Parallel(n_jobs=n_jobs)(delayed(run_replication)(config, i) for i in indices)
    return [r for chunk in chunks for r in chunk]


def summarize(records, theta0: float) -> SummaryTable:
    """Bias, sd, coverage and mean interval length per (method, cell)."""
    records = list(records)
    if not records:
        raise ConfigError("no records to summarise")
    keys = []
    for r in records:
        key = (r.method, r.k, r.shift)
        if key not in keys:
            keys.append(key)
    table = SummaryTable()
    for method, k, shift in keys:
        cell = [r for r in records if (r.method, r.k, r.shift) == (method, k, shift)]
        est = np.array([r.estimate for r in cell])
        lo = np.array([r.ci_low for r in cell])
        hi = np.array([r.ci_high for r in cell])
        if est.size > 1:
            sd = float(np.std(est, ddof=1))
        else:
            warnings.warn("sd of a single replication reported as 0", RuntimeWarning)
            sd = 0.0
        if np.all(np.isnan(lo)):
            coverage = length = math.nan
        else:
            coverage = float(np.mean((lo <= theta0) & (theta0 <= hi)))
            length = float(np.mean(hi - lo))
        table.rows.append(SummaryRow(method, k, shift, float(est.mean() - theta0), sd,
                                     coverage, length, int(est.size)))
    return table


# -- parasite data ---------------------------------------------------------------


@dataclass(frozen=True)
class PairedCountData:
    ids: tuple
    before: np.ndarray
    after: np.ndarray

    def __post_init__(self):
        before = np.asarray(self.before)
        after = np.asarray(self.after)
        if not (len(self.ids) == before.size == after.size):
            raise ConfigError("ids, before and after must have equal length")
        if np.any(before <= 0) or np.any(after < 0):
            raise ConfigError("counts must be positive before and nonnegative after treatment")
        if np.any(after >= before):
            raise ConfigError("after-treatment counts must be below the before counts")
        object.__setattr__(self, "before", before)
        object.__setattr__(self, "after", after)

    def without(self, subject) -> "PairedCountData":
        keep = [i for i, s in enumerate(self.ids) if s != subject]
        if len(keep) == len(self.ids):
            raise ConfigError(f"no subject {subject!r}")
        return PairedCountData(tuple(self.ids[i] for i in keep), self.before[keep], self.after[keep])


PARASITE_DATA = PairedCountData(
    ids=("1", "2", "3", "4", "5", "6", "7"),
    before=np.array([2440, 1000, 1900, 1820, 3260, 300, 660]),
    after=np.array([580, 320, 400, 160, 60, 40, 120]),
)


def logodds_ingest(pc: PairedCountData) -> np.ndarray:
    """Log odds of the survival fraction after/before per subject."""
    p = pc.after / pc.before
    return np.log(p / (1.0 - p))


def load_paired_counts_csv(path) -> PairedCountData:
    import csv

    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(reader.fieldnames) != {"id", "before", "after"}:
                raise ConfigError(f"{path}: expected columns id, before, after")
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        before = np.array([int(r["before"]) for r in rows])
        after = np.array([int(r["after"]) for r in rows])
    except ValueError as exc:
        raise ConfigError(f"{path}: counts must be integers ({exc})") from None
    return PairedCountData(tuple(r["id"] for r in rows), before, after)


@dataclass(frozen=True)
class RealDataSettings:
    prior_mean: float = 0.0
    prior_var: float = 5.0
    scale_shape: float = 3.0
    scale_rate: float = 0.5
    dp_mass: float = 1.0
    truncation: int = 30
    dp_iter: int = 2000
    dp_burn_in: int = 500
    dp_thin: int = 15
    mh_steps: int = 20000
    mh_thin: int = 10
    proposal_sd: float = 0.5
    n_nodes: int = 4097
    margin: float = 10.0
    seed: int = 0


def realdata_analysis(pc: PairedCountData, settings: RealDataSettings = RealDataSettings()):
    """Location-scale Hellinger posterior of the log-odds.

    Returns ``(summary_dict, pool)``; samples in the pool are (mu, sigma).
    """
    y = logodds_ingest(pc)
    outlier = pc.ids[int(np.argmax(np.abs(y - np.median(y))))]
    y_clean = logodds_ingest(pc.without(outlier))
    family = normal_location_scale()
    grid = data_grid(y, family, settings.margin, settings.n_nodes)
    dp_seed, mh_seed = _seed(settings.seed, 1), _seed(settings.seed, 2)
    ensemble = run_blocked_gibbs(
        y, DpPriorConfig(mass=settings.dp_mass, truncation=settings.truncation),
        McmcConfig(settings.dp_iter, settings.dp_burn_in, settings.dp_thin, dp_seed),
    )
    prior = PriorSpec(settings.prior_mean, settings.prior_var, settings.scale_shape, settings.scale_rate)
    mh = McmcConfig(settings.mh_steps, settings.mh_steps // 2, settings.mh_thin, mh_seed)
    pool = hierarchical_posterior(ensemble, y.size, prior, family, mh, grid, settings.proposal_sd)
    s = eap_and_ci(pool)
    summary = {
        "logodds": y.tolist(),
        "classical": {
            "mean": float(y.mean()), "sd": float(y.std(ddof=1)),
            "suspected_outlier": outlier,
            "mean_without_outlier": float(y_clean.mean()),
            "sd_without_outlier": float(y_clean.std(ddof=1)),
        },
        "parameters": ["mu", "sigma"],
        "eap": s.eap.tolist(),
        "ci": [[lo, hi] for lo, hi in zip(s.ci_low.tolist(), s.ci_high.tolist())],
        "sd": s.sd.tolist(),
        "acceptance_rate": float(np.mean(pool.acceptance_rates)),
        "ensemble_size": len(ensemble),
        "pool_size": len(pool),
    }
    return summary, pool


def posterior_density_csv(pool, names=("mu", "sigma"), bins: int = 100) -> str:
    """Histogram densities of each coordinate as ``parameter,x,density`` rows."""
    lines = ["parameter,x,density"]
    for j, name in enumerate(names):
        dens, edges = np.histogram(pool.samples[:, j], bins=bins, density=True)
        mids = 0.5 * (edges[:-1] + edges[1:])
        lines += [f"{name},{_fmt(m)},{_fmt(d)}" for m, d in zip(mids, dens)]
    return "\n".join(lines) + "\n"


def ensemble_from_simulation(x, config: SimulationConfig, seed: int) -> DensityEnsemble:
    return run_blocked_gibbs(
        x, DpPriorConfig(mass=config.dp_mass, truncation=config.truncation),
        McmcConfig(config.dp_iter, config.dp_burn_in, config.dp_thin, seed),
    )
