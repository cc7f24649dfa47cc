"""Command line entry point.

Subcommands::

    hellinger  squared Hellinger distance between a density and a family member
    dpmix      DP mixture posterior draws for a data set
    estimate   one-step minimum Hellinger estimate
    fit        hierarchical Hellinger posterior summary
    simulate   simulation study table
    realdata   parasite egg-count analysis

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
All outputs are written atomically and reals carry 17 significant digits,
so reruns with identical inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from .density import DensityEnsemble, GaussianMixtureDensity
from .dpmix import DpPriorConfig, McmcConfig, run_blocked_gibbs
from .estimators import METHODS as ESTIMATOR_METHODS, canonical_method, data_grid, default_epsilon, estimate
from .exceptions import ConfigError, HellbayesError, NumericalError
from .experiments import (
    PARASITE_DATA,
    RealDataSettings,
    SimulationConfig,
    load_paired_counts_csv,
    posterior_density_csv,
    realdata_analysis,
    run_simulation,
    summarize,
)
from .family import get_family
from .hierarchical import HierarchicalHellingerPosterior
from .quadrature import build_grid, hellinger_sq

THREADS_ENV = "HELLBAYES_THREADS"


# -- serialisation -------------------------------------------------------------


def dumps(obj) -> str:
    """JSON with reals at 17 significant digits and non-finite reals as null."""
    return _encode(obj) + "\n"


def _encode(obj) -> str:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_atomic(path, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        write_atomic(out, text)


# -- inputs --------------------------------------------------------------------


def load_dataset_csv(path) -> np.ndarray:
    """One real per nonempty line; an optional first line ``x`` is a header."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    values, seen = [], False
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        if not seen and text == "x":
            seen = True
            continue
        seen = True
        try:
            v = float(text)
        except ValueError:
            raise ConfigError(f"{path}: line {lineno}: cannot parse {text!r} as a number") from None
        if not math.isfinite(v):
            raise ConfigError(f"{path}: line {lineno}: value is not finite")
        values.append(v)
    if not values:
        raise ConfigError(f"{path}: no data")
    return np.array(values)


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _numbers(text: str, count: int, what: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise ConfigError(f"{what}: expected {count} comma-separated numbers, got {text!r}") from None
    if len(vals) != count:
        raise ConfigError(f"{what}: expected {count} numbers, got {len(vals)}")
    return vals


class _Uniform:
    def __init__(self, lo: float, hi: float):
        if not hi > lo:
            raise ConfigError("uniform density needs a < b")
        self.lo, self.hi = lo, hi

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)


def parse_density(spec: str):
    """``normal:m,s``, ``uniform:a,b`` or ``@file.json`` holding a mixture.

    Returns the density and a ``(lo, hi)`` interval holding all its mass up
    to a negligible tail.
    """
    if spec.startswith("@"):
        obj = _load_json(spec[1:])
        g = GaussianMixtureDensity.from_dict(obj)
        sd = np.sqrt(g.variances)
        return g, (float(np.min(g.means - 12 * sd)), float(np.max(g.means + 12 * sd)))
    kind, _, args = spec.partition(":")
    if kind == "normal":
        m, s = _numbers(args, 2, "normal density")
        if not s > 0:
            raise ConfigError("normal density needs a positive sd")
        return GaussianMixtureDensity.normal(m, s), (m - 12 * s, m + 12 * s)
    if kind == "uniform":
        a, b = _numbers(args, 2, "uniform density")
        return _Uniform(a, b), (a, b)
    raise ConfigError(f"unknown density spec {spec!r}; use normal:m,s, uniform:a,b or @file.json")


def parse_member(spec: str, sigma: float = 1.0):
    """``normal-loc:mu`` or ``normal-loc-scale:mu,sigma`` -> (family, theta)."""
    name, _, args = spec.partition(":")
    family = get_family(name, sigma=sigma)
    theta = np.array(_numbers(args, family.dimension, name))
    return family, family.check_params(theta)


def _threads(arg) -> int:
    raw = arg if arg is not None else os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


# -- subcommands -----------------------------------------------------------------


def cmd_hellinger(args) -> None:
    g, (lo, hi) = parse_density(args.g)
    family, theta = parse_member(args.f, args.sigma)
    m, s = family.mean_sd(theta)
    grid = build_grid([lo, hi, m - 12 * s, m + 12 * s], margin=1.0, n_nodes=args.nodes)
    f = lambda x: family.pdf(theta, x)  # noqa: E731
    d = hellinger_sq(g, f, grid)
    _emit(dumps({"d_h_sq": d, "family": family.id, "theta": theta.tolist(), "nodes": len(grid)}), args.out)


def _dp_configs(args, seed):
    prior = DpPriorConfig(mass=args.mass, truncation=args.truncation)
    return prior, McmcConfig(args.iters, args.burn, args.thin, seed)


def cmd_dpmix(args) -> None:
    x = load_dataset_csv(args.data)
    prior, mcmc = _dp_configs(args, args.seed)
    ensemble = run_blocked_gibbs(x, prior, mcmc)
    _emit(dumps(ensemble.to_json()), args.out)


def cmd_estimate(args) -> None:
    x = load_dataset_csv(args.data)
    family = get_family(args.family, sigma=args.sigma)
    method = canonical_method(args.method)
    grid = data_grid(x, family, args.margin, args.nodes)
    ensemble = None
    if method != "classical-mhde":
        if args.ensemble:
            ensemble = DensityEnsemble.from_json(_load_json(args.ensemble))
        else:
            prior, mcmc = _dp_configs(args, args.seed)
            ensemble = run_blocked_gibbs(x, prior, mcmc)
    eps = None
    if method == "theta3":
        eps = args.epsilon if args.epsilon is not None else default_epsilon(x.size)
    result = estimate(method, family, grid, data=x, ensemble=ensemble, epsilon=eps)
    out = result.to_dict()
    out["family"] = family.id
    out["parameters"] = family.param_names
    out["n"] = int(x.size)
    _emit(dumps(out), args.out)


def cmd_fit(args) -> None:
    x = load_dataset_csv(args.data)
    model = HierarchicalHellingerPosterior(
        family=args.family, sigma=args.sigma, prior_mean=args.prior_mean, prior_var=args.prior_var,
        scale_shape=args.scale_shape, scale_rate=args.scale_rate, dp_mass=args.mass,
        truncation=args.truncation, dp_iter=args.iters, dp_burn_in=args.burn, dp_thin=args.thin,
        mh_steps=args.mh_steps, mh_thin=args.mh_thin, proposal_sd=args.proposal_sd,
        n_nodes=args.nodes, margin=args.margin, random_state=args.seed,
    ).fit(x)
    family = get_family(args.family, sigma=args.sigma)
    s = model.summary_
    out = {
        "family": family.id,
        "parameters": family.param_names,
        "n": int(x.size),
        "eap": s.eap.tolist(),
        "ci": [[lo, hi] for lo, hi in zip(s.ci_low.tolist(), s.ci_high.tolist())],
        "sd": s.sd.tolist(),
        "acceptance_rate": model.acceptance_rate_,
        "ensemble_size": len(model.ensemble_),
        "pool_size": len(model.pool_),
        "seed": args.seed,
    }
    _emit(dumps(out), args.out)


def cmd_simulate(args) -> None:
    config = SimulationConfig.from_dict(_load_json(args.config))
    if args.paper_scale:
        config = config.full_scale()
    records = run_simulation(config, n_jobs=_threads(args.threads))
    _emit(summarize(records, config.theta0).to_tsv(), args.out)


def cmd_realdata(args) -> None:
    pc = load_paired_counts_csv(args.csv) if args.csv else PARASITE_DATA
    settings = RealDataSettings(seed=args.seed, mh_steps=args.mh_steps, prior_var=args.prior_var)
    summary, pool = realdata_analysis(pc, settings)
    summary["seed"] = args.seed
    _emit(dumps(summary), args.out)
    if args.density_csv:
        write_atomic(args.density_csv, posterior_density_csv(pool))


# -- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_dp(p, iters=2000, burn=500, thin=15):
    p.add_argument("--iters", type=int, default=iters, help="Gibbs sweeps")
    p.add_argument("--burn", type=int, default=burn, help="burn-in sweeps")
    p.add_argument("--thin", type=int, default=thin, help="keep every THIN-th sweep")
    p.add_argument("--mass", type=float, default=1.0, help="DP concentration")
    p.add_argument("--truncation", type=int, default=30, help="stick-breaking truncation")


def _add_grid(p):
    p.add_argument("--nodes", type=int, default=4097, help="quadrature nodes")
    p.add_argument("--margin", type=float, default=10.0, help="grid margin in scale units")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hellbayes", description="Bayesian minimum Hellinger distance estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("hellinger", help="squared Hellinger distance")
    p.add_argument("--g", required=True, help="normal:m,s | uniform:a,b | @mixture.json")
    p.add_argument("--f", required=True, help="normal-loc:mu | normal-loc-scale:mu,sigma")
    p.add_argument("--sigma", type=float, default=1.0, help="known sigma for normal-loc")
    p.add_argument("--nodes", type=int, default=4097)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hellinger)

    p = sub.add_parser("dpmix", help="DP mixture posterior draws")
    p.add_argument("--data", required=True)
    _add_dp(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dpmix)

    p = sub.add_parser("estimate", help="one-step minimum Hellinger estimate")
    p.add_argument("--method", required=True, choices=["t1", "t2", "t3", "mhde", *ESTIMATOR_METHODS])
    p.add_argument("--data", required=True)
    p.add_argument("--ensemble", help="posterior draws from dpmix; sampled afresh if omitted")
    p.add_argument("--family", default="normal-loc")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, help="threshold for t3 (default log(n)/sqrt(n))")
    _add_dp(p)
    _add_grid(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fit", help="hierarchical Hellinger posterior")
    p.add_argument("--data", required=True)
    p.add_argument("--family", default="normal-loc")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--prior-mean", type=float, default=0.0)
    p.add_argument("--prior-var", type=float, default=25.0)
    p.add_argument("--scale-shape", type=float, default=3.0)
    p.add_argument("--scale-rate", type=float, default=0.5)
    _add_dp(p)
    p.add_argument("--mh-steps", type=int, default=20000, help="Metropolis steps per density draw")
    p.add_argument("--mh-thin", type=int, default=10)
    p.add_argument("--proposal-sd", type=float, default=0.5)
    _add_grid(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="simulation study table")
    p.add_argument("--config", required=True, help="JSON simulation config")
    p.add_argument("--out")
    p.add_argument("--paper-scale", action="store_true", help="1000 replications and long chains")
    p.add_argument("--threads", help=f"worker count (default ${THREADS_ENV} or all cores)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("realdata", help="parasite egg-count analysis")
    p.add_argument("--csv", help="columns id, before, after (default: built-in table)")
    p.add_argument("--out")
    p.add_argument("--density-csv", help="also write posterior density histograms of mu and sigma")
    p.add_argument("--prior-var", type=float, default=5.0)
    p.add_argument("--mh-steps", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_realdata)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except ConfigError as exc:
        print(f"hellbayes: error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, ArithmeticError) as exc:
        print(f"hellbayes: numerical failure: {exc}", file=sys.stderr)
        return 2
    except HellbayesError as exc:
        print(f"hellbayes: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
