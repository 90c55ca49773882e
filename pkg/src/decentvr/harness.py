"""Experiment driver: config parsing, the simulation loop, metrics, CSV.

Everything is deterministic given the master seed; running the same config
twice produces byte-identical CSV output, and serial vs node-parallel
execution produce identical traces (each node owns its RNG stream and all
cross-node reductions use a fixed order).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import objective, solvers, topology

__all__ = [
    "ConfigError",
    "ExperimentDiverged",
    "ExperimentConfig",
    "TraceRow",
    "VariantResult",
    "load_config",
    "parse_variant",
    "build_problem_from_spec",
    "mixing_for_variant",
    "run_experiment",
    "write_csv",
    "CSV_HEADER",
]

CSV_HEADER = "variant,iter,cum_rounds,cum_evals_per_node,subopt,mean_sq_dist,consensus"

DIVERGENCE_FACTOR = 1e6
OUT_ENV_VAR = "DECENTVR_OUT"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the bad key."""


class ExperimentDiverged(RuntimeError):
    def __init__(self, variant, results):
        super().__init__("variant %r diverged (step size outside stable range)" % variant)
        self.variant = variant
        self.results = results


@dataclass
class TraceRow:
    """Per-iteration metrics.

    ``subopt`` is sum_i f_i(xbar) - f* at the node-average iterate,
    ``mean_sq_dist`` is ||X - X*||_F^2 / m, and ``consensus`` is
    ||X - 1 xbar^T||_F^2 / m.  Counters are cumulative and nondecreasing.
    """

    iter: int
    cum_rounds: int
    cum_evals_per_node: float
    subopt: float
    mean_sq_dist: float
    consensus: float

    def csv(self, variant):
        return "%s,%d,%d,%s,%s,%s,%s" % (
            variant,
            self.iter,
            self.cum_rounds,
            _fmt(self.cum_evals_per_node),
            _fmt(self.subopt),
            _fmt(self.mean_sq_dist),
            _fmt(self.consensus),
        )


def _fmt(v):
    return "%.17g" % float(v)


class VariantResult:
    """Sequence of TraceRows plus run-level diagnostics."""

    def __init__(self, rows, dual_residual_max=0.0, diverged=False, params=None):
        self.rows = rows
        self.dual_residual_max = dual_residual_max
        self.diverged = diverged
        self.params = params

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]


# -- configuration -----------------------------------------------------------

_PROBLEM_KEYS = {"family", "m", "n", "p", "mu", "seed", "conditioning", "data", "partition_seed"}
_GRAPH_KEYS = {"kind", "m", "rows", "cols", "prob", "seed", "path"}
_STOP_KEYS = {"metric", "target", "max_iters"}
_THIN_KEYS = {"after", "stride"}
_OVERRIDE_KEYS = {"alpha_scale", "b", "max_iters"}
_TOP_KEYS = {
    "problem", "graph", "variants", "overrides", "stop", "seed", "out",
    "evals", "thin", "auto_pad", "workers", "ref_tol",
}


@dataclass
class ExperimentConfig:
    problem: dict
    graph: dict
    variants: list
    stop: dict
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    out: str = None
    evals: str = "raw"
    thin: dict = field(default_factory=lambda: {"after": 10_000, "stride": 10})
    auto_pad: bool = True
    workers: int = 1
    ref_tol: float = 1e-10


def _check_keys(d, allowed, where):
    for k in d:
        if k not in allowed:
            raise ConfigError("unknown key '%s.%s'" % (where, k) if where else "unknown key '%s'" % k)


def load_config(path=None, data=None) -> ExperimentConfig:
    """Load and validate a YAML experiment config; unknown keys are errors."""
    if data is None:
        if not os.path.exists(path):
            raise ConfigError("config file not found: %s" % path)
        with open(path) as fh:
            data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(data, _TOP_KEYS, "")
    for section, keys in (("problem", _PROBLEM_KEYS), ("graph", _GRAPH_KEYS),
                          ("stop", _STOP_KEYS), ("thin", _THIN_KEYS)):
        if section in data:
            if not isinstance(data[section], dict):
                raise ConfigError("'%s' must be a mapping" % section)
            _check_keys(data[section], keys, section)
    for name, ov in data.get("overrides", {}).items():
        _check_keys(ov, _OVERRIDE_KEYS, "overrides.%s" % name)
        parse_variant(name)

    for required in ("problem", "graph", "variants", "stop"):
        if required not in data:
            raise ConfigError("missing required key '%s'" % required)
    cfg = ExperimentConfig(
        problem=data["problem"],
        graph=data["graph"],
        variants=list(data["variants"]),
        stop=dict(data["stop"]),
        overrides=data.get("overrides", {}),
        seed=int(data.get("seed", 0)),
        out=data.get("out"),
        evals=data.get("evals", "raw"),
        thin=dict(data.get("thin", {"after": 10_000, "stride": 10})),
        auto_pad=bool(data.get("auto_pad", True)),
        workers=int(data.get("workers", 1)),
        ref_tol=float(data.get("ref_tol", 1e-10)),
    )
    if not cfg.variants:
        raise ConfigError("'variants' must list at least one variant")
    for v in cfg.variants:
        parse_variant(v)
    if cfg.evals not in ("raw", "paper"):
        raise ConfigError("'evals' must be 'raw' or 'paper'")
    if float(cfg.problem.get("mu", 1.0)) <= 0:
        raise ConfigError("'problem.mu' must be positive")
    if int(cfg.stop.get("max_iters", 1)) < 1:
        raise ConfigError("'stop.max_iters' must be >= 1")
    if cfg.stop.get("metric", "mean_sq_dist") not in ("mean_sq_dist", "subopt"):
        raise ConfigError("'stop.metric' must be 'mean_sq_dist' or 'subopt'")
    return cfg


def parse_variant(name):
    """Split 'vr_extra_ca' into (base variant, chebyshev flag)."""
    cheb = name.endswith("_ca")
    base = name[:-3] if cheb else name
    if base not in solvers.VARIANTS:
        raise ConfigError(
            "unknown variant '%s' (expected one of %s, optionally with _ca suffix)"
            % (name, ", ".join(solvers.VARIANTS))
        )
    return base, cheb


def build_problem_from_spec(spec) -> objective.Problem:
    family = spec.get("family", "ridge")
    mu = float(spec["mu"])
    if family == "ridge":
        return objective.make_ridge(
            int(spec["m"]), int(spec["n"]), int(spec["p"]), mu,
            int(spec.get("seed", 0)), float(spec.get("conditioning", 10.0)),
        )
    if family == "logistic":
        return objective.make_synthetic_logistic(
            int(spec["m"]), int(spec["n"]), int(spec["p"]), mu, int(spec.get("seed", 0))
        )
    if family == "libsvm":
        samples = objective.load_libsvm(spec["data"], p=spec.get("p"))
        shards = objective.partition(
            samples, int(spec["m"]), int(spec["n"]), spec.get("partition_seed")
        )
        return objective.make_logistic(shards, mu)
    raise ConfigError("unknown key 'problem.family' value %r" % family)


def mixing_for_variant(graph, variant_name):
    """Per-variant gossip matrix (EXTRA floor 0, DIGing floor sqrt(2)/2)."""
    base, cheb = parse_variant(variant_name)
    floor = solvers.gossip_floor_for(base, cheb)
    W = topology.spectral_shift(topology.metropolis_weights(graph), floor)
    return topology.make_mixing(solvers.mixing_kind_for(base, cheb), W)


# -- metrics -----------------------------------------------------------------


def consensus_residual(x):
    if (x == x[:1]).all():
        return 0.0
    d = x - x.mean(axis=0)
    return float((d * d).sum()) / x.shape[0]


def mean_sq_dist(x, x_star_stack):
    d = x - x_star_stack
    return float((d * d).sum()) / x.shape[0]


def _metrics(x, base_problem, x_star_stack, f_star):
    xbar = x.mean(axis=0)
    return (
        objective.global_value(base_problem, xbar) - f_star,
        mean_sq_dist(x, x_star_stack),
        consensus_residual(x),
    )


# -- driver ------------------------------------------------------------------


def run_experiment(config: ExperimentConfig):
    """Run every configured variant; returns {variant: VariantResult}.

    The reference solution (x*, f*) is computed once on the base problem and
    all trace metrics refer to it, also for variants that internally solve a
    zero-padded reformulation (same minimizer).  Raises ExperimentDiverged,
    carrying all results produced so far, when the guard trips.
    """
    base_problem = build_problem_from_spec(config.problem)
    graph = topology.build_graph(config.graph)
    if graph.m != base_problem.m:
        raise ConfigError("'graph' node count %d != problem m %d" % (graph.m, base_problem.m))
    x_star, f_star = objective.reference_solution(base_problem, tol=config.ref_tol)
    x_star_stack = np.tile(x_star, (base_problem.m, 1))

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    results = {}
    try:
        for vidx, name in enumerate(config.variants):
            results[name] = _run_variant(
                config, name, vidx, base_problem, graph, x_star_stack, f_star, pool
            )
            if results[name].diverged:
                raise ExperimentDiverged(name, results)
    finally:
        if pool is not None:
            pool.shutdown()
    return results


def _run_variant(config, name, vidx, base_problem, graph, x_star_stack, f_star, pool):
    base, _cheb = parse_variant(name)
    mixing = mixing_for_variant(graph, name)
    ov = config.overrides.get(name, {})
    alpha_scale = float(ov.get("alpha_scale", 1.0))
    b_override = ov.get("b")

    problem = base_problem
    params = solvers.default_params(base, problem, mixing, alpha_scale, b_override)
    if params.needs_zero_pad and config.auto_pad:
        problem = objective.zero_pad(problem, mixing.kappa)
        params = solvers.default_params(base, problem, mixing, alpha_scale, b_override)

    metric_name = config.stop.get("metric", "mean_sq_dist")
    target = float(config.stop.get("target", 0.0))
    max_iters = int(config.stop["max_iters"])
    thin_after = int(config.thin.get("after", 10_000))
    thin_stride = max(1, int(config.thin.get("stride", 10)))
    eval_scale = 0.5 if (config.evals == "paper" and solvers.is_vr(base)) else 1.0

    rows = [TraceRow(0, 0, 0.0, *_metrics(np.zeros_like(x_star_stack),
                                          base_problem, x_star_stack, f_star))]
    guard0 = max(getattr(rows[0], metric_name), 1e-12)
    if max_iters == 0:
        return VariantResult(rows, params=params)

    state = solvers.make_solver(base, problem, mixing, params, seed=(config.seed, vidx))
    diverged = False
    while True:
        sub, msd, cons = _metrics(state.x, base_problem, x_star_stack, f_star)
        row = TraceRow(state.iter, state.cum_rounds, state.max_evals() * eval_scale,
                       sub, msd, cons)
        metric_val = getattr(row, metric_name)
        recorded = state.iter <= thin_after or state.iter % thin_stride == 0
        done = metric_val <= target or state.iter >= max_iters
        if not math.isfinite(metric_val) or metric_val > DIVERGENCE_FACTOR * guard0:
            diverged = done = True
            recorded = True
        if recorded or done:
            if state.iter > rows[-1].iter:
                rows.append(row)
        if done:
            break
        try:
            solvers.step(state, problem, mixing, params, pool)
        except solvers.DivergenceError:
            diverged = True
            break
    return VariantResult(rows, state.dual_residual_max, diverged, params)


def write_csv(traces, path):
    """Long-format CSV, one row per (variant, iteration), 17 digit floats."""
    if not traces:
        raise ValueError("no traces to write")
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for name, result in traces.items():
            for row in result:
                fh.write(row.csv(name) + "\n")
    return path
