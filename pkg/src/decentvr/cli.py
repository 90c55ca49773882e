"""Command-line interface.

Subcommands:
  run        run an experiment config and write the trace CSV
  spectrum   print gossip spectral diagnostics for a graph spec
  solve-ref  print the reference solution of a configured problem
  demo       built-in ridge toy, prints final metrics

Exit codes: 1 for configuration errors, 2 when a run diverges.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, objective, solvers, topology


def main(argv=None):
    parser = argparse.ArgumentParser(prog="decentvr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output directory (default: $%s or '.')"
                       % harness.OUT_ENV_VAR)
    p_run.add_argument("--seed", type=int, default=None, help="override the master seed")

    p_spec = sub.add_parser("spectrum", help="gossip spectral diagnostics")
    p_spec.add_argument("--graph", required=True, help="e.g. ring:16, grid:3x3, erdos_renyi:49:0.2:1")
    p_spec.add_argument("--floor", type=float, default=0.0, help="spectral floor (0 for EXTRA, %.4f for DIGing)"
                        % topology.DIGING_FLOOR)

    p_ref = sub.add_parser("solve-ref", help="print f* and the gradient norm at x*")
    p_ref.add_argument("--config", required=True)

    sub.add_parser("demo", help="run the built-in ridge toy")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "spectrum":
            return _cmd_spectrum(args)
        if args.command == "solve-ref":
            return _cmd_solve_ref(args)
        return _cmd_demo()
    except harness.ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 1
    except harness.ExperimentDiverged as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


def _out_dir(arg):
    out = arg or os.environ.get(harness.OUT_ENV_VAR) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_run(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(args.out if args.out is not None else cfg.out)
    path = os.path.join(out, "traces.csv")
    try:
        results = harness.run_experiment(cfg)
    except harness.ExperimentDiverged as exc:
        harness.write_csv(exc.results, path)
        raise
    harness.write_csv(results, path)
    for name, res in results.items():
        last = res[-1]
        print(
            "%s: iters=%d rounds=%d evals/node=%.6g subopt=%.3e msd=%.3e"
            % (name, last.iter, last.cum_rounds, last.cum_evals_per_node,
               last.subopt, last.mean_sq_dist)
        )
    print("wrote %s" % path)
    return 0


def _cmd_spectrum(args):
    graph = topology.build_graph(args.graph)
    W = topology.spectral_shift(topology.metropolis_weights(graph), args.floor)
    gamma = (1.0 - W.sigma2) / (1.0 - W.eigenvalues[0])
    t = topology.chebyshev_degree(gamma)
    print("m        = %d" % graph.m)
    print("sigma2   = %.12g" % W.sigma2)
    print("kappa_c  = %.12g" % W.kappa_c)
    print("cheb t   = %d" % t)
    return 0


def _cmd_solve_ref(args):
    cfg = harness.load_config(args.config)
    problem = harness.build_problem_from_spec(cfg.problem)
    x_star, f_star = objective.reference_solution(problem, tol=cfg.ref_tol)
    grad_norm = float(np.linalg.norm(objective.global_grad(problem, x_star)))
    print("f*           = %.17g" % f_star)
    print("||grad F(x*)|| = %.6e" % grad_norm)
    return 0


DEMO_TOL = 1e-9


def _cmd_demo():
    cfg = harness.ExperimentConfig(
        problem={"family": "ridge", "m": 5, "n": 20, "p": 5, "mu": 0.05, "seed": 3},
        graph={"kind": "ring", "m": 5},
        variants=[solvers.VR_EXTRA, solvers.ACC_VR_EXTRA],
        stop={"metric": "mean_sq_dist", "target": 1e-11, "max_iters": 200_000},
        seed=42,
    )
    results = harness.run_experiment(cfg)
    ok = True
    for name, res in results.items():
        last = res[-1]
        print(
            "%s: iters=%d rounds=%d evals/node=%g subopt=%.3e msd=%.3e consensus=%.3e"
            % (name, last.iter, last.cum_rounds, last.cum_evals_per_node,
               last.subopt, last.mean_sq_dist, last.consensus)
        )
        ok = ok and last.mean_sq_dist <= DEMO_TOL
    print("demo %s (target mean_sq_dist <= %g)" % ("ok" if ok else "FAILED", DEMO_TOL))
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
