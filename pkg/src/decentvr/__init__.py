"""Variance-reduced and accelerated decentralized optimization.

Deterministic synchronous-gossip simulation of the EXTRA/DIGing gradient
tracking family, their loopless-SVRG variance-reduced forms, Nesterov
accelerated forms, and Chebyshev-accelerated gossip, for strongly convex
finite-sum problems.
"""

from . import estimator, harness, objective, solvers, topology

__all__ = ["topology", "objective", "estimator", "solvers", "harness"]
__version__ = "0.1.0"
