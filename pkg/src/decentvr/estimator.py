"""Mini-batch variance-reduced gradient estimation (loopless SVRG style).

Each node keeps a snapshot point w with its cached full gradient and draws
mini-batches with importance sampling proportional to the per-sample
smoothness constants.  The estimator

    (1/b) sum_{j in S} (1/(n p_j)) (grad f_ij(x) - grad f_ij(w)) + grad f_i(w)

is unbiased for grad f_i(x), and the snapshot is refreshed with probability
b/n after every iteration.  Evaluation accounting is exact: every real draw
costs 2 evaluations (fresh point and snapshot point), a snapshot refresh
costs n_real, and draws landing in the zero-sample block cost nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import EvalCounter, LocalObjective

__all__ = [
    "ZERO_SAMPLE",
    "SamplingDistribution",
    "VRNodeState",
    "build_distribution",
    "sample_batch",
    "vr_gradient",
    "snapshot_update",
    "make_node_state",
    "node_rng",
]

# Sentinel index returned when a draw lands in the zero-sample block.
ZERO_SAMPLE = -1


@dataclass(frozen=True)
class SamplingDistribution:
    """Importance-sampling distribution p_j = L_j / (n Lbar) over one node."""

    probs: np.ndarray        # real samples only
    cumulative: np.ndarray   # prefix sums of probs
    zero_block_prob: float
    weights: np.ndarray      # 1 / (n p_j), the estimator reweighting


@dataclass
class VRNodeState:
    """Snapshot point, cached full gradient, eval counter, and RNG stream."""

    w: np.ndarray
    grad_at_w: np.ndarray
    evals: EvalCounter
    rng: np.random.Generator


def node_rng(master_seed, node_id, stream=0):
    """Deterministic per-node stream, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(node_id, stream)))


def build_distribution(local: LocalObjective) -> SamplingDistribution:
    L = local.sample_L
    if np.any(L <= 0):
        raise ValueError("per-sample smoothness constants must be positive")
    total = local.n_total * local.Lbar_local
    probs = L / total
    zero_prob = local.zero_count * local.zero_smoothness / total
    return SamplingDistribution(
        probs=probs,
        cumulative=np.cumsum(probs),
        zero_block_prob=float(zero_prob),
        weights=1.0 / (local.n_total * probs),
    )


def sample_batch(dist: SamplingDistribution, b, rng):
    """b i.i.d. inverse-CDF draws; ZERO_SAMPLE marks zero-block hits."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    u = np.asarray(rng.random(b))
    idx = np.searchsorted(dist.cumulative, u, side="right")
    real_total = dist.cumulative[-1]
    if dist.zero_block_prob > 0.0:
        idx = np.where(u >= real_total, ZERO_SAMPLE, np.minimum(idx, len(dist.probs) - 1))
    else:
        idx = np.minimum(idx, len(dist.probs) - 1)
    return idx.astype(int)


def vr_gradient(state: VRNodeState, local: LocalObjective, dist, point, batch):
    """Variance-reduced estimate of grad f_i at ``point``.

    Costs 2 evaluations per real draw (fresh point and snapshot point);
    zero-block draws contribute a zero correction for free.
    """
    real = np.asarray(batch)
    real = real[real != ZERO_SAMPLE]
    est = state.grad_at_w.copy()
    if real.size:
        diffs = local.grad_diffs(real, point, state.w)
        est += dist.weights[real] @ diffs / len(batch)
        state.evals.add(2 * real.size)
    return est


def snapshot_update(state: VRNodeState, local: LocalObjective, x_new, prob, rng):
    """Refresh the snapshot with the given probability; returns True if so.

    A refresh recomputes the cached full gradient, which costs n_real
    evaluations.  Each node flips its own independent coin.
    """
    if not (0.0 < prob <= 1.0):
        raise ValueError("snapshot probability must be in (0, 1]")
    if rng.random() < prob:
        state.w = np.array(x_new, dtype=float, copy=True)
        state.grad_at_w = local.full_grad(state.w)
        state.evals.add(local.n_real)
        return True
    return False


def make_node_state(local: LocalObjective, x0, rng) -> VRNodeState:
    """Initial snapshot at x0; computing its full gradient costs n_real."""
    counter = EvalCounter()
    w = np.array(x0, dtype=float, copy=True)
    grad = local.full_grad(w)
    counter.add(local.n_real)
    return VRNodeState(w=w, grad_at_w=grad, evals=counter, rng=rng)
