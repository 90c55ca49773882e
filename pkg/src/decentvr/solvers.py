"""The decentralized solver family and its per-iteration step functions.

Six variants on m x p stacked iterates: full-batch EXTRA and DIGing, their
variance-reduced forms (VR-EXTRA, VR-DIGing), and the Nesterov-accelerated
variance-reduced forms (Acc-VR-EXTRA, Acc-VR-DIGing).  Any variant can run
on a Chebyshev-accelerated mixing operator, which multiplies the per-round
cost by the polynomial degree t but replaces the network constant kappa by
a small fixed one.

A step is one synchronous super-round: per-node gradient work (parallel
safe, each node owns its RNG stream and counters), then the gossip
exchange.  Serial and node-parallel execution give bit-identical traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    VRNodeState,
    build_distribution,
    make_node_state,
    node_rng,
    sample_batch,
    snapshot_update,
    vr_gradient,
)
from .topology import DIGING_FLOOR, EXTRA_CA, DIGING_CA, MixingOperator

__all__ = [
    "EXTRA",
    "DIGING",
    "VR_EXTRA",
    "VR_DIGING",
    "ACC_VR_EXTRA",
    "ACC_VR_DIGING",
    "VARIANTS",
    "SolverParams",
    "SolverState",
    "DivergenceError",
    "default_params",
    "make_solver",
    "step",
    "batch_step",
    "vr_step",
    "acc_step",
    "mixing_kind_for",
    "gossip_floor_for",
    "rounds_per_iteration",
]

EXTRA = "extra"
DIGING = "diging"
VR_EXTRA = "vr_extra"
VR_DIGING = "vr_diging"
ACC_VR_EXTRA = "acc_vr_extra"
ACC_VR_DIGING = "acc_vr_diging"

VARIANTS = (EXTRA, DIGING, VR_EXTRA, VR_DIGING, ACC_VR_EXTRA, ACC_VR_DIGING)


class DivergenceError(RuntimeError):
    """Raised when iterates blow up (step size outside the stable range)."""


def is_extra_family(variant):
    return variant in (EXTRA, VR_EXTRA, ACC_VR_EXTRA)


def is_vr(variant):
    return variant not in (EXTRA, DIGING)


def is_acc(variant):
    return variant in (ACC_VR_EXTRA, ACC_VR_DIGING)


def mixing_kind_for(variant, chebyshev=False):
    if is_extra_family(variant):
        return EXTRA_CA if chebyshev else "extra"
    return DIGING_CA if chebyshev else "diging"


def gossip_floor_for(variant, chebyshev=False):
    """Spectral floor the gossip matrix must be shifted to for this variant."""
    if is_extra_family(variant) or chebyshev:
        return 0.0 if is_extra_family(variant) else DIGING_FLOOR
    return DIGING_FLOOR


def rounds_per_iteration(variant, mixing: MixingOperator):
    """Communication rounds one iteration costs.

    One round lets every node send the O(1) vectors needed for the exchange.
    DIGing batches s and x in a single round; Acc-VR-EXTRA caches W z across
    iterations (U^2 = V^2); Acc-VR-DIGing has a data dependency between its
    two gossip applications, hence 2.  Chebyshev kinds multiply by t.
    """
    base = 2 if variant == ACC_VR_DIGING else 1
    return base * mixing.rounds_per_application


@dataclass
class SolverParams:
    """Step size, mini-batch size, and acceleration weights for one variant."""

    variant: str
    alpha: float
    b: int = 1
    theta1: float = 0.0
    theta2: float = 0.0
    kappa: float = 0.0
    snapshot_prob: float = 1.0
    needs_zero_pad: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError("unknown variant %r" % self.variant)
        if self.alpha <= 0 or self.b < 1:
            raise ValueError("need alpha > 0 and b >= 1")
        if is_acc(self.variant):
            if not (0 < self.theta1 <= 0.5 and 0 < self.theta2 <= 0.5):
                raise ValueError("acceleration weights must lie in (0, 1/2]")
            if self.theta1 + self.theta2 > 1.0:
                raise ValueError("theta1 + theta2 must be <= 1")
        if is_vr(self.variant) and not (0 < self.snapshot_prob <= 1):
            raise ValueError("snapshot probability must be in (0, 1]")
        return self


def default_params(variant, problem, mixing: MixingOperator, alpha_scale=1.0, b=None,
                   auto_regime=True) -> SolverParams:
    """Theory-default parameters.

    Non-accelerated: alpha = 1/(28 max(L_f, kappa mu)) and mini-batch
    b = ceil(max(Lbar_f, n mu) / max(L_f, kappa mu)); if the network constant
    dominates (kappa > max(kappa_s, n)) the returned params flag that
    zero-sample padding should be applied first.  Accelerated:
    alpha = 1/(10 L_f), theta1 = sqrt(kappa mu / L_f)/2, theta2 =
    Lbar_f/(2 L_f b), b = ceil(sqrt(n max(Lbar_f, n mu) / (kappa L_f)));
    when kappa exceeds max(n kb/ks, n^2 kb/ks^2) the mini-batch falls back
    to Lbar_f/L_f (communication cost unchanged).  ``alpha_scale`` scales
    the step size (experiments often run several times the proven constant).
    """
    if problem.mu <= 0:
        raise ValueError("strong convexity requires mu > 0")
    L_f, Lbar_f, mu, n = problem.L_f, problem.Lbar_f, problem.mu, problem.n
    kappa = mixing.kappa
    if problem.zero_padded:
        # Padding chose n' ~ kappa; evaluating the formulas at kappa = n'
        # (only looser in the spectral bound) makes the b = 1 identity exact.
        kappa = max(kappa, float(n))

    if not is_acc(variant):
        denom = max(L_f, kappa * mu)
        alpha = alpha_scale / (28.0 * denom)
        b_raw = max(Lbar_f, n * mu) / denom
        b_val = b if b is not None else max(1, math.ceil(b_raw - 1e-12))
        needs_pad = (
            auto_regime
            and is_vr(variant)
            and not problem.zero_padded
            and kappa > max(problem.kappa_s, n)
        )
        params = SolverParams(
            variant=variant,
            alpha=alpha,
            b=b_val,
            kappa=kappa,
            snapshot_prob=min(1.0, b_val / n),
            needs_zero_pad=needs_pad,
        )
        return params.validate()

    ks, kb = problem.kappa_s, problem.kappa_b
    large_kappa = kappa > max(n * kb / ks, n**2 * kb / ks**2)
    if b is not None:
        b_val = b
    elif auto_regime and large_kappa:
        b_val = max(1, math.ceil(Lbar_f / L_f - 1e-12))
    else:
        b_val = max(1, math.ceil(math.sqrt(n * max(Lbar_f, n * mu) / (kappa * L_f)) - 1e-12))
    params = SolverParams(
        variant=variant,
        alpha=alpha_scale / (10.0 * L_f),
        b=b_val,
        theta1=min(0.5, 0.5 * math.sqrt(kappa * mu / L_f)),
        theta2=min(0.5, Lbar_f / (2.0 * L_f * b_val)),
        kappa=kappa,
        snapshot_prob=min(1.0, b_val / n),
    )
    return params.validate()


@dataclass
class SolverState:
    """Per-variant iterate bundle (m x p stacks) plus counters and caches.

    The dual stack ``lam`` holds lambda for the DIGing family and
    lambda_tilde = U lambda for the EXTRA family; its columns stay
    orthogonal to the all-ones vector throughout.
    """

    variant: str
    x: np.ndarray
    vr: list
    dists: list
    w_stack: np.ndarray
    lam: np.ndarray
    iter: int = 0
    cum_rounds: int = 0
    rounds_per_iter: int = 1
    dual_residual_max: float = 0.0
    x_prev: np.ndarray = None
    grad_prev: np.ndarray = None
    s: np.ndarray = None
    z: np.ndarray = None
    # gossip caches: one fresh operator application per charged exchange
    qx: np.ndarray = None        # U^2 x (extra family)
    qx_prev: np.ndarray = None
    wx: np.ndarray = None        # W_eff x (diging family)
    qz: np.ndarray = None        # U^2 z (acc extra)
    uz: np.ndarray = None        # U z (acc diging)

    @property
    def m(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    def max_evals(self):
        return max(nd.evals.count for nd in self.vr)

    def _track_dual(self):
        col = np.abs(self.lam.sum(axis=0)).max() if self.lam.size else 0.0
        scale = max(1.0, float(np.linalg.norm(self.lam)))
        self.dual_residual_max = max(self.dual_residual_max, float(col) / scale)

    def check_shapes(self):
        for arr in (self.x, self.lam, self.w_stack):
            if arr.shape != (self.m, self.p):
                raise AssertionError("state stacks disagree on shape")


def make_solver(variant, problem, mixing, params: SolverParams, seed, start=None) -> SolverState:
    """Initialize a solver: x0 = w0 = start (default 0), lambda0 = 0.

    The non-accelerated family performs its bootstrap step here (one
    exchange), producing x1 from an exact gradient at x0 (the estimator
    correction vanishes because w0 = x0) and flipping the first snapshot
    coin; DIGing starts its tracker at s1 = grad f(w0).  The accelerated
    family starts all iterates at x0 and needs no bootstrap.  Two
    constructions with the same seed are identical.
    """
    m, p = problem.m, problem.p
    if start is None:
        x0 = np.zeros((m, p))
    else:
        x0 = np.array(start, dtype=float, copy=True)
        if x0.shape != (m, p):
            raise ValueError("start must have shape (m, p)")
    vr = [
        make_node_state(problem.node(i), x0[i], node_rng(seed, i))
        for i in range(m)
    ]
    dists = [build_distribution(problem.node(i)) for i in range(m)]
    w_stack = x0.copy()
    grad0 = np.stack([nd.grad_at_w for nd in vr])
    rpi = rounds_per_iteration(variant, mixing)
    state = SolverState(
        variant=variant,
        x=x0,
        vr=vr,
        dists=dists,
        w_stack=w_stack,
        lam=np.zeros((m, p)),
        rounds_per_iter=rpi,
    )

    if is_acc(variant):
        state.z = x0.copy()
        if is_extra_family(variant):
            state.qz = mixing.apply_Usq(x0)
        else:
            state.uz = mixing.apply_U(x0)
        return state

    alpha = params.alpha
    if is_extra_family(variant):
        qx0 = mixing.apply_Usq(x0)
        x1 = x0 - alpha * grad0 - qx0
        qx1 = mixing.apply_Usq(x1)
        state.x, state.x_prev = x1, x0
        state.qx, state.qx_prev = qx1, qx0
        state.lam = qx1.copy()
    else:
        s1 = grad0.copy()
        x1 = mixing.apply_W_eff(x0) - alpha * s1
        wx1 = mixing.apply_W_eff(x1)
        state.x, state.s, state.wx = x1, s1, wx1
        state.lam = x1 - wx1
    state.grad_prev = grad0
    state.iter = 1
    state.cum_rounds = rpi
    if is_vr(variant):
        _snapshot_round(state, problem, params)
    state._track_dual()
    return state


def _estimate_stack(state, problem, params, point_stack, pool=None):
    """Stacked VR estimator; per-node kernel so threads match serial bitwise."""

    def kernel(i):
        nd = state.vr[i]
        batch = sample_batch(state.dists[i], params.b, nd.rng)
        return vr_gradient(nd, problem.node(i), state.dists[i], point_stack[i], batch)

    if pool is None:
        rows = [kernel(i) for i in range(state.m)]
    else:
        rows = list(pool.map(kernel, range(state.m)))
    return np.stack(rows)


def _full_grad_stack(state, problem, pool=None):
    def kernel(i):
        nd = problem.node(i)
        state.vr[i].evals.add(nd.n_real)
        return nd.full_grad(state.x[i])

    if pool is None:
        rows = [kernel(i) for i in range(state.m)]
    else:
        rows = list(pool.map(kernel, range(state.m)))
    return np.stack(rows)


def _snapshot_round(state, problem, params):
    for i, nd in enumerate(state.vr):
        if snapshot_update(nd, problem.node(i), state.x[i], params.snapshot_prob, nd.rng):
            state.w_stack[i] = nd.w


def batch_step(state, problem, mixing, params, pool=None):
    """One full-batch EXTRA/DIGing iteration (n evaluations per node)."""
    grad = _full_grad_stack(state, problem, pool)
    _gradient_tracking_update(state, mixing, params, grad)
    return state


def vr_step(state, problem, mixing, params, pool=None):
    """One VR-EXTRA/VR-DIGing iteration: sample, estimate, gossip, coin."""
    grad = _estimate_stack(state, problem, params, state.x, pool)
    _gradient_tracking_update(state, mixing, params, grad)
    _snapshot_round(state, problem, params)
    return state


def _gradient_tracking_update(state, mixing, params, grad):
    alpha = params.alpha
    if is_extra_family(state.variant):
        x_next = (
            2.0 * state.x
            - 2.0 * state.qx
            - (state.x_prev - state.qx_prev)
            - alpha * (grad - state.grad_prev)
        )
        qx_next = mixing.apply_Usq(x_next)
        state.lam += qx_next
        state.x_prev, state.x = state.x, x_next
        state.qx_prev, state.qx = state.qx, qx_next
    else:
        s_next = mixing.apply_W_eff(state.s) + grad - state.grad_prev
        x_next = state.wx - alpha * s_next
        wx_next = mixing.apply_W_eff(x_next)
        state.lam += x_next - wx_next
        state.x, state.s, state.wx = x_next, s_next, wx_next
    state.grad_prev = grad
    state.iter += 1
    state.cum_rounds += state.rounds_per_iter
    state._track_dual()
    if not np.isfinite(state.x).all():
        raise DivergenceError("iterates became non-finite at iteration %d" % state.iter)


def acc_step(state, problem, mixing, params, pool=None):
    """One Acc-VR iteration: interpolate, estimate at y, prox z, dual, coin."""
    th1, th2 = params.theta1, params.theta2
    mu_alpha = problem.mu * params.alpha / th1
    y = th1 * state.z + th2 * state.w_stack + (1.0 - th1 - th2) * state.x
    grad = _estimate_stack(state, problem, params, y, pool)

    if is_extra_family(state.variant):
        vsq_z = state.qz
        dual_term = state.lam
    else:
        vsq_z = 2.0 * state.uz - mixing.apply_U(state.uz)
        dual_term = mixing.apply_U(state.lam)

    z_next = (
        mu_alpha * y + state.z - (params.alpha * grad + dual_term + th1 * vsq_z) / th1
    ) / (1.0 + mu_alpha)

    if is_extra_family(state.variant):
        qz_next = mixing.apply_Usq(z_next)
        state.lam += th1 * qz_next
        state.qz = qz_next
    else:
        uz_next = mixing.apply_U(z_next)
        state.lam += th1 * uz_next
        state.uz = uz_next

    state.x = y + th1 * (z_next - state.z)
    state.z = z_next
    _snapshot_round(state, problem, params)
    state.iter += 1
    state.cum_rounds += state.rounds_per_iter
    state._track_dual()
    if not np.isfinite(state.x).all():
        raise DivergenceError("iterates became non-finite at iteration %d" % state.iter)
    return state


def step(state, problem, mixing, params, pool=None):
    """Advance one iteration, dispatching on the variant."""
    if is_acc(state.variant):
        return acc_step(state, problem, mixing, params, pool)
    if is_vr(state.variant):
        return vr_step(state, problem, mixing, params, pool)
    return batch_step(state, problem, mixing, params, pool)
