"""Finite-sum strongly convex objectives distributed over m nodes.

Each node i holds n local samples; its objective is the sample average
f_i(x) = (1/n) sum_j f_ij(x), where every component f_ij carries the full
ridge term (mu/2)||x||^2 so that it is convex and L_ij-smooth on its own.
Two families are provided: ridge regression (closed-form optimum) and
l2-regularized logistic regression.  A problem can additionally be padded
with fictitious "zero samples" that cost nothing to evaluate but carry a
synthetic smoothness constant; this keeps the variance-reduced mini-batch
size at 1 when the network condition number dominates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

__all__ = [
    "SampleSpec",
    "LocalObjective",
    "Problem",
    "EvalCounter",
    "build_problem",
    "make_ridge",
    "make_logistic",
    "make_synthetic_logistic",
    "load_libsvm",
    "partition",
    "component_grad",
    "component_value",
    "full_grad",
    "full_value",
    "global_value",
    "global_grad",
    "reference_solution",
    "zero_pad",
]

RIDGE = "ridge"
LOGISTIC = "logistic"


class EvalCounter:
    """Mutable counter of stochastic gradient evaluations."""

    __slots__ = ("count",)

    def __init__(self, count=0):
        self.count = count

    def add(self, k):
        self.count += k

    def __repr__(self):
        return "EvalCounter(%r)" % (self.count,)


@dataclass(frozen=True)
class SampleSpec:
    """View of one sample: feature, label, and smoothness constant."""

    feature: np.ndarray
    label: float
    smoothness: float
    is_zero_sample: bool = False


@dataclass
class LocalObjective:
    """One node's finite-sum objective.

    ``features`` is (n_real, p) dense or CSR; zero samples are represented
    logically by ``zero_count`` plus one shared synthetic smoothness, never
    materialized.
    """

    features: object
    labels: np.ndarray
    family: str
    mu: float                 # per-component ridge modulus
    sample_L: np.ndarray      # per-sample smoothness, real samples only
    L_local: float            # smoothness of the local average
    Lbar_local: float         # mean per-sample smoothness (incl. zero samples)
    zero_count: int = 0
    zero_smoothness: float = 0.0

    @property
    def n_real(self):
        return self.features.shape[0]

    @property
    def n_total(self):
        return self.n_real + self.zero_count

    @property
    def p(self):
        return self.features.shape[1]

    @property
    def mu_eff(self):
        """Strong convexity of the local average (scales under padding)."""
        return self.mu * self.n_real / self.n_total

    def sample(self, j) -> SampleSpec:
        if j >= self.n_real:
            if j >= self.n_total:
                raise IndexError(j)
            return SampleSpec(np.zeros(self.p), 0.0, self.zero_smoothness, True)
        return SampleSpec(_row(self.features, j), float(self.labels[j]), float(self.sample_L[j]))

    # -- vectorized per-node kernels (used by the estimator and solvers) ----

    def loss_coeffs(self, js, x):
        """Scalar c_j with grad f_ij(x) = c_j * a_j + mu * x for real js."""
        rows = self.features[js]
        z = _matvec(rows, x)
        if self.family == RIDGE:
            return rows, z - self.labels[js]
        y = self.labels[js]
        return rows, -y * expit(-y * z)

    def grad_diffs(self, js, x, w):
        """Stacked grad f_ij(x) - grad f_ij(w) for an array of real indices."""
        rows, cx = self.loss_coeffs(js, x)
        _, cw = self.loss_coeffs(js, w)
        d = (cx - cw)[:, None] * _dense(rows)
        return d + self.mu * (x - w)[None, :]

    def full_grad(self, x):
        """(1/n_total) sum_j grad f_ij(x); zero samples contribute nothing."""
        F = self.features
        z = _matvec(F, x)
        if self.family == RIDGE:
            c = z - self.labels
        else:
            c = -self.labels * expit(-self.labels * z)
        g = _rmatvec(F, c) / self.n_total
        return g + self.mu_eff * x

    def full_value(self, x):
        F = self.features
        z = _matvec(F, x)
        if self.family == RIDGE:
            losses = 0.5 * (z - self.labels) ** 2
        else:
            losses = np.logaddexp(0.0, -self.labels * z)
        reg = 0.5 * self.mu_eff * float(x @ x)
        return float(losses.sum()) / self.n_total + reg


@dataclass
class Problem:
    """m local objectives plus the smoothness/convexity constants.

    L_f = max_i L_i, Lbar_f = max_i Lbar_i, kappa_s = Lbar_f/mu (stochastic
    condition number), kappa_b = L_f/mu (batch condition number).
    """

    nodes: list
    p: int
    family: str
    mu: float          # strong convexity of each (possibly padded) local average
    n: int             # samples per node, zero samples included
    L_f: float
    Lbar_f: float
    kappa_s: float = field(init=False)
    kappa_b: float = field(init=False)
    zero_padded: bool = False

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("strong convexity requires mu > 0")
        self.kappa_s = self.Lbar_f / self.mu
        self.kappa_b = self.L_f / self.mu

    @property
    def m(self):
        return len(self.nodes)

    def node(self, i) -> LocalObjective:
        return self.nodes[i]


def _row(F, j):
    if sp.issparse(F):
        return np.asarray(F[j].todense()).ravel()
    return np.asarray(F[j], dtype=float)


def _dense(rows):
    if sp.issparse(rows):
        return np.asarray(rows.todense())
    return rows


def _matvec(F, x):
    return np.asarray(F @ x).ravel()


def _rmatvec(F, c):
    return np.asarray(F.T @ c).ravel()


def _row_sq_norms(F):
    if sp.issparse(F):
        return np.asarray(F.multiply(F).sum(axis=1)).ravel()
    return (np.asarray(F) ** 2).sum(axis=1)


def _gram_top(F, iters=50, tol=1e-8):
    """Largest eigenvalue of F^T F (exact when dense, power iteration if sparse)."""
    n, p = F.shape
    if not sp.issparse(F):
        G = F @ F.T if n <= p else F.T @ F
        return float(np.linalg.eigvalsh(G)[-1])
    v = np.ones(p) / math.sqrt(p)
    lam = 0.0
    for _ in range(iters):
        u = _rmatvec(F, _matvec(F, v))
        nrm = np.linalg.norm(u)
        if nrm == 0.0:
            return 0.0
        v = u / nrm
        if abs(nrm - lam) <= tol * max(1.0, nrm):
            return float(nrm)
        lam = nrm
    return float(lam)


def _make_local(F, y, family, mu):
    n = F.shape[0]
    sq = _row_sq_norms(F)
    if family == RIDGE:
        sample_L = sq + mu
        L_loc = _gram_top(F) / n + mu
    elif family == LOGISTIC:
        bad = np.setdiff1d(np.unique(y), [-1.0, 1.0])
        if bad.size:
            raise ValueError("logistic labels must be +1/-1, got %s" % bad)
        sample_L = sq / 4.0 + mu
        L_loc = _gram_top(F) / (4.0 * n) + mu
    else:
        raise ValueError("unknown objective family %r" % family)
    return LocalObjective(
        features=F,
        labels=np.asarray(y, dtype=float),
        family=family,
        mu=mu,
        sample_L=sample_L,
        L_local=float(L_loc),
        Lbar_local=float(sample_L.mean()),
    )


def build_problem(shards, family, mu) -> Problem:
    """Assemble a Problem from m (features, labels) shards."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    nodes = [_make_local(F, np.asarray(y, dtype=float), family, mu) for F, y in shards]
    ps = {nd.p for nd in nodes}
    ns = {nd.n_total for nd in nodes}
    if len(ps) != 1 or len(ns) != 1:
        raise ValueError("all nodes must share the dimension and sample count")
    return Problem(
        nodes=nodes,
        p=ps.pop(),
        family=family,
        mu=mu,
        n=ns.pop(),
        L_f=max(nd.L_local for nd in nodes),
        Lbar_f=max(nd.Lbar_local for nd in nodes),
    )


def make_ridge(m, n, p, mu, seed, conditioning=10.0) -> Problem:
    """Synthetic ridge testbed with a closed-form optimum.

    Per-sample features have squared norms spread over roughly
    [1/conditioning^(1/2), conditioning^(1/2)] so the importance-sampling
    distribution is nonuniform.  Deterministic given the seed.
    """
    if min(m, n, p) < 1 or mu <= 0:
        raise ValueError("m, n, p must be positive and mu > 0")
    rng = np.random.default_rng(seed)
    shards = []
    for _ in range(m):
        g = rng.standard_normal((n, p))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        scale = conditioning ** (rng.random(n) / 2.0 - 0.25)
        F = scale[:, None] * g
        y = rng.standard_normal(n)
        shards.append((F, y))
    return build_problem(shards, RIDGE, mu)


def make_logistic(data, mu) -> Problem:
    """Regularized logistic regression from partitioned (features, labels)."""
    return build_problem(data, LOGISTIC, mu)


def make_synthetic_logistic(m, n, p, mu, seed) -> Problem:
    """Synthetic logistic problem with unit-norm features (Lbar = 1/4 + mu)."""
    rng = np.random.default_rng(seed)
    x_true = rng.standard_normal(p)
    shards = []
    for _ in range(m):
        F = rng.standard_normal((n, p))
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        margin = F @ x_true + 0.3 * rng.standard_normal(n)
        y = np.where(margin >= 0.0, 1.0, -1.0)
        shards.append((F, y))
    return build_problem(shards, LOGISTIC, mu)


def load_libsvm(path, p=None):
    """Parse a libsvm text file ("label idx:val ...", 1-based indices).

    Returns (features, labels) with features as a CSR matrix of width p
    (defaults to the largest index seen).
    """
    labels, rows, cols, vals = [], [], [], []
    max_idx = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
                for tok in parts[1:]:
                    idx, val = tok.split(":")
                    idx = int(idx)
                    if idx < 1:
                        raise ValueError("index must be >= 1")
                    rows.append(len(labels) - 1)
                    cols.append(idx - 1)
                    vals.append(float(val))
                    max_idx = max(max_idx, idx)
            except (ValueError, IndexError) as exc:
                raise ValueError("%s:%d: malformed libsvm line: %s" % (path, lineno, exc)) from exc
    if not labels:
        raise ValueError("%s: empty libsvm file" % path)
    if p is None:
        p = max_idx
    elif p < max_idx:
        raise ValueError("p override %d smaller than largest index %d" % (p, max_idx))
    X = sp.csr_matrix(
        (np.array(vals), (np.array(rows, dtype=int), np.array(cols, dtype=int))),
        shape=(len(labels), p),
    )
    return X, np.array(labels)


def partition(samples, m, n, seed=None):
    """Deal the first m*n samples round-robin into m shards of n.

    ``samples`` is a (features, labels) pair; the shuffle is deterministic
    given the seed (seed=None keeps the original order).
    """
    X, y = samples
    total = X.shape[0]
    if total < m * n:
        raise ValueError("need at least %d samples, have %d" % (m * n, total))
    order = np.arange(total)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(total)
    order = order[: m * n]
    return [(X[order[i::m]], np.asarray(y)[order[i::m]]) for i in range(m)]


# -- pointwise oracles ------------------------------------------------------


def component_grad(problem, i, j, x, counter=None):
    """grad f_ij(x); zero samples return 0 and do not touch the counter."""
    nd = problem.node(i)
    if j >= nd.n_real:
        if j >= nd.n_total:
            raise IndexError(j)
        return np.zeros(nd.p)
    rows, c = nd.loss_coeffs(np.array([j]), x)
    if counter is not None:
        counter.add(1)
    return float(c[0]) * _row(nd.features, j) + nd.mu * x


def component_value(problem, i, j, x):
    nd = problem.node(i)
    if j >= nd.n_real:
        return 0.0
    a = _row(nd.features, j)
    z = float(a @ x)
    if nd.family == RIDGE:
        loss = 0.5 * (z - nd.labels[j]) ** 2
    else:
        loss = float(np.logaddexp(0.0, -nd.labels[j] * z))
    return loss + 0.5 * nd.mu * float(x @ x)


def full_grad(problem, i, x, counter=None):
    """Local average gradient; costs n_real evaluations."""
    nd = problem.node(i)
    if counter is not None:
        counter.add(nd.n_real)
    return nd.full_grad(x)


def full_value(problem, i, x):
    return problem.node(i).full_value(x)


def global_value(problem, x):
    return sum(nd.full_value(x) for nd in problem.nodes)


def global_grad(problem, x):
    g = np.zeros(problem.p)
    for nd in problem.nodes:
        g += nd.full_grad(x)
    return g


def reference_solution(problem, tol=1e-10, max_iters=500_000):
    """High-precision minimizer of sum_i f_i and its value.

    Ridge solves the regularized normal equations exactly; logistic runs
    deterministic accelerated full-batch gradient descent until
    ||grad F(x)|| <= tol.
    """
    if problem.family == RIDGE:
        H = np.zeros((problem.p, problem.p))
        rhs = np.zeros(problem.p)
        for nd in problem.nodes:
            F = _dense(nd.features)
            H += F.T @ F / nd.n_total
            H += nd.mu_eff * np.eye(problem.p)
            rhs += F.T @ nd.labels / nd.n_total
        x_star = np.linalg.solve(H, rhs)
        return x_star, global_value(problem, x_star)

    L = sum(nd.L_local for nd in problem.nodes)
    mu = sum(nd.mu_eff for nd in problem.nodes)
    q = mu / L
    beta = (1.0 - math.sqrt(q)) / (1.0 + math.sqrt(q))
    x = np.zeros(problem.p)
    v = x.copy()
    for _ in range(max_iters):
        gx = global_grad(problem, x)
        if np.linalg.norm(gx) <= tol:
            return x, global_value(problem, x)
        x_new = v - global_grad(problem, v) / L
        v = x_new + beta * (x_new - x)
        x = x_new
    raise RuntimeError(
        "reference solver did not reach ||grad||<=%.3g in %d iterations (got %.3g)"
        % (tol, max_iters, float(np.linalg.norm(global_grad(problem, x))))
    )


def zero_pad(problem, kappa) -> Problem:
    """Pad every node with zero samples so the mini-batch formula gives b=1.

    Requires kappa > max(kappa_s, n).  The padded problem has n' = ceil(kappa)
    samples per node; the fictitious samples carry the synthetic smoothness
    (n mu n' - n Lbar_i) / (n' - n), which makes every node's mean smoothness
    exactly n*mu while leaving the minimizer unchanged.
    """
    if problem.zero_padded:
        raise ValueError("problem is already zero-padded")
    if kappa <= max(problem.kappa_s, problem.n):
        raise ValueError(
            "padding not applicable: kappa=%.3g <= max(kappa_s=%.3g, n=%d)"
            % (kappa, problem.kappa_s, problem.n)
        )
    n = problem.n
    n_new = int(math.ceil(kappa))
    mu = problem.mu
    nodes = []
    for nd in problem.nodes:
        lz = (n * mu * n_new - n * nd.Lbar_local) / (n_new - n)
        zero_count = n_new - n
        lbar = (nd.sample_L.sum() + zero_count * lz) / n_new
        nodes.append(
            LocalObjective(
                features=nd.features,
                labels=nd.labels,
                family=nd.family,
                mu=nd.mu,
                sample_L=nd.sample_L,
                L_local=nd.L_local * n / n_new,
                Lbar_local=float(lbar),
                zero_count=zero_count,
                zero_smoothness=float(lz),
            )
        )
    return Problem(
        nodes=nodes,
        p=problem.p,
        family=problem.family,
        mu=mu * n / n_new,
        n=n_new,
        L_f=max(nd.L_local for nd in nodes),
        Lbar_f=max(nd.Lbar_local for nd in nodes),
        zero_padded=True,
    )
