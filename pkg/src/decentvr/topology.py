"""Graphs, gossip matrices, and the mixing operators used by the solvers.

A gossip matrix W encodes one synchronous neighbor exchange: communicating
means multiplying the stacked iterates (an m x p matrix) by W.  The solvers
never look at W directly; they go through a :class:`MixingOperator`, which
exposes the abstract actions U, U^2 and V^2 for the EXTRA and DIGing
families, optionally wrapped in Chebyshev polynomial acceleration.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Graph",
    "GossipMatrix",
    "MixingOperator",
    "build_graph",
    "metropolis_weights",
    "spectral_shift",
    "make_mixing",
    "chebyshev_apply",
    "DIGING_FLOOR",
]

# Spectral floor required by the DIGing family (V^2 = I - W^2 must stay <= I/2).
DIGING_FLOOR = math.sqrt(2.0) / 2.0

EXTRA = "extra"
DIGING = "diging"
EXTRA_CA = "extra_ca"
DIGING_CA = "diging_ca"

_KINDS = (EXTRA, DIGING, EXTRA_CA, DIGING_CA)


@dataclass(frozen=True)
class Graph:
    """Undirected connected graph on nodes 0..m-1."""

    m: int
    edges: frozenset

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("graph needs at least 2 nodes, got m=%d" % self.m)
        for i, j in self.edges:
            if i == j:
                raise ValueError("self-loop (%d,%d) not allowed" % (i, j))
            if not (0 <= i < self.m and 0 <= j < self.m):
                raise ValueError("edge (%d,%d) out of range for m=%d" % (i, j, self.m))
        if not self.is_connected():
            raise ValueError("graph not connected")

    @staticmethod
    def from_edges(m, edges):
        """Normalize edges to sorted pairs and deduplicate."""
        norm = frozenset((min(i, j), max(i, j)) for i, j in edges)
        return Graph(m, norm)

    def neighbors(self, i):
        return sorted(
            j for (a, b) in self.edges for j in ((b,) if a == i else (a,) if b == i else ())
        )

    def degrees(self):
        d = np.zeros(self.m, dtype=int)
        for i, j in self.edges:
            d[i] += 1
            d[j] += 1
        return d

    def is_connected(self):
        adj = [[] for _ in range(self.m)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.m


def build_graph(spec) -> Graph:
    """Build a graph from a spec.

    Accepted specs (dict form, or the compact string form used by the CLI):

    - ``{"kind": "ring", "m": 16}``            or ``"ring:16"``
    - ``{"kind": "grid", "rows": 3, "cols": 3}``  or ``"grid:3x3"``
    - ``{"kind": "erdos_renyi", "m": 49, "prob": 0.2, "seed": 1}``
      or ``"erdos_renyi:49:0.2:1"``
    - ``{"kind": "edge_list", "path": "graph.txt"}``  or ``"edge_list:graph.txt"``

    Erdos-Renyi graphs are resampled (bounded retries) until connected and
    are deterministic given the seed.
    """
    if isinstance(spec, str):
        spec = _parse_graph_string(spec)
    kind = spec.get("kind")
    if kind == "ring":
        return _ring(int(spec["m"]))
    if kind == "grid":
        return _grid(int(spec["rows"]), int(spec["cols"]))
    if kind == "erdos_renyi":
        return _erdos_renyi(int(spec["m"]), float(spec["prob"]), int(spec.get("seed", 0)))
    if kind == "edge_list":
        return _edge_list(spec["path"])
    raise ValueError("unknown graph kind: %r" % (kind,))


def _parse_graph_string(s):
    parts = s.split(":")
    kind = parts[0]
    if kind == "ring":
        return {"kind": "ring", "m": int(parts[1])}
    if kind == "grid":
        r, c = parts[1].lower().split("x")
        return {"kind": "grid", "rows": int(r), "cols": int(c)}
    if kind in ("erdos_renyi", "er"):
        seed = int(parts[3]) if len(parts) > 3 else 0
        return {"kind": "erdos_renyi", "m": int(parts[1]), "prob": float(parts[2]), "seed": seed}
    if kind == "edge_list":
        return {"kind": "edge_list", "path": parts[1]}
    raise ValueError("unknown graph spec string: %r" % (s,))


def _ring(m):
    edges = {(i, (i + 1) % m) for i in range(m)}
    return Graph.from_edges(m, edges)


def _grid(rows, cols):
    m = rows * cols
    if m < 2:
        raise ValueError("grid %dx%d too small" % (rows, cols))
    edges = set()
    for i in range(rows):
        for j in range(cols):
            node = i * cols + j
            if j + 1 < cols:
                edges.add((node, node + 1))
            if i + 1 < rows:
                edges.add((node, node + cols))
    return Graph.from_edges(m, edges)


def _erdos_renyi(m, prob, seed, max_retries=200):
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        mask = rng.random((m, m)) < prob
        edges = {(i, j) for i in range(m) for j in range(i + 1, m) if mask[i, j]}
        try:
            return Graph.from_edges(m, edges)
        except ValueError:
            continue
    raise ValueError(
        "could not sample a connected erdos_renyi(%d, %g) graph in %d tries"
        % (m, prob, max_retries)
    )


def _edge_list(path):
    edges = set()
    max_node = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError("%s:%d: expected 'i j', got %r" % (path, lineno, line))
            i, j = int(parts[0]), int(parts[1])
            edges.add((i, j))
            max_node = max(max_node, i, j)
    if not edges:
        raise ValueError("%s: no edges found" % path)
    return Graph.from_edges(max_node + 1, edges)


def metropolis_weights(g: Graph) -> np.ndarray:
    """Metropolis weight matrix: M_ij = 1/max(d_i, d_j) on edges.

    The diagonal absorbs the remainder so every row sums to one; the result
    is symmetric and doubly stochastic but may have negative eigenvalues.
    """
    d = g.degrees()
    M = np.zeros((g.m, g.m))
    for i, j in g.edges:
        w = 1.0 / max(d[i], d[j])
        M[i, j] = w
        M[j, i] = w
    np.fill_diagonal(M, 1.0 - M.sum(axis=1))
    return M


@dataclass(frozen=True)
class GossipMatrix:
    """Symmetric doubly stochastic mixing matrix with cached spectrum.

    Eigenvalues lie in [omega_floor, 1]; sigma2 is the second largest one
    and kappa_c = 1/(1 - sigma2) is the network condition number.
    """

    w: np.ndarray
    eigenvalues: np.ndarray  # ascending
    sigma2: float
    lam_min_nonzero_i_minus_w: float
    omega_floor: float
    kappa_c: float

    @property
    def m(self):
        return self.w.shape[0]

    def validate(self, atol_rows=1e-12, atol_eigs=1e-10):
        W, eigs = self.w, self.eigenvalues
        if np.max(np.abs(W - W.T)) != 0.0:
            raise ValueError("gossip matrix not exactly symmetric")
        if np.max(np.abs(W.sum(axis=1) - 1.0)) > atol_rows:
            raise ValueError("gossip matrix rows do not sum to 1")
        if eigs[0] < self.omega_floor - atol_eigs or eigs[-1] > 1.0 + atol_eigs:
            raise ValueError("gossip spectrum outside [omega_floor, 1]")
        if abs(eigs[-1] - 1.0) > atol_eigs:
            raise ValueError("largest gossip eigenvalue is not 1")
        if not self.sigma2 < 1.0:
            raise ValueError("sigma2 >= 1: graph disconnected?")


def spectral_shift(M, target_floor=0.0, max_dense=2048) -> GossipMatrix:
    """Shift a doubly stochastic M so its spectrum is inside [target_floor, 1].

    First the smallest (negative) eigenvalue is shifted out,
    W0 = (M - lam_min I) / (1 - lam_min), then W = f I + (1-f) W0 raises the
    floor to f = ``target_floor``.  An M that already satisfies the floor is
    returned unchanged.  The spectrum is obtained by one dense symmetric
    eigendecomposition, so m is capped at ``max_dense``.
    """
    M = np.asarray(M, dtype=float)
    m = M.shape[0]
    if m > max_dense:
        raise ValueError(
            "m=%d exceeds the dense eigensolve cap %d; use an iterative mode or raise max_dense"
            % (m, max_dense)
        )
    if not (0.0 <= target_floor < 1.0):
        raise ValueError("target_floor must be in [0, 1)")
    lam_min = float(np.linalg.eigvalsh(M)[0])
    W = M
    if lam_min < 0.0:
        W = (M - lam_min * np.eye(m)) / (1.0 - lam_min)
        lam_min = 0.0
    if lam_min < target_floor:
        W = target_floor * np.eye(m) + (1.0 - target_floor) * W
    W = 0.5 * (W + W.T)  # keep exact symmetry after the affine maps
    eigs = np.linalg.eigvalsh(W)
    sigma2 = float(eigs[-2])
    gm = GossipMatrix(
        w=W,
        eigenvalues=eigs,
        sigma2=sigma2,
        lam_min_nonzero_i_minus_w=float(1.0 - sigma2),
        omega_floor=target_floor,
        kappa_c=float(1.0 / (1.0 - sigma2)),
    )
    gm.validate()
    return gm


def chebyshev_apply(L_action, lambda1, lambda_nm1, x, t=None):
    """Apply the Chebyshev gossip polynomial P_t(c3 L) to ``x``.

    ``L_action`` must be the action of a symmetric PSD matrix whose kernel is
    span(1); ``lambda1`` and ``lambda_nm1`` are its largest and smallest
    nonzero eigenvalues.  P_t maps the nonzero spectrum into [0.9, 1.1] when
    t = ceil(3/sqrt(gamma)) with gamma = lambda_nm1/lambda1 (the default t),
    and keeps the kernel fixed.  Exactly ``t`` applications of ``L_action``
    are performed, i.e. t communication rounds.
    """
    if lambda_nm1 <= 0.0:
        raise ValueError("smallest nonzero eigenvalue must be positive (disconnected graph?)")
    gamma = lambda_nm1 / lambda1
    if t is None:
        t = chebyshev_degree(gamma)
    # gamma == 1 collapses c2 to infinity; nudge it so the recurrence stays
    # finite (the output is unaffected at working precision).
    gamma = min(gamma, 1.0 - 1e-12)
    c2 = (1.0 + gamma) / (1.0 - gamma)
    c3 = 2.0 / (lambda1 + lambda_nm1)

    a_prev, a_cur = 1.0, c2
    z_prev = x
    z_cur = c2 * (x - c3 * L_action(x))
    for _ in range(t - 1):
        a_prev, a_cur = a_cur, 2.0 * c2 * a_cur - a_prev
        z_next = 2.0 * c2 * (z_cur - c3 * L_action(z_cur)) - z_prev
        z_prev, z_cur = z_cur, z_next
    return x - z_cur / a_cur


def chebyshev_degree(gamma):
    """Polynomial degree t = ceil(3/sqrt(gamma)) used for acceleration."""
    return max(1, int(math.ceil(3.0 / math.sqrt(gamma))))


@dataclass
class MixingOperator:
    """The (U, V) operator pair backing one solver family.

    kind      one of extra | diging | extra_ca | diging_ca
    kappa     spectral constant: 2 kappa_c (extra), kappa_c^2 (diging),
              3 (extra_ca), 20 (diging_ca)
    rounds_per_application
              communication rounds charged per operator application
              (1, or the Chebyshev degree t for the _ca kinds)
    """

    kind: str
    base: GossipMatrix
    t: int
    c1: float
    c2: float
    c3: float
    kappa: float
    rounds_per_application: int
    _lams: tuple = field(default=(0.0, 0.0), repr=False)

    # -- constructors ------------------------------------------------------

    @property
    def m(self):
        return self.base.m

    @property
    def is_extra_family(self):
        return self.kind in (EXTRA, EXTRA_CA)

    # -- raw building blocks ----------------------------------------------

    def _i_minus_w(self, x):
        return x - self.base.w @ x

    def _cheb_u(self, x):
        """Chebyshev-compressed U-action for the diging_ca kind."""
        lam1, lam_nm1 = self._lams
        p = chebyshev_apply(self._i_minus_w, lam1, lam_nm1, x, t=self.t)
        return ((2.0 - math.sqrt(2.0)) / 2.2) * p

    def _cheb_q(self, x):
        """Chebyshev-compressed U^2 = V^2 action for the extra_ca kind."""
        lam1, lam_nm1 = self._lams
        p = chebyshev_apply(lambda v: 0.5 * self._i_minus_w(v), lam1, lam_nm1, x, t=self.t)
        return p / 2.2

    # -- abstract actions used by the solvers ------------------------------

    def apply_U(self, x):
        """U-action; only meaningful for the DIGing family."""
        if self.kind == DIGING:
            return self._i_minus_w(x)
        if self.kind == DIGING_CA:
            return self._cheb_u(x)
        raise ValueError("apply_U is not available for the EXTRA family (matrix square root)")

    def apply_Usq(self, x):
        if self.kind == EXTRA:
            return 0.5 * self._i_minus_w(x)
        if self.kind == EXTRA_CA:
            return self._cheb_q(x)
        return self.apply_U(self.apply_U(x))

    def apply_Vsq(self, x):
        if self.is_extra_family:
            return self.apply_Usq(x)
        # V^2 = I - W_eff^2 = 2U - U^2 with W_eff = I - U.
        u = self.apply_U(x)
        return 2.0 * u - self.apply_U(u)

    def apply_W_eff(self, x):
        """Effective gossip step W_eff = I - U for the DIGing family."""
        if self.kind == DIGING:
            return self.base.w @ x
        if self.kind == DIGING_CA:
            return x - self._cheb_u(x)
        raise ValueError("apply_W_eff is only defined for the DIGing family")


def make_mixing(kind, W: GossipMatrix) -> MixingOperator:
    """Construct the mixing operator of the requested kind on top of W.

    EXTRA uses U^2 = V^2 = (I-W)/2 and needs no spectral floor; DIGing uses
    U = I-W, V^2 = I-W^2 and requires W >= sqrt(2)/2 I (re-shift W if not).
    The _ca kinds wrap the same constructions in a degree-t Chebyshev
    polynomial, which compresses the nonzero spectrum into [0.9, 1.1] and
    replaces kappa by a small constant.
    """
    if kind not in _KINDS:
        raise ValueError("unknown mixing kind %r (expected one of %s)" % (kind, _KINDS))
    if kind == DIGING and W.omega_floor < DIGING_FLOOR - 1e-12:
        raise ValueError(
            "spectral floor violated for diging: omega_floor=%.6f < sqrt(2)/2; re-shift W"
            % W.omega_floor
        )

    # Base operator L whose spectrum drives the Chebyshev coefficients.
    eigs = W.eigenvalues
    lam1_iw = float(1.0 - eigs[0])        # largest eigenvalue of I - W
    lam_nm1_iw = float(1.0 - eigs[-2])    # smallest nonzero eigenvalue of I - W
    if kind in (EXTRA, EXTRA_CA):
        lam1, lam_nm1 = 0.5 * lam1_iw, 0.5 * lam_nm1_iw
    else:
        lam1, lam_nm1 = lam1_iw, lam_nm1_iw

    gamma = lam_nm1 / lam1
    if kind == EXTRA:
        t, kappa, rounds = 0, 2.0 * W.kappa_c, 1
        c1 = c2 = c3 = 0.0
    elif kind == DIGING:
        t, kappa, rounds = 0, W.kappa_c**2, 1
        c1 = c2 = c3 = 0.0
    else:
        t = chebyshev_degree(gamma)
        kappa = 3.0 if kind == EXTRA_CA else 20.0
        rounds = t
        g = min(gamma, 1.0 - 1e-12)
        c1 = (1.0 - math.sqrt(g)) / (1.0 + math.sqrt(g))
        c2 = (1.0 + g) / (1.0 - g)
        c3 = 2.0 / (lam1 + lam_nm1)

    return MixingOperator(
        kind=kind,
        base=W,
        t=t,
        c1=c1,
        c2=c2,
        c3=c3,
        kappa=kappa,
        rounds_per_application=rounds,
        _lams=(lam1, lam_nm1),
    )


def materialize(action, m):
    """Dense matrix of a linear action on R^m (test/diagnostic helper)."""
    return action(np.eye(m))
