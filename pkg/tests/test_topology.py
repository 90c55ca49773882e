import math

import numpy as np
import pytest

from decentvr import topology as tp

RT2_HALF = math.sqrt(2.0) / 2.0


def path3_metropolis():
    return tp.metropolis_weights(tp.Graph.from_edges(3, {(0, 1), (1, 2)}))


# -- graph construction -------------------------------------------------------


def test_ring3_is_triangle():
    g = tp.build_graph("ring:3")
    assert g.m == 3
    assert g.edges == frozenset({(0, 1), (1, 2), (0, 2)})


def test_grid_2x2_adjacency():
    g = tp.build_graph({"kind": "grid", "rows": 2, "cols": 2})
    assert g.m == 4
    assert g.edges == frozenset({(0, 1), (0, 2), (1, 3), (2, 3)})


def test_erdos_renyi_deterministic_and_connected():
    g1 = tp.build_graph({"kind": "erdos_renyi", "m": 49, "prob": 0.2, "seed": 11})
    g2 = tp.build_graph("erdos_renyi:49:0.2:11")
    assert g1.edges == g2.edges
    assert g1.is_connected()
    # expected edge count 0.2 * C(49,2) = 235.2, allow a wide statistical band
    n_pairs = 49 * 48 // 2
    sd = math.sqrt(n_pairs * 0.2 * 0.8)
    assert abs(len(g1.edges) - 0.2 * n_pairs) < 5 * sd


def test_edge_list_roundtrip(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("# a comment\n0 1\n1 2  # trailing\n\n2 3\n")
    g = tp.build_graph({"kind": "edge_list", "path": str(path)})
    assert g.m == 4 and (1, 2) in g.edges


def test_edge_list_disconnected_rejected(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("0 1\n2 3\n")
    with pytest.raises(ValueError, match="not connected"):
        tp.build_graph({"kind": "edge_list", "path": str(path)})


def test_edge_list_malformed_line(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("0 1\n0 1 2\n")
    with pytest.raises(ValueError, match=":2"):
        tp.build_graph({"kind": "edge_list", "path": str(path)})


def test_self_loop_rejected():
    with pytest.raises(ValueError, match="self-loop"):
        tp.Graph.from_edges(3, {(0, 0), (0, 1), (1, 2)})


# -- metropolis weights -------------------------------------------------------


def test_metropolis_path_graph():
    M = path3_metropolis()
    expect = np.array([[0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
    assert np.array_equal(M, expect)


def test_metropolis_triangle():
    M = tp.metropolis_weights(tp.build_graph("ring:3"))
    assert np.array_equal(M, 0.5 * (np.ones((3, 3)) - np.eye(3)))


def test_metropolis_complete_graph():
    m = 6
    g = tp.Graph.from_edges(m, {(i, j) for i in range(m) for j in range(i + 1, m)})
    M = tp.metropolis_weights(g)
    off = M[~np.eye(m, dtype=bool)]
    assert np.allclose(off, 1.0 / (m - 1), atol=0)
    assert np.allclose(M.sum(axis=1), 1.0, atol=1e-15)


def test_metropolis_symmetric_stochastic_random():
    for seed in range(4):
        g = tp.build_graph({"kind": "erdos_renyi", "m": 17, "prob": 0.3, "seed": seed})
        M = tp.metropolis_weights(g)
        assert np.max(np.abs(M - M.T)) == 0.0
        assert np.max(np.abs(M.sum(axis=1) - 1.0)) < 1e-12
        for i in range(17):
            for j in range(17):
                if i != j and M[i, j] != 0.0:
                    assert (min(i, j), max(i, j)) in g.edges


# -- spectral shift -----------------------------------------------------------


def test_spectral_shift_path_graph_omega0():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    assert np.allclose(W.eigenvalues, [0.0, 2.0 / 3.0, 1.0], atol=1e-12)
    assert abs(W.sigma2 - 2.0 / 3.0) < 1e-12
    assert abs(W.kappa_c - 3.0) < 1e-11


def test_spectral_shift_psd_matrix_unchanged():
    W0 = tp.spectral_shift(path3_metropolis(), 0.0).w
    W = tp.spectral_shift(W0, 0.0)
    assert np.array_equal(W.w, W0)


def test_spectral_shift_floor_sqrt2_half():
    W = tp.spectral_shift(path3_metropolis(), RT2_HALF)
    expect = [RT2_HALF, RT2_HALF + (1 - RT2_HALF) * 2.0 / 3.0, 1.0]
    assert np.allclose(W.eigenvalues, expect, atol=1e-12)
    assert abs(W.eigenvalues[0] - RT2_HALF) < 1e-12


def test_spectral_shift_affine_spectrum_and_pattern():
    g = tp.build_graph({"kind": "erdos_renyi", "m": 21, "prob": 0.25, "seed": 5})
    M = tp.metropolis_weights(g)
    eigs_m = np.linalg.eigvalsh(M)
    lam_min = eigs_m[0]
    for floor in (0.0, 0.3, RT2_HALF):
        W = tp.spectral_shift(M, floor)
        mapped = (eigs_m - lam_min) / (1.0 - lam_min)
        mapped = floor + (1.0 - floor) * mapped
        assert np.allclose(W.eigenvalues, np.sort(mapped), atol=1e-11)
        off_diag = ~np.eye(g.m, dtype=bool)
        assert np.all((W.w != 0.0)[off_diag] <= (M != 0.0)[off_diag])


def test_spectral_shift_dense_cap():
    with pytest.raises(ValueError, match="iterative"):
        tp.spectral_shift(np.eye(10), 0.0, max_dense=5)


# -- mixing operators ---------------------------------------------------------


def test_extra_kernel_on_consensus():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    mix = tp.make_mixing("extra", W)
    x = np.tile(np.array([1.5, -2.0]), (3, 1))
    assert np.max(np.abs(mix.apply_Vsq(x))) < 1e-15


def test_diging_vsq_matches_dense():
    W = tp.spectral_shift(path3_metropolis(), RT2_HALF)
    mix = tp.make_mixing("diging", W)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    dense = (np.eye(3) - W.w @ W.w) @ x
    assert np.max(np.abs(mix.apply_Vsq(x) - dense)) < 1e-14


def test_extra_ca_coefficients_path_graph():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    mix = tp.make_mixing("extra_ca", W)
    # U^2 spectrum {0, 1/6, 1/2}: gamma = 1/3, c2 = 2, c3 = 3, t = ceil(3 sqrt 3) = 6
    assert abs(mix.c2 - 2.0) < 1e-10
    assert abs(mix.c3 - 3.0) < 1e-10
    assert mix.t == 6
    assert mix.kappa == 3.0
    assert mix.rounds_per_application == 6


def test_diging_floor_enforced():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    with pytest.raises(ValueError, match="re-shift"):
        tp.make_mixing("diging", W)


def test_extra_family_has_no_U_action():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    with pytest.raises(ValueError, match="square root"):
        tp.make_mixing("extra", W).apply_U(np.zeros((3, 1)))


# -- chebyshev ----------------------------------------------------------------


def test_chebyshev_kernel_preserved():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    L = (np.eye(3) - W.w) / 2.0
    x = np.tile(np.array([0.3, 7.0]), (3, 1))
    out = tp.chebyshev_apply(lambda v: L @ v, 0.5, 1.0 / 6.0, x, t=6)
    assert np.max(np.abs(out)) < 1e-12


def test_chebyshev_t1_is_scaled_operator():
    # P_1(c3 L) acts as c3*lambda on each eigenvector
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    L = (np.eye(3) - W.w) / 2.0
    lam1, lam_nm1 = 0.5, 1.0 / 6.0
    c3 = 2.0 / (lam1 + lam_nm1)
    eigs, vecs = np.linalg.eigh(L)
    for lam, v in zip(eigs, vecs.T):
        out = tp.chebyshev_apply(lambda u: L @ u, lam1, lam_nm1, v[:, None], t=1)
        assert np.allclose(out, c3 * lam * v[:, None], atol=1e-12)


def test_chebyshev_spectrum_in_target_band():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    L = (np.eye(3) - W.w) / 2.0
    P = tp.chebyshev_apply(lambda v: L @ v, 0.5, 1.0 / 6.0, np.eye(3), t=6)
    eigs = np.sort(np.linalg.eigvalsh(0.5 * (P + P.T)))
    assert abs(eigs[0]) < 1e-12
    assert np.all(eigs[1:] >= 0.9 - 1e-9) and np.all(eigs[1:] <= 1.1 + 1e-9)


def test_chebyshev_counts_exactly_t_applications():
    W = tp.spectral_shift(path3_metropolis(), 0.0)
    L = (np.eye(3) - W.w) / 2.0
    calls = []

    def action(v):
        calls.append(1)
        return L @ v

    for t in (1, 3, 6, 9):
        calls.clear()
        tp.chebyshev_apply(action, 0.5, 1.0 / 6.0, np.eye(3), t=t)
        assert len(calls) == t


def _scalar_cheb_poly(x, t, c2):
    """Independent oracle: P_t(x) = 1 - T_t(c2(1-x))/T_t(c2), closed-form T."""

    def cheb_T(y, t):
        if abs(y) <= 1.0:
            return math.cos(t * math.acos(y))
        s = 1.0 if y > 0 else (-1.0) ** t
        return s * math.cosh(t * math.acosh(abs(y)))

    return 1.0 - cheb_T(c2 * (1.0 - x), t) / cheb_T(c2, t)


def test_chebyshev_matches_scalar_polynomial_oracle():
    for seed, m in ((0, 8), (1, 12), (2, 16)):
        g = tp.build_graph({"kind": "erdos_renyi", "m": m, "prob": 0.4, "seed": seed})
        W = tp.spectral_shift(tp.metropolis_weights(g), 0.0)
        L = np.eye(m) - W.w
        eigs, vecs = np.linalg.eigh(L)
        lam1, lam_nm1 = eigs[-1], eigs[1]
        gamma = lam_nm1 / lam1
        c2 = (1.0 + gamma) / (1.0 - gamma)
        c3 = 2.0 / (lam1 + lam_nm1)
        for t in (1, 2, 5, 12):
            P = tp.chebyshev_apply(lambda v: L @ v, lam1, lam_nm1, np.eye(m), t=t)
            oracle = vecs @ np.diag([_scalar_cheb_poly(c3 * e, t, c2) for e in eigs]) @ vecs.T
            denom = max(1.0, np.max(np.abs(oracle)))
            assert np.max(np.abs(P - oracle)) / denom < 1e-9


def test_chebyshev_rejects_zero_spectral_gap():
    with pytest.raises(ValueError, match="disconnected"):
        tp.chebyshev_apply(lambda v: v, 1.0, 0.0, np.zeros((3, 1)))


# -- operator inequalities (spectral bounds) ----------------------------------


def _lemma1_checks(mix, kappa, tol=1e-10):
    m = mix.m
    Usq = 0.5 * (tp.materialize(mix.apply_Usq, m) + tp.materialize(mix.apply_Usq, m).T)
    Vsq = 0.5 * (tp.materialize(mix.apply_Vsq, m) + tp.materialize(mix.apply_Vsq, m).T)
    assert np.linalg.eigvalsh(Vsq - Usq).min() >= -tol
    assert np.linalg.eigvalsh(0.5 * np.eye(m) - Vsq).min() >= -tol
    eigs = np.sort(np.linalg.eigvalsh(Usq))
    assert abs(eigs[0]) < 1e-10  # kernel span(1)
    assert eigs[1] >= 1.0 / kappa - tol


GRAPHS = ["ring:5", "ring:16", "grid:3x3", "erdos_renyi:24:0.25:3", "erdos_renyi:64:0.15:9"]


@pytest.mark.parametrize("spec", GRAPHS)
def test_lemma1_bounds_extra_and_diging(spec):
    g = tp.build_graph(spec)
    M = tp.metropolis_weights(g)
    W0 = tp.spectral_shift(M, 0.0)
    mix = tp.make_mixing("extra", W0)
    _lemma1_checks(mix, 2.0 * W0.kappa_c)

    Wd = tp.spectral_shift(M, RT2_HALF)
    mixd = tp.make_mixing("diging", Wd)
    _lemma1_checks(mixd, Wd.kappa_c**2)


@pytest.mark.parametrize("spec", ["ring:5", "ring:16", "grid:3x3"])
def test_lemma1_bounds_chebyshev_kinds(spec):
    g = tp.build_graph(spec)
    M = tp.metropolis_weights(g)
    mix = tp.make_mixing("extra_ca", tp.spectral_shift(M, 0.0))
    _lemma1_checks(mix, 3.0)
    mixd = tp.make_mixing("diging_ca", tp.spectral_shift(M, RT2_HALF))
    _lemma1_checks(mixd, 20.0)


def test_usq_kernel_characterization():
    rng = np.random.default_rng(7)
    g = tp.build_graph("erdos_renyi:12:0.3:2")
    W = tp.spectral_shift(tp.metropolis_weights(g), 0.0)
    for kind in ("extra", "extra_ca"):
        mix = tp.make_mixing(kind, W)
        consensus = np.tile(rng.standard_normal(5), (12, 1))
        assert np.max(np.abs(mix.apply_Usq(consensus))) < 1e-12 * max(1, np.max(np.abs(consensus)))
        scattered = rng.standard_normal((12, 5))
        assert np.max(np.abs(mix.apply_Usq(scattered))) > 1e-6
