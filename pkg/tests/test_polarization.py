"""Polarization-algebra tests: defect one-form, symbol inversion, slice
projectors, compensated product."""

import numpy as np
import pytest

from hfglab import geometry as geo
from hfglab import phases as ph
from hfglab import polarization as po

MINK = np.diag([-1.0, 1.0, 1.0, 1.0])
MINK_INV = np.linalg.inv(MINK)


def rand_sym4(rng, n):
    return geo.symmetrize_exact(rng.normal(size=(n, 4, 4)))


def rand_slice_metric(rng, n, eps=0.2):
    p = geo.symmetrize_exact(rng.normal(size=(n, 3, 3)))
    ### scale each perturbation by its spectral radius so g3 stays SPD
    rad = np.abs(np.linalg.eigvalsh(p)).max(axis=-1)
    g3 = np.broadcast_to(np.eye(3), (n, 3, 3)) + eps * p / rad[..., None, None]
    assert np.all(np.linalg.eigvalsh(g3) > 0.5)
    return g3


def unit_normal(rng, g3):
    n = g3.shape[0]
    w = rng.normal(size=(n, 3))
    nrm = np.sqrt(np.einsum("...ij,...i,...j->...", g3, w, w))
    return w / nrm[..., None]


### --------------------------------------------------------------------- pol

def test_pol_vanishes_on_transverse_traceless():
    S = np.zeros((1, 4, 4))
    S[0, 2, 2], S[0, 3, 3] = 1.0, -1.0  # transverse block for an x1 phase
    dv = np.array([[1.0, -1.0, 0.0, 0.0]])
    gi = np.broadcast_to(MINK_INV, (1, 4, 4))
    assert np.abs(po.pol(S, dv, gi)).max() == 0.0


def test_pol_gradient_pair_identity():
    ### pol of dv_(a Q_b) equals g^-1(dv,dv) Q; for v = t, Q = dx1: -Q
    rng = np.random.default_rng(0)
    n = 50
    gi = np.broadcast_to(MINK_INV, (n, 4, 4))
    dv = rng.normal(size=(n, 4))
    Q = rng.normal(size=(n, 4))
    S = geo.sym_pair(np.einsum("...a,...b->...ab", dv, Q))
    q = np.einsum("...mn,...m,...n->...", gi, dv, dv)
    assert np.abs(po.pol(S, dv, gi) - q[..., None] * Q).max() <= 1e-12

    dv0 = np.array([[1.0, 0.0, 0.0, 0.0]])
    Q0 = np.array([[0.0, 1.0, 0.0, 0.0]])
    S0 = geo.sym_pair(np.einsum("...a,...b->...ab", dv0, Q0))
    out = po.pol(S0, dv0, np.broadcast_to(MINK_INV, (1, 4, 4)))[0]
    assert np.allclose(out, [0.0, -1.0, 0.0, 0.0], atol=1e-15)


def frame_defect_relations(fr, S, polS):
    """Residuals of the null-frame component laws of the defect one-form."""
    comp = po.frame_components(S, fr)
    pL = np.einsum("...a,...a->...", polS, fr.L)
    pLb = np.einsum("...a,...a->...", polS, fr.Lbar)
    p1 = np.einsum("...a,...a->...", polS, fr.e1)
    p2 = np.einsum("...a,...a->...", polS, fr.e2)
    return (
        np.abs(pL + comp["L,L"]).max(),
        np.abs(p1 + comp["L,e1"]).max(),
        np.abs(p2 + comp["L,e2"]).max(),
        np.abs(pLb + comp["e1,e1"] + comp["e2,e2"]).max(),
    )


def test_pol_null_frame_component_laws():
    rng = np.random.default_rng(1)
    mink = geo.minkowski()
    pts = rng.uniform(-1, 1, (200, 4))
    phase = ph.plane_phase((0.6, 0.0, 0.8), "A")
    fr = ph.build_null_frame(phase, mink, pts)
    S = rand_sym4(rng, 200)
    du = phase.du(pts)
    gi = mink.inverse(pts)
    polS = po.pol(S, du, gi)
    assert max(frame_defect_relations(fr, S, polS)) <= 1e-12

    ### same laws in a rotated transverse gauge
    th = 0.7
    fr_rot = ph.NullFrame(
        L=fr.L,
        Lbar=fr.Lbar,
        e1=np.cos(th) * fr.e1 + np.sin(th) * fr.e2,
        e2=-np.sin(th) * fr.e1 + np.cos(th) * fr.e2,
    )
    assert max(frame_defect_relations(fr_rot, S, polS)) <= 1e-12


### ------------------------------------------------------------------ symbol

def test_pv_apply_null_direction_drops_first_term():
    rng = np.random.default_rng(2)
    n = 20
    gi = np.broadcast_to(MINK_INV, (n, 4, 4))
    dv = np.broadcast_to(np.array([1.0, -1.0, 0.0, 0.0]), (n, 4))
    S = rand_sym4(rng, n)
    expect = geo.sym_pair(np.einsum("...a,...b->...ab", dv, po.pol(S, dv, gi)))
    assert np.abs(po.pv_apply(S, dv, gi) - expect).max() == 0.0


def test_pv_apply_kernel_of_pol_timelike():
    S = np.zeros((1, 4, 4))
    S[0, 1, 1], S[0, 2, 2] = 1.0, -1.0
    dv = np.array([[1.0, 0.0, 0.0, 0.0]])
    gi = np.broadcast_to(MINK_INV, (1, 4, 4))
    assert np.abs(po.pol(S, dv, gi)).max() == 0.0
    assert np.abs(po.pv_apply(S, dv, gi) - S).max() == 0.0


def test_pv_apply_output_in_kernel():
    ### range characterization: the defect of a symbol image vanishes
    rng = np.random.default_rng(3)
    n = 500
    gi = np.broadcast_to(MINK_INV, (n, 4, 4))
    S = rand_sym4(rng, n)
    dv = rng.normal(size=(n, 4))
    out = po.pv_apply(S, dv, gi)
    scale = 1.0 + np.abs(out).max()
    assert np.abs(po.pol(out, dv, gi)).max() <= 1e-12 * scale


def test_pv_solve_examples():
    gi = np.broadcast_to(MINK_INV, (1, 4, 4))
    dv = np.array([[1.0, 0.0, 0.0, 0.0]])
    assert np.abs(po.pv_solve(np.zeros((1, 4, 4)), dv, gi)).max() == 0.0
    A = np.zeros((1, 4, 4))
    A[0, 1, 1], A[0, 2, 2] = 1.0, -1.0
    S = po.pv_solve(A, dv, gi)  # divisor -1, so S = A
    assert np.abs(S - A).max() == 0.0
    assert np.abs(po.pv_apply(S, dv, gi) - A).max() == 0.0


def test_pv_solve_round_trip_random():
    rng = np.random.default_rng(4)
    n = 1000
    gi = np.broadcast_to(MINK_INV, (n, 4, 4))
    ### admissible targets: images of the symbol at non-null directions
    dv = rng.normal(size=(n, 4))
    dv[:, 0] += np.sign(dv[:, 0]) * 2.0  # keep |g^-1(dv,dv)| away from 0
    S0 = rand_sym4(rng, n)
    A = po.pv_apply(S0, dv, gi)
    S = po.pv_solve(A, dv, gi)
    back = po.pv_apply(S, dv, gi)
    rel = np.abs(back - A).max() / (1.0 + np.abs(A).max())
    assert rel <= 1e-12


def test_pv_solve_guards():
    gi = np.broadcast_to(MINK_INV, (1, 4, 4))
    with pytest.raises(po.NullDirectionUnsolvable):
        po.pv_solve(np.ones((1, 4, 4)), np.array([[1.0, -1.0, 0.0, 0.0]]), gi)
    A = np.zeros((1, 4, 4))
    A[0, 0, 1] = A[0, 1, 0] = 1.0  # defect does not vanish for v = t
    with pytest.raises(po.NotInRange):
        po.pv_solve(A, np.array([[1.0, 0.0, 0.0, 0.0]]), gi)


### -------------------------------------------------------------- projectors

def test_pbar1_isotropic_input():
    g3 = np.broadcast_to(np.eye(3), (1, 3, 3)).copy()
    N = np.array([[0.0, 0.0, 1.0]])
    out = po.pbar1(np.broadcast_to(np.eye(3), (1, 3, 3)), N, g3, g3)
    assert np.abs(out).max() == 0.0


def test_pbar2_isotropic_input():
    g3 = np.broadcast_to(np.eye(3), (1, 3, 3)).copy()
    N = np.array([[1.0, 0.0, 0.0]])
    out = po.pbar2(np.broadcast_to(np.eye(3), (1, 3, 3)), N, g3, g3)[0]
    expect = 4.0 * np.outer(N[0], N[0])
    assert np.abs(out - expect).max() == 0.0


def test_pbar2_normal_square_fixed_point():
    rng = np.random.default_rng(5)
    g3 = rand_slice_metric(rng, 40)
    g3i = np.linalg.inv(g3)
    N = unit_normal(rng, g3)
    n_flat = np.einsum("...ij,...j->...i", g3, N)
    c = rng.normal(size=(40, 1, 1))
    S = c * np.einsum("...i,...j->...ij", n_flat, n_flat)
    assert np.abs(po.pbar2(S, N, g3, g3i) - S).max() <= 1e-13


def test_projector_idempotence_and_range_laws():
    rng = np.random.default_rng(6)
    n = 1000
    g3 = rand_slice_metric(rng, n)
    g3i = np.linalg.inv(g3)
    N = unit_normal(rng, g3)
    S = geo.symmetrize_exact(rng.normal(size=(n, 3, 3)))

    P1 = po.pbar1(S, N, g3, g3i)
    tr = np.einsum("...ij,...ij->...", g3i, P1)
    nn = np.einsum("...ij,...i,...j->...", P1, N, N)
    assert np.abs(tr - nn).max() <= 1e-13
    assert np.abs(po.pbar1(P1, N, g3, g3i) - P1).max() <= 1e-12

    P2 = po.pbar2(S, N, g3, g3i)
    tr2 = np.einsum("...ij,...ij->...", g3i, P2)
    flux = np.einsum("...ij,...i->...j", P2, N)
    n_flat = np.einsum("...ij,...j->...i", g3, N)
    assert np.abs(tr2[..., None] * n_flat - flux).max() <= 1e-13
    assert np.abs(po.pbar2(P2, N, g3, g3i) - P2).max() <= 1e-12


### ----------------------------------------------------------------- product

def test_ntilde_basics():
    g3 = np.broadcast_to(np.eye(3), (1, 3, 3)).copy()
    N = np.array([[1.0, 0.0, 0.0]])
    assert np.abs(po.ntilde_otimes(N, np.zeros((1, 3)), g3)).max() == 0.0
    out = po.ntilde_otimes(N, N, g3)[0]
    assert np.allclose(out, np.diag([1.5, -0.5, -0.5]), atol=1e-15)


def test_ntilde_trace_is_half_normal_part():
    rng = np.random.default_rng(7)
    g3 = rand_slice_metric(rng, 30)
    g3i = np.linalg.inv(g3)
    N = unit_normal(rng, g3)
    X = rng.normal(size=(30, 3))
    out = po.ntilde_otimes(N, X, g3)
    tr = np.einsum("...ij,...ij->...", g3i, out)
    xn = np.einsum("...ij,...i,...j->...", g3, N, X)
    assert np.abs(tr - 0.5 * xn).max() <= 1e-13
    ### orthogonal pair: trace vanishes
    X_perp = X - xn[..., None] * N
    out_p = po.ntilde_otimes(N, X_perp, g3)
    assert np.abs(np.einsum("...ij,...ij->...", g3i, out_p)).max() <= 1e-13
