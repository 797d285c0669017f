"""Tensor calculus and FD curvature tests.

Expected numbers here were generated by tests/oracles/geometry_oracle.py
(sympy differentiation of closed-form metrics) — see that script for the
derivations.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfglab import geometry as geo


def rand_points(rng, n, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, (n, 4))


def bump_metric(rng, amp=0.05, kmax=0.5, n_modes=3):
    amps = rng.uniform(-amp, amp, (n_modes, 4, 4))
    waves = rng.uniform(-kmax, kmax, (n_modes, 4))
    phases = rng.uniform(0, 2 * np.pi, n_modes)
    return geo.diag_bump_metric(amps, waves, phases)


### ----------------------------------------------------------------- algebra

def test_symmetrization_is_unnormalized():
    ### the pair symmetrizer adds the transpose without a 1/2 factor
    M = np.zeros((4, 4))
    M[0, 1] = 1.0
    S = geo.sym_pair(M)
    assert S[0, 1] == 1.0 and S[1, 0] == 1.0
    D = np.diag([1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(geo.sym_pair(D), 2.0 * D)


def test_sym_field_bitwise_symmetric():
    ### raw closure is asymmetric; the field must still return S_ab == S_ba
    raw = lambda p: np.arange(16.0).reshape(4, 4) + np.zeros(p.shape[:-1] + (4, 4))
    F = geo.SymTensorField(raw)
    v = F(np.zeros((3, 4)))
    assert np.array_equal(v, np.swapaxes(v, -1, -2))


def test_metric_inverse_identity_and_signature():
    rng = np.random.default_rng(7)
    g = bump_metric(rng, amp=0.1)
    pts = rand_points(rng, 50)
    gv = g(pts)
    gi = g.inverse(pts)
    eye = np.broadcast_to(np.eye(4), gv.shape)
    assert np.abs(np.einsum("...ab,...bc->...ac", gv, gi) - eye).max() <= 1e-13
    assert g.signature_ok(pts).all()


def test_singular_metric_never_regularized():
    def degenerate(p):
        out = np.zeros(p.shape[:-1] + (4, 4))
        out[..., 0, 0] = -1.0
        out[..., 1, 1] = 1e-13  # collapses one spatial direction
        out[..., 2, 2] = 1.0
        out[..., 3, 3] = 1.0
        return out

    g = geo.LorentzMetricField(degenerate)
    with pytest.raises(geo.SingularMetric):
        g.inverse(np.zeros((1, 4)))


def test_raise_lower_roundtrip():
    rng = np.random.default_rng(11)
    g = bump_metric(rng, amp=0.1)
    pts = rand_points(rng, 30)
    gv, gi = g(pts), g.inverse(pts)
    T = geo.symmetrize_exact(rng.normal(size=(30, 4, 4)))
    up = geo.raise_lower(T, "uu", g=gv, g_inv=gi)
    back = geo.raise_lower(up, "dd", g=gv, g_inv=gi)
    assert np.abs(back - T).max() <= 1e-13
    w = rng.normal(size=(30, 4))
    assert np.abs(geo.raise_lower(geo.raise_lower(w, "u", g_inv=gi), "d", g=gv) - w).max() <= 1e-13


def test_raise_lower_requires_metric():
    with pytest.raises(ValueError):
        geo.raise_lower(np.zeros((4, 4)), "ud")


def test_tensor_norms_polarized_block():
    ### plus-polarized transverse block with amplitude 2 has squared norm 8
    mink = np.diag([-1.0, 1.0, 1.0, 1.0])
    gi = np.linalg.inv(mink)
    T = np.zeros((4, 4))
    T[2, 2], T[3, 3] = 2.0, -2.0
    out = geo.tensor_norms(T, gi)
    assert abs(out["norm2"] - 8.0) <= 1e-14
    assert abs(out["trace"]) <= 1e-14

    S = np.zeros((4, 4))
    S[2, 2], S[3, 3] = 1.0, -1.0
    out = geo.tensor_norms(S, gi, S=S)
    assert abs(out["norm2"] - 2.0) <= 1e-14
    assert abs(out["dot"] - 2.0) <= 1e-14
    assert abs(out["trace"]) <= 1e-14


def test_tensor_dot_is_signed():
    ### Lorentzian inner products may be negative: mixed time-space component
    mink = np.diag([-1.0, 1.0, 1.0, 1.0])
    gi = np.linalg.inv(mink)
    T = np.zeros((4, 4))
    T[0, 1] = T[1, 0] = 1.0
    assert geo.tensor_norms(T, gi)["norm2"] == pytest.approx(-2.0, abs=1e-14)


### ------------------------------------------------------------ differencing

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_fd_partials_exact_on_quartics(axis, c1, c2, c3):
    ### 4th-order stencil differentiates quartic polynomials exactly
    def f(p):
        s = p[..., axis]
        return c1 * s + c2 * s**3 + c3 * s**4

    pts = np.array([[0.3, -0.2, 0.5, 0.1]])
    d = geo.fd_partials(f, pts, h=0.05)[0]
    s = pts[0, axis]
    expect = c1 + 3 * c2 * s**2 + 4 * c3 * s**3
    assert abs(d[axis] - expect) <= 1e-10 * (1 + abs(expect))
    others = [a for a in range(4) if a != axis]
    assert np.abs(d[others]).max() <= 1e-12


def test_fd_second_partials_mixed():
    f = lambda p: p[..., 0] ** 2 * p[..., 1] + p[..., 2] * p[..., 3] ** 3
    pts = np.array([[0.4, 0.7, -0.3, 0.6]])
    d2 = geo.fd_second_partials(f, pts, h=0.05)[0]
    t, x, y, z = pts[0]
    expect = np.zeros((4, 4))
    expect[0, 0] = 2 * x
    expect[0, 1] = expect[1, 0] = 2 * t
    expect[2, 3] = expect[3, 2] = 3 * z**2
    expect[3, 3] = 6 * y * z
    assert np.abs(d2 - expect).max() <= 1e-10


### ------------------------------------------------------------- christoffels

def test_christoffels_minkowski_zero():
    g = geo.minkowski()
    pts = rand_points(np.random.default_rng(0), 10)
    assert np.abs(geo.christoffels_fd(g, pts)).max() <= 1e-14


def test_christoffels_quadratic_bump():
    ### oracle: Gamma^2_12 = x/(x^2+10); at x=1 this is 1/11
    def fn(p):
        out = np.broadcast_to(np.diag([-1.0, 1.0, 1.0, 1.0]), p.shape[:-1] + (4, 4)).copy()
        out[..., 2, 2] = 1.0 + 0.1 * p[..., 1] ** 2
        return out

    g = geo.LorentzMetricField(fn)
    pts = np.array([[0.0, 1.0, 0.0, 0.0]])
    gam = geo.christoffels_fd(g, pts, h=1e-2)[0]
    assert gam[2, 1, 2] == pytest.approx(1.0 / 11.0, abs=1e-8)
    assert np.array_equal(gam, np.swapaxes(gam, -1, -2))  # exact index symmetry


def test_christoffels_pp_wave_closed_form():
    ### oracle list for H = y^2 - z^2: the only nonzero symbols are
    ### [1,0,2] = -y, [1,0,3] = z, [2,0,0] = -y, [3,0,0] = z (plus (m,k) mirror)
    g = geo.pp_wave_metric(lambda y, z: y**2 - z**2)
    rng = np.random.default_rng(3)
    pts = rand_points(rng, 12)
    gam = geo.christoffels_fd(g, pts, h=1e-2)
    y, z = pts[:, 2], pts[:, 3]
    expect = np.zeros_like(gam)
    expect[:, 1, 0, 2] = expect[:, 1, 2, 0] = -y
    expect[:, 1, 0, 3] = expect[:, 1, 3, 0] = z
    expect[:, 2, 0, 0] = -y
    expect[:, 3, 0, 0] = z
    assert np.abs(gam - expect).max() <= 1e-11


def test_stencil_out_of_domain():
    rng = np.random.default_rng(5)
    gan = bump_metric(rng)
    n, dx = 17, 0.25
    ax = -2.0 + dx * np.arange(n)
    grid = np.stack(np.meshgrid(ax, ax, ax, ax, indexing="ij"), axis=-1)
    gs = geo.SampledLorentzMetric(origin=[-2] * 4, spacing=dx, values=gan(grid))
    with pytest.raises(geo.StencilOutOfDomain):
        geo.christoffels_fd(gs, np.array([[-1.99, 0.0, 0.0, 0.0]]), h=2e-2)


def test_sampled_field_matches_analytic():
    rng = np.random.default_rng(8)
    gan = bump_metric(rng)
    n, dx = 33, 0.125
    ax = -2.0 + dx * np.arange(n)
    grid = np.stack(np.meshgrid(ax, ax, ax, ax, indexing="ij"), axis=-1)
    gs = geo.SampledLorentzMetric(origin=[-2] * 4, spacing=dx, values=gan(grid))
    q = rand_points(rng, 6, -0.8, 0.8)
    assert np.abs(gs(q) - gan(q)).max() <= 1e-7
    assert np.abs(
        geo.christoffels_fd(gs, q, h=2e-2) - geo.christoffels_fd(gan, q, h=2e-2)
    ).max() <= 1e-6


### ------------------------------------------------------------------- ricci

def test_ricci_direct_pp_wave_vacuum():
    ### H = y^2 - z^2 solves the transverse Laplace equation: Ricci vanishes
    g = geo.pp_wave_metric(lambda y, z: y**2 - z**2)
    pts = rand_points(np.random.default_rng(1), 8)
    assert np.abs(geo.ricci_direct(g, pts, h=1e-2)).max() <= 1e-10


def test_ricci_direct_pp_wave_curved():
    ### oracle: H = y^2 + z^2 has R_00 = -2 on this chart, all else zero
    g = geo.pp_wave_metric(lambda y, z: y**2 + z**2)
    pts = rand_points(np.random.default_rng(2), 8)
    R = geo.ricci_direct(g, pts, h=1e-2)
    expect = np.zeros_like(R)
    expect[..., 0, 0] = -2.0
    assert np.abs(R - expect).max() <= 1e-6


def test_ricci_gwc_matches_direct():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(20):
        g = bump_metric(rng)
        pts = rand_points(rng, 4)
        Rd = geo.ricci_direct(g, pts, h=1e-2)
        Rg = geo.ricci_gwc(g, pts, h=1e-2).total
        worst = max(worst, float(np.abs(Rd - Rg).max()))
    assert worst <= 1e-9


def test_ricci_gwc_decomposition_identity():
    g = bump_metric(np.random.default_rng(6))
    pts = rand_points(np.random.default_rng(9), 5)
    B = geo.ricci_gwc(g, pts, h=1e-2)
    assert np.array_equal(2.0 * B.total, -B.wave_part + B.p_part + B.gauge_part)


def test_ricci_gwc_gauge_part_vanishes_in_harmonic_chart():
    ### the pp-wave chart has vanishing contracted Christoffels, so the
    ### harmonic-defect block of the split must be FD noise only
    g = geo.pp_wave_metric(lambda y, z: y**2 + z**2)
    pts = rand_points(np.random.default_rng(4), 8)
    B = geo.ricci_gwc(g, pts, h=1e-2)
    assert np.abs(B.gauge_part).max() <= 1e-10
    R = geo.ricci_direct(g, pts, h=1e-2)
    assert np.abs(B.total - R).max() <= 1e-9


def test_fd_convergence_order():
    ### non-harmonic profile H = sin(2y)sin(3z): R_00 = 6.5*H analytically;
    ### 4th-order stencils must shrink the error by >= 14 per halving
    g = geo.pp_wave_metric(lambda y, z: np.sin(2 * y) * np.sin(3 * z))
    pts = rand_points(np.random.default_rng(10), 8, -0.5, 0.5)
    expect = np.zeros(pts.shape[:-1] + (4, 4))
    expect[..., 0, 0] = 6.5 * np.sin(2 * pts[..., 2]) * np.sin(3 * pts[..., 3])
    errs = [
        float(np.abs(geo.ricci_direct(g, pts, h=h) - expect).max())
        for h in (4e-2, 2e-2, 1e-2)
    ]
    assert errs[0] / errs[1] >= 14.0
    assert errs[1] / errs[2] >= 14.0


### ----------------------------------------------------------- wave operator

def test_wave_operator_minkowski():
    g = geo.minkowski()
    pts = rand_points(np.random.default_rng(12), 6)
    f2 = geo.ScalarField(lambda p: p[..., 0] ** 2)
    assert np.abs(geo.wave_operator(g, f2, pts) + 2.0).max() <= 1e-10
    fn = geo.ScalarField(lambda p: p[..., 0] - p[..., 1])
    assert np.abs(geo.wave_operator(g, fn, pts)).max() <= 1e-11


def test_wave_operator_pp_wave_phase():
    ### the front coordinate is a null phase of the pp-wave: box u = 0
    g = geo.pp_wave_metric(lambda y, z: y**2 - z**2)
    pts = rand_points(np.random.default_rng(13), 8)
    f = geo.ScalarField(lambda p: p[..., 0])
    assert np.abs(geo.wave_operator(g, f, pts)).max() <= 1e-10
