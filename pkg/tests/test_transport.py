"""Tests for characteristic flow, tensor transport, and slice time derivatives."""

import numpy as np
import pytest

from hfglab import geometry as geo
from hfglab import hierarchy as hi
from hfglab import phases as ph
from hfglab import transport as tr


def transverse_bump_metric(eps=0.05, seed=0):
    """Flat metric plus a smooth bump confined to the (2,3) block."""
    r = np.random.default_rng(seed)
    k1 = r.uniform(-1, 1, 4)
    k2 = r.uniform(-1, 1, 4)

    def fn(p):
        p = np.asarray(p, dtype=float)
        base = np.zeros(p.shape[:-1] + (4, 4))
        base[..., 0, 0] = -1.0
        for i in range(1, 4):
            base[..., i, i] = 1.0
        b1 = eps * np.sin(p @ k1)
        b2 = eps * np.cos(p @ k2)
        base[..., 2, 2] += b1
        base[..., 3, 3] += -b1
        base[..., 2, 3] += 0.3 * b2
        base[..., 3, 2] += 0.3 * b2
        return base

    return geo.LorentzMetricField(fn, name="bump")


### ---------------------------------------------------------------------
### ray flow


def test_flat_ray_endpoint_and_parallelism():
    mink = geo.minkowski()
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    b = tr.flow_characteristics(pa, mink, np.zeros((1, 3)), dt=0.1, t_end=1.0)
    assert np.allclose(b.points[-1][0], [1.0, 1.0, 0.0, 0.0], atol=1e-14)
    assert not b.truncated.any()

    rng = np.random.default_rng(0)
    feet = rng.uniform(-1, 1, (20, 3))
    b2 = tr.flow_characteristics(pa, mink, feet, dt=0.1, t_end=1.0)
    ### rays of a flat plane phase are rigid translates of each other
    disp = b2.points[-1][:, 1:] - feet
    assert np.max(np.abs(disp - np.array([1.0, 0.0, 0.0]))) < 1e-13
    assert np.max(np.abs(b2.footpoints - feet)) == 0.0


def test_flow_matches_fine_reference_at_fourth_order():
    gb = transverse_bump_metric(eps=0.08, seed=3)
    prad = ph.radial_phase([-2.0, 0.3, -0.4], "A")
    rng = np.random.default_rng(7)
    feet = rng.uniform(-0.6, 0.6, (12, 3))

    def endpoint(dt):
        return tr.flow_characteristics(prad, gb, feet, dt=dt, t_end=1.0).points[-1][:, 1:]

    errs = [
        np.max(np.abs(endpoint(dt) - endpoint(dt / 8.0)))
        for dt in (0.1, 0.05, 0.025)
    ]
    assert errs[0] < 1e-8
    assert errs[0] / errs[1] > 14.0
    assert errs[1] / errs[2] > 14.0


def test_ray_self_acceleration_vanishes_for_eikonal_phases():
    ### plane phase on the bump background: the ray field is constant
    gb = transverse_bump_metric(eps=0.08, seed=3)
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    rng = np.random.default_rng(1)
    feet = rng.uniform(-0.8, 0.8, (10, 3))
    b = tr.flow_characteristics(pa, gb, feet, dt=0.1, t_end=1.0)
    assert tr.geodesic_residual(b, pa, gb) < 1e-13

    ### spherical phase on flat space: analytic derivatives, radial rays
    prad = ph.radial_phase([-3.0, 0.0, 0.0], "B")
    mink = geo.minkowski()
    b2 = tr.flow_characteristics(prad, mink, feet, dt=0.1, t_end=1.0)
    assert tr.geodesic_residual(b2, prad, mink) < 1e-12


def test_domain_exit_truncates_and_freezes():
    mink = geo.minkowski()
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    feet = np.array([[0.0, 0.0, 0.0], [0.3, 0.1, -0.2], [-0.9, 0.0, 0.0]])
    lo = np.array([-1.0, -1.0, -1.0])
    hi_ = np.array([0.5, 1.0, 1.0])
    b = tr.flow_characteristics(pa, mink, feet, dt=0.1, t_end=1.0, box=(lo, hi_))
    ### rays advance in +x at unit speed; exits at x = 0.5
    assert b.truncated[0] and b.truncated[1] and not b.truncated[2]
    assert b.last_step[2] == b.times.shape[0] - 1
    ### frozen at the last in-box sample
    for i in (0, 1):
        k = b.last_step[i]
        assert b.points[k][i, 1] <= 0.5 + 1e-12
        assert np.max(np.abs(b.points[-1][i, 1:] - b.points[k][i, 1:])) == 0.0
    assert b.alive(0).all()
    assert not b.alive(b.times.shape[0] - 1)[0]


def test_degenerate_phase_rejected():
    mink = geo.minkowski()

    def fn(p):
        p = np.asarray(p, dtype=float)
        return -p[..., 1]

    stale = ph.Phase("S", geo.ScalarField(fn, name="u_S"), None)
    with pytest.raises(ph.DegeneratePhase):
        tr.flow_characteristics(stale, mink, np.zeros((3, 3)), dt=0.1, t_end=0.5)


### ---------------------------------------------------------------------
### transport solves


def test_flat_advection_scalar_and_tensor():
    mink = geo.minkowski()
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    rng = np.random.default_rng(2)
    feet = rng.uniform(-1, 1, (20, 3))

    def prof(p):
        p = np.asarray(p, dtype=float)
        return np.sin(1.3 * p[..., 1] + 0.4 * p[..., 2]) * np.cos(0.7 * p[..., 3])

    sol = tr.solve_transport(pa, mink, prof, feet, dt=0.05, t_end=1.0)
    exact = prof(np.concatenate([np.zeros((20, 1)), feet], axis=-1))
    ### zero wave factor and zero connection: values ride unchanged
    assert np.max(np.abs(sol.values[-1] - exact)) < 1e-15

    P = np.zeros((4, 4))
    P[1, 2] = P[2, 1] = 1.0
    P[0, 0] = -0.5

    def tens(p):
        return prof(p)[..., None, None] * P

    sol2 = tr.solve_transport(pa, mink, tens, feet, dt=0.05, t_end=1.0)
    assert np.max(np.abs(sol2.values[-1] - exact[..., None, None] * P)) < 1e-15


def test_flat_constant_data_is_conserved():
    mink = geo.minkowski()
    pa = ph.plane_phase([0.0, 1.0, 0.0], "A")
    feet = np.random.default_rng(3).uniform(-1, 1, (10, 3))
    T0 = np.tile(np.diag([0.0, 1.0, -2.0, 0.5]), (10, 1, 1))
    sol = tr.solve_transport(pa, mink, T0, feet, dt=0.02, t_end=1.0)
    drift = np.max(np.abs(sol.values - sol.values[0]))
    assert drift < 1e-13


def test_manufactured_solution_fourth_order():
    gb = transverse_bump_metric(eps=0.08, seed=3)
    prad = ph.radial_phase([-2.0, 0.3, -0.4], "A")
    rng = np.random.default_rng(7)
    feet = rng.uniform(-0.6, 0.6, (12, 3))

    P = np.zeros((4, 4))
    P[1, 2] = P[2, 1] = 1.0
    P[0, 0] = 0.7
    P[3, 3] = -0.4
    Q = np.zeros((4, 4))
    Q[1, 1] = 0.5
    Q[0, 3] = Q[3, 0] = -0.8
    Q[2, 2] = 0.3
    a = np.array([0.9, 0.5, -0.7, 0.3])
    bvec = np.array([-0.4, 0.8, 0.2, -0.6])

    def tstar(p):
        p = np.asarray(p, dtype=float)
        return (
            np.sin(p @ a)[..., None, None] * P
            + np.cos(p @ bvec)[..., None, None] * Q
        )

    def dtstar(p):
        p = np.asarray(p, dtype=float)
        return (
            np.cos(p @ a)[..., None, None, None] * a[:, None, None] * P
            - np.sin(p @ bvec)[..., None, None, None] * bvec[:, None, None] * Q
        )

    def source(p):
        ### the operator applied to the target, with the same discretized
        ### coefficients the solver uses
        du = prad.du(p)
        gi = gb.inverse(p)
        ell = -np.einsum("...ab,...b->...a", gi, du)
        gamma = geo.christoffel_from_partials(gb.partials(p, 1e-2), gi)
        d2u = prad.u.second_partials(p)
        boxu = np.einsum("...ab,...ab->...", gi, d2u) - np.einsum(
            "...ab,...rab,...r->...", gi, gamma, du
        )
        Ts = tstar(p)
        adv = np.einsum("...a,...amn->...mn", ell, dtstar(p))
        corr = np.einsum("...a,...ram,...rn->...mn", ell, gamma, Ts)
        corr = corr + np.swapaxes(corr, -1, -2)
        return -2.0 * (adv - corr) + boxu[..., None, None] * Ts

    def endpoint_err(dt):
        sol = tr.solve_transport(prad, gb, tstar, feet, dt=dt, t_end=1.0, source=source)
        return np.max(np.abs(sol.values[-1] - tstar(sol.points[-1])))

    e1 = endpoint_err(0.1)
    e2 = endpoint_err(0.05)
    assert e2 < 1e-7
    assert e1 / e2 > 14.0


def test_divergence_guard_trips():
    mink = geo.minkowski()

    ### quadratic phase: constant positive wave factor drives exponential
    ### growth of the carried scalar
    def fn(p):
        p = np.asarray(p, dtype=float)
        return p[..., 0] - p[..., 1] + 60.0 * p[..., 1] ** 2

    grow = ph.Phase("G", geo.ScalarField(fn, name="u_G"), None)
    feet = np.zeros((2, 3))
    T0 = np.ones(2)
    with pytest.raises(tr.Diverged):
        tr.solve_transport(grow, mink, T0, feet, dt=0.01, t_end=0.5)


def test_inverse_flow_evaluation():
    mink = geo.minkowski()
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    rng = np.random.default_rng(4)
    q = rng.uniform(-0.5, 0.5, (15, 3))

    def prof(p):
        p = np.asarray(p, dtype=float)
        return np.sin(1.3 * p[..., 1] + 0.4 * p[..., 2]) * np.cos(0.7 * p[..., 3])

    vals, roundtrip = tr.transport_evaluate(pa, mink, prof, 0.7, q, dt=0.05)
    shifted = q.copy()
    shifted[:, 0] -= 0.7
    exact = prof(np.concatenate([np.zeros((15, 1)), shifted], axis=-1))
    ### flat plane phase: the inverse flow is a rigid shift, evaluation exact
    assert np.max(np.abs(vals - exact)) < 1e-14
    assert roundtrip < 1e-14


### ---------------------------------------------------------------------
### propagation audit


def _admissible_start(metric, phase, feet):
    """Admissible tensor and density values from smooth footpoint functions."""
    p0 = np.concatenate([np.zeros(feet.shape[:-1] + (1,)), feet], axis=-1)
    frame = ph.build_null_frame(phase, metric, p0)
    gval = metric(p0)
    dens = 0.3 + 0.1 * np.sin(feet @ np.array([1.1, -0.4, 0.7]))
    psi = 0.8 * np.cos(feet @ np.array([0.5, 0.9, -0.3]))
    f1 = hi.seed_values(dens, 2.0 * np.cos(psi), 2.0 * np.sin(psi), frame, gval)
    return f1, dens


def test_flat_admissible_data_stays_admissible():
    mink = geo.minkowski()
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    feet = np.random.default_rng(11).uniform(-0.8, 0.8, (15, 3))
    f1_0, dens0 = _admissible_start(mink, pa, feet)
    solT = tr.solve_transport(pa, mink, f1_0, feet, dt=0.05, t_end=1.0)
    solF = tr.solve_transport(pa, mink, dens0, feet, dt=0.05, t_end=1.0)
    aud = tr.propagation_audit(solT, pa, mink, density=solF.values)
    assert np.max(aud["polarization"]) < 1e-12
    assert np.max(aud["transversality"]) < 1e-12
    assert np.max(aud["backreaction"]) < 1e-12


def test_curved_admissible_data_stays_admissible():
    gb = transverse_bump_metric(eps=0.08, seed=3)
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    feet = np.random.default_rng(11).uniform(-0.8, 0.8, (15, 3))
    f1_0, dens0 = _admissible_start(gb, pa, feet)
    solT = tr.solve_transport(pa, gb, f1_0, feet, dt=0.01, t_end=1.0)
    solF = tr.solve_transport(pa, gb, dens0, feet, dt=0.01, t_end=1.0)
    aud = tr.propagation_audit(solT, pa, gb, density=solF.values)
    assert np.max(aud["polarization"]) < 1e-10
    assert np.max(aud["transversality"]) < 1e-12
    ### squared-norm/density normalization rides the two coupled solves
    assert np.max(aud["backreaction"]) < 1e-11


def test_polarization_defect_persists():
    mink = geo.minkowski()
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    feet = np.random.default_rng(11).uniform(-0.8, 0.8, (15, 3))
    f1_0, _ = _admissible_start(mink, pa, feet)
    delta = 3e-3
    f1_0 = f1_0.copy()
    f1_0[:, 0, 0] += delta
    sol = tr.solve_transport(pa, mink, f1_0, feet, dt=0.05, t_end=1.0)
    aud = tr.propagation_audit(sol, pa, mink)
    ### homogeneous linear system: nonzero data neither decays nor grows flat;
    ### a pure time-time defect polarizes at half its amplitude
    spread = np.max(aud["polarization"]) - np.min(aud["polarization"])
    assert spread < 1e-13
    assert abs(aud["polarization"][-1] - 0.5 * delta) < 1e-13


### ---------------------------------------------------------------------
### slice time derivative

### curved slice-adapted background: unit lapse, shift growing linearly off
### the slice, spatial metric with its own linear-in-time deformation


class SliceSetup:
    def __init__(self, seed=5):
        rng = np.random.default_rng(seed)
        self.r1, self.r2, self.r3 = (rng.uniform(-1, 1, 3) for _ in range(3))
        wav = rng.uniform(-1, 1, (3, 3))
        self.wav = 0.5 * (wav + wav.T)
        self.mmode = rng.uniform(-1, 1, 3)
        pmat = rng.uniform(-1, 1, (3, 3))
        self.pmat = 0.5 * (pmat + pmat.T)
        self.pmode = rng.uniform(-1, 1, 3)
        self.amode = rng.uniform(-1, 1, 3)
        self.bmode = rng.uniform(-1, 1, 3)
        z = np.array([0.6, -0.48, 0.64])
        self.z = z / np.linalg.norm(z)
        self.metric = geo.LorentzMetricField(self._gfn, name="slice-adapted")
        self.phase = ph.Phase("A", geo.ScalarField(self._ufn, name="u_A"), None)

    def m3(self, x):
        b = 0.08 * np.sin(x @ self.mmode)
        out = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
        out += b[..., None, None] * self.wav
        return out

    def shift_rate(self, x):
        return 0.05 * np.stack(
            [np.sin(x @ self.r1), np.cos(x @ self.r2), np.sin(x @ self.r3 + 0.3)],
            axis=-1,
        )

    def pten(self, x):
        return 0.06 * np.cos(x @ self.pmode)[..., None, None] * self.pmat

    def _gfn(self, p):
        p = np.asarray(p, dtype=float)
        t = p[..., 0]
        x = p[..., 1:]
        out = np.zeros(p.shape[:-1] + (4, 4))
        out[..., 0, 0] = -1.0
        out[..., 0, 1:] = t[..., None] * self.shift_rate(x)
        out[..., 1:, 0] = out[..., 0, 1:]
        out[..., 1:, 1:] = self.m3(x) + t[..., None, None] * self.pten(x)
        return out

    def wfun(self, x):
        mi = np.linalg.inv(self.m3(x))
        return np.sqrt(np.einsum("...ij,j,i->...", mi, self.z, self.z))

    def _ufn(self, p):
        p = np.asarray(p, dtype=float)
        return p[..., 0] * self.wfun(p[..., 1:]) - p[..., 1:] @ self.z

    def slice_frame(self, x):
        mv = self.m3(x)
        miv = np.linalg.inv(mv)
        N = -np.einsum("...ij,j->...i", miv, self.z) / self.wfun(x)[..., None]
        legs = [N]
        for s in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0])):
            v = np.broadcast_to(s, x.shape[:-1] + (3,)).copy()
            for u in legs:
                num = np.einsum("...ij,...i,...j->...", mv, v, u)
                den = np.einsum("...ij,...i,...j->...", mv, u, u)
                v = v - (num / den)[..., None] * u
            v = v / np.sqrt(np.einsum("...ij,...i,...j->...", mv, v, v))[..., None]
            legs.append(v)
        return legs

    def seed3(self, x):
        """Traceless, normal-transverse slice tensor from flattened frame legs."""
        N, E1, E2 = self.slice_frame(x)
        mv = self.m3(x)
        e1f = np.einsum("...ij,...j->...i", mv, E1)
        e2f = np.einsum("...ij,...j->...i", mv, E2)
        A = 0.25 + 0.1 * np.sin(x @ self.amode)
        B = -0.2 + 0.15 * np.cos(x @ self.bmode)
        plus = np.einsum("...a,...b->...ab", e1f, e1f) - np.einsum(
            "...a,...b->...ab", e2f, e2f
        )
        cross = np.einsum("...a,...b->...ab", e1f, e2f) + np.einsum(
            "...a,...b->...ab", e2f, e1f
        )
        return A[..., None, None] * plus + B[..., None, None] * cross

    def tensor0(self, p):
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape[:-1] + (4, 4))
        out[..., 1:, 1:] = self.seed3(p[..., 1:])
        return out


def _fd3(fn, x, h=1e-2):
    base = np.asarray(fn(x))
    out = np.zeros(x.shape[:-1] + (3,) + base.shape[x.ndim - 1 :])
    lead = (slice(None),) * (x.ndim - 1)
    for a in range(3):
        acc = 0.0
        for off, wt in ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)):
            q = x.copy()
            q[..., a] += off * h
            acc = acc + wt * np.asarray(fn(q))
        out[lead + (a,)] = acc / h
    return out


def test_slice_dt_reductions_on_curved_slice():
    ss = SliceSetup()
    rng = np.random.default_rng(5)
    pts3 = rng.uniform(-0.7, 0.7, (12, 3))
    out = tr.dt_from_transport(ss.phase, ss.metric, ss.tensor0, pts3)

    mval = ss.m3(pts3)
    mi = np.linalg.inv(mval)
    F1v = ss.seed3(pts3)
    k0 = -0.5 * ss.pten(pts3)
    N, E1, E2 = ss.slice_frame(pts3)

    ### vanishing time-time slot, identically
    assert np.max(np.abs(out[..., 0, 0])) < 1e-14

    ### time-space slots from the shift rate and the slice curvature
    rhs0i = np.einsum(
        "...ik,...kl,...l->...i",
        F1v,
        mi,
        ss.shift_rate(pts3) + np.einsum("...lj,...j->...l", k0, N),
    )
    assert np.max(np.abs(out[..., 0, 1:] - rhs0i)) < 1e-12

    ### spatial trace against the slice curvature contraction
    k0up = np.einsum("...ik,...jl,...kl->...ij", mi, mi, k0)
    tr_lhs = np.einsum("...ij,...ij->...", mi, out[..., 1:, 1:])
    tr_rhs = -2.0 * np.einsum("...ij,...ij->...", k0up, F1v)
    assert np.max(np.abs(tr_rhs)) > 1e-3
    assert np.max(np.abs(tr_lhs - tr_rhs)) < 5e-11

    ### normal-normal contraction vanishes for transverse data
    nn = np.einsum("...i,...j,...ij->...", N, N, out[..., 1:, 1:])
    assert np.max(np.abs(nn)) < 5e-12

    ### normal-tangent contraction
    def nflat(x):
        N_, _, _ = ss.slice_frame(x)
        return np.einsum("...ij,...j->...i", ss.m3(x), N_)

    dNl = _fd3(nflat, pts3)
    dm = _fd3(ss.m3, pts3)
    brk = (
        -np.einsum("...a,...al->...l", N, dNl)
        - np.einsum("...lj,...j->...l", k0, N)
        + 0.5 * np.einsum("...i,...j,...lij->...l", N, N, dm)
    )
    for Ei in (E1, E2):
        lhs = np.einsum("...i,...j,...ij->...", N, Ei, out[..., 1:, 1:])
        rhs = np.einsum(
            "...l,...kl,...k->...", brk, mi, np.einsum("...kj,...j->...k", F1v, Ei)
        )
        assert np.max(np.abs(lhs - rhs)) < 1e-11


def test_flat_constant_seed_has_no_time_derivative():
    mink = geo.minkowski()
    pa = ph.plane_phase([0.0, 0.0, 1.0], "A")
    P3 = np.diag([1.0, -1.0, 0.0])

    def t0fn(p):
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape[:-1] + (4, 4))
        out[..., 1:, 1:] = P3
        return out

    pts3 = np.random.default_rng(6).uniform(-1, 1, (8, 3))
    out = tr.dt_from_transport(pa, mink, t0fn, pts3)
    assert np.max(np.abs(out)) < 1e-14


def test_slice_dt_matches_transport_solve():
    ss = SliceSetup()
    rng = np.random.default_rng(5)
    pts3 = rng.uniform(-0.7, 0.7, (12, 3))
    out = tr.dt_from_transport(ss.phase, ss.metric, ss.tensor0, pts3)
    n_vec, w, gamma, boxu = tr.slice_phase_inputs(ss.phase, ss.metric, pts3)

    def material(tau, dt):
        sp = tr.solve_transport(ss.phase, ss.metric, ss.tensor0, pts3, dt=dt, t_end=tau)
        sm = tr.solve_transport(ss.phase, ss.metric, ss.tensor0, pts3, dt=dt, t_end=-tau)
        return (sp.values[-1] - sm.values[-1]) / (2.0 * tau)

    def t0_slice(p):
        return ss.tensor0(p)

    dT0 = _fd3(lambda x: ss.tensor0(np.concatenate([np.zeros(x.shape[:-1] + (1,)), x], axis=-1)), pts3)
    adv = np.einsum("...i,...imn->...mn", n_vec, dT0)

    ### the ray velocity on the slice is minus the normal, so the fixed-point
    ### time derivative is the along-ray derivative plus the advection term
    errs = []
    for tau in (0.04, 0.02):
        dtT = material(tau, tau / 4.0) + adv
        errs.append(np.max(np.abs(dtT - out)))
    ratio = errs[0] / errs[1]
    assert 3.4 < ratio < 4.6

    rich = (4.0 * material(0.02, 0.005) - material(0.04, 0.01)) / 3.0
    assert np.max(np.abs(rich + adv - out)) < 1e-8


def test_slice_inputs_reject_bad_backgrounds():
    pa = ph.plane_phase([1.0, 0.0, 0.0], "A")
    pts3 = np.zeros((2, 3))

    ### nonzero shift on the slice
    def bad_fn(p):
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape[:-1] + (4, 4))
        out[..., 0, 0] = -1.0
        for i in range(1, 4):
            out[..., i, i] = 1.0
        out[..., 0, 1] = 0.2
        out[..., 1, 0] = 0.2
        return out

    bad = geo.LorentzMetricField(bad_fn, name="shifted")
    with pytest.raises(ValueError):
        tr.slice_phase_inputs(pa, bad, pts3)

    ### spatial gradient degenerate on the slice
    def tfn(p):
        p = np.asarray(p, dtype=float)
        return p[..., 0] * 1.0

    tonly = ph.Phase("T", geo.ScalarField(tfn, name="u_T"), None)
    with pytest.raises(ph.DegeneratePhase):
        tr.slice_phase_inputs(tonly, geo.minkowski(), pts3)
