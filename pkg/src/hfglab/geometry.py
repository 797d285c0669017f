"""Lorentzian tensor calculus on coordinate charts.

Conventions used throughout the package:

* Points are numpy arrays of shape (..., 4) with slot 0 the time coordinate;
  any leading batch shape is allowed and preserved.
* Rank-2 tensors are arrays of shape (..., 4, 4); a partial-derivative stack
  puts the derivative axis FIRST among the trailing index axes, i.e.
  ``dg[..., mu, a, b] = d_mu g_ab`` and ``d2g[..., mu, nu, a, b]``.
* Symmetrization of index pairs is UN-normalized: sym(T)_ab = T_ab + T_ba.
* "Norms" of tensors are plain signed inner products built from the inverse
  metric; they can be negative on a Lorentzian background.

Finite differencing is 4th-order central with stencil [1, -8, 0, 8, -1]/12h.
All curvature operators differentiate the metric closure by FD even when a
field carries analytic derivative rules, so that cross-checks between the
direct curvature formula and the wave-operator split stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SingularMetric",
    "StencilOutOfDomain",
    "ScalarField",
    "OneFormField",
    "VectorField",
    "SymTensorField",
    "LorentzMetricField",
    "SampledSymTensorField",
    "RicciBreakdown",
    "sym_pair",
    "symmetrize_exact",
    "fd_partials",
    "fd_second_partials",
    "metric_inverse",
    "lorentz_signature_ok",
    "raise_lower",
    "tensor_dot",
    "tensor_trace",
    "tensor_norms",
    "christoffel_from_partials",
    "christoffels_fd",
    "ricci_direct",
    "ricci_gwc",
    "wave_operator",
    "minkowski",
    "pp_wave_metric",
    "diag_bump_metric",
]


class SingularMetric(Exception):
    """Metric determinant below the invertibility floor."""


class StencilOutOfDomain(Exception):
    """An FD stencil point left the domain of a sampled field."""


### ---------------------------------------------------------------------
### finite differences

_D1_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_D1_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_D2_OFFSETS = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
_D2_WEIGHTS = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def fd_partials(fn, pts, h):
    """All four first partials of a batched closure, 4th order.

    fn maps (..., 4) -> (..., V) for a fixed value shape V (possibly empty).
    Returns an array of shape (..., 4, V): derivative axis first.
    """
    pts = np.asarray(pts, dtype=float)
    shifts = np.zeros((4, _D1_OFFSETS.size, 4))
    for a in range(4):
        shifts[a, :, a] = _D1_OFFSETS * h
    cloud = pts[..., None, None, :] + shifts
    vals = fn(cloud)
    ### contract the tap axis with the stencil weights
    vshape = vals.shape[pts.ndim + 1 :]
    w = _D1_WEIGHTS.reshape((1,) * (pts.ndim - 1) + (1, -1) + (1,) * len(vshape))
    return np.sum(vals * w, axis=pts.ndim) / h


def fd_second_partials(fn, pts, h):
    """Full symmetric Hessian stack d2[..., mu, nu, V] of a batched closure."""
    pts = np.asarray(pts, dtype=float)
    base = pts.ndim - 1

    ### repeated-axis part: 5-point second-derivative stencil
    shifts = np.zeros((4, _D2_OFFSETS.size, 4))
    for a in range(4):
        shifts[a, :, a] = _D2_OFFSETS * h
    vals = fn(pts[..., None, None, :] + shifts)
    vshape = vals.shape[base + 2 :]
    w2 = _D2_WEIGHTS.reshape((1,) * base + (1, -1) + (1,) * len(vshape))
    diag = np.sum(vals * w2, axis=base + 1) / h**2

    ### mixed part: tensor product of two first-derivative stencils
    pairs = [(a, b) for a in range(4) for b in range(a + 1, 4)]
    shifts = np.zeros((len(pairs), _D1_OFFSETS.size, _D1_OFFSETS.size, 4))
    for k, (a, b) in enumerate(pairs):
        shifts[k, :, :, a] += _D1_OFFSETS[:, None] * h
        shifts[k, :, :, b] += _D1_OFFSETS[None, :] * h
    vals = fn(pts[..., None, None, None, :] + shifts)
    ww = _D1_WEIGHTS[:, None] * _D1_WEIGHTS[None, :]
    ww = ww.reshape((1,) * base + (1,) + ww.shape + (1,) * len(vshape))
    mixed = np.sum(vals * ww, axis=(base + 1, base + 2)) / h**2

    out = np.zeros(pts.shape[:-1] + (4, 4) + vshape)
    vsl = (slice(None),) * len(vshape)
    for a in range(4):
        out[(Ellipsis, a, a) + vsl] = diag[(Ellipsis, a) + vsl]
    for k, (a, b) in enumerate(pairs):
        sl = mixed[(Ellipsis, k) + vsl]
        out[(Ellipsis, a, b) + vsl] = sl
        out[(Ellipsis, b, a) + vsl] = sl
    return out


### ---------------------------------------------------------------------
### field wrappers

def symmetrize_exact(M):
    """Mirror the upper triangle of the last two axes; output is bitwise symmetric."""
    M = np.asarray(M, dtype=float)
    out = np.empty_like(M)
    iu, ju = np.triu_indices(M.shape[-1])
    out[..., iu, ju] = M[..., iu, ju]
    out[..., ju, iu] = M[..., iu, ju]
    return out


def sym_pair(M):
    """Un-normalized symmetrization of the last two axes: M_ab + M_ba."""
    return M + np.swapaxes(M, -1, -2)


class ScalarField:
    """Scalar closure over spacetime points, with optional analytic derivatives."""

    value_shape = ()

    def __init__(self, fn, d1=None, d2=None, name="scalar"):
        self._fn = fn
        self._d1 = d1
        self._d2 = d2
        self.name = name

    def __call__(self, pts):
        return np.asarray(self._fn(np.asarray(pts, dtype=float)))

    def partials(self, pts, h=1e-2):
        if self._d1 is not None:
            return np.asarray(self._d1(np.asarray(pts, dtype=float)))
        return fd_partials(self, pts, h)

    def second_partials(self, pts, h=1e-2):
        if self._d2 is not None:
            return np.asarray(self._d2(np.asarray(pts, dtype=float)))
        return fd_second_partials(self, pts, h)


class OneFormField(ScalarField):
    value_shape = (4,)

    def __init__(self, fn, d1=None, d2=None, name="one-form"):
        super().__init__(fn, d1, d2, name)


class VectorField(ScalarField):
    value_shape = (4,)

    def __init__(self, fn, d1=None, d2=None, name="vector"):
        super().__init__(fn, d1, d2, name)


class SymTensorField(ScalarField):
    """Symmetric rank-2 closure; evaluation mirrors the upper triangle so the
    returned components are bitwise symmetric regardless of the raw closure."""

    value_shape = (4, 4)

    def __init__(self, fn, d1=None, d2=None, name="sym2"):
        super().__init__(fn, d1, d2, name)

    def __call__(self, pts):
        return symmetrize_exact(self._fn(np.asarray(pts, dtype=float)))

    def partials(self, pts, h=1e-2):
        if self._d1 is not None:
            return symmetrize_exact(self._d1(np.asarray(pts, dtype=float)))
        return fd_partials(self, pts, h)

    def second_partials(self, pts, h=1e-2):
        if self._d2 is not None:
            return symmetrize_exact(self._d2(np.asarray(pts, dtype=float)))
        return fd_second_partials(self, pts, h)


def metric_inverse(g, det_floor=1e-12):
    """Pointwise inverse of a (...,4,4) metric stack with a determinant guard."""
    g = np.asarray(g, dtype=float)
    det = np.linalg.det(g)
    if np.any(np.abs(det) < det_floor):
        bad = float(np.min(np.abs(det)))
        raise SingularMetric(f"|det g| = {bad:.3e} below floor {det_floor:.1e}")
    return np.linalg.inv(g)


def lorentz_signature_ok(g):
    """True where the eigenvalue signature at each point is (-,+,+,+)."""
    ev = np.linalg.eigvalsh(np.asarray(g, dtype=float))
    return (ev[..., 0] < 0) & np.all(ev[..., 1:] > 0, axis=-1)


class LorentzMetricField(SymTensorField):
    """Spacetime metric closure of signature (-,+,+,+).

    The inverse is computed lazily and pointwise, guarded by a determinant
    floor; callers wanting the signature verified sample `signature_ok`.
    """

    def __init__(self, fn, d1=None, d2=None, name="metric", det_floor=1e-12):
        super().__init__(fn, d1, d2, name)
        self.det_floor = det_floor

    def inverse(self, pts):
        return metric_inverse(self(pts), self.det_floor)

    def signature_ok(self, pts):
        return lorentz_signature_ok(self(pts))


class SampledSymTensorField:
    """Symmetric rank-2 field stored as packed upper-triangle samples on a
    uniform 4D grid, evaluated by cubic spline interpolation.

    Queries whose surrounding interpolation window leaves the grid raise
    StencilOutOfDomain, which FD stencils propagate.
    """

    value_shape = (4, 4)

    def __init__(self, origin, spacing, values, name="sampled-sym2"):
        from scipy import ndimage

        self.origin = np.asarray(origin, dtype=float)
        self.spacing = float(spacing)
        vals = np.asarray(values, dtype=float)
        if vals.shape[-2:] == (4, 4):  # accept full storage, pack it
            iu, ju = np.triu_indices(4)
            vals = vals[..., iu, ju]
        if vals.ndim != 5 or vals.shape[-1] != 10:
            raise ValueError("expected grid values shaped (n0,n1,n2,n3,10)")
        self.shape = vals.shape[:4]
        self.name = name
        ### prefilter once so each query is a plain spline evaluation
        self._coeff = np.stack(
            [ndimage.spline_filter(vals[..., k], order=3, mode="mirror") for k in range(10)],
            axis=-1,
        )

    @property
    def box(self):
        lo = self.origin
        hi = self.origin + self.spacing * (np.array(self.shape) - 1)
        return lo, hi

    def __call__(self, pts):
        from scipy import ndimage

        pts = np.asarray(pts, dtype=float)
        idx = (pts - self.origin) / self.spacing
        ### cubic interpolation needs one sample of margin on each side
        lo_ok = idx >= 1.0 - 1e-9
        hi_ok = idx <= np.array(self.shape) - 2.0 + 1e-9
        if not (np.all(lo_ok) and np.all(hi_ok)):
            raise StencilOutOfDomain(
                "query outside the sampled box (cubic margin of one cell)"
            )
        flat = idx.reshape(-1, 4).T
        comps = [
            ndimage.map_coordinates(self._coeff[..., k], flat, order=3, prefilter=False)
            for k in range(10)
        ]
        out = np.empty(pts.shape[:-1] + (4, 4))
        iu, ju = np.triu_indices(4)
        for k in range(10):
            c = comps[k].reshape(pts.shape[:-1])
            out[..., iu[k], ju[k]] = c
            out[..., ju[k], iu[k]] = c
        return out

    def partials(self, pts, h=1e-2):
        return fd_partials(self, pts, h)

    def second_partials(self, pts, h=1e-2):
        return fd_second_partials(self, pts, h)


class SampledLorentzMetric(SampledSymTensorField):
    def __init__(self, origin, spacing, values, name="sampled-metric", det_floor=1e-12):
        super().__init__(origin, spacing, values, name)
        self.det_floor = det_floor

    def inverse(self, pts):
        return metric_inverse(self(pts), self.det_floor)

    def signature_ok(self, pts):
        return lorentz_signature_ok(self(pts))


### ---------------------------------------------------------------------
### pointwise tensor algebra

def raise_lower(T, slots, g=None, g_inv=None):
    """Raise/lower indices of a rank-1 or rank-2 array.

    slots: one character per index of T; 'u' contracts that slot with the
    inverse metric (raising), 'd' with the metric (lowering), '.' leaves it.
    The metric arguments must be supplied as arrays for the slots used.
    """
    T = np.asarray(T, dtype=float)
    rank = len(slots)
    if rank not in (1, 2) or T.shape[-rank:] != (4,) * rank:
        raise ValueError("raise_lower supports rank-1/2 arrays over 4d slots")
    out = T
    for pos, op in enumerate(slots):
        if op == ".":
            continue
        M = g_inv if op == "u" else g
        if M is None:
            raise ValueError(f"slot {pos}: missing metric for operation {op!r}")
        if rank == 1:
            out = np.einsum("...as,...s->...a", M, out)
        elif pos == 0:
            out = np.einsum("...as,...sb->...ab", M, out)
        else:
            out = np.einsum("...bs,...as->...ab", M, out)
    return out


def tensor_dot(T, S, g_inv):
    """Signed inner product g^ab g^mn T_am S_bn of symmetric rank-2 tensors."""
    return np.einsum("...ab,...mn,...am,...bn->...", g_inv, g_inv, T, S)


def tensor_trace(T, g_inv):
    return np.einsum("...ab,...ab->...", g_inv, T)


def tensor_norms(T, g_inv, S=None):
    """Dictionary of the basic scalar invariants of T (and optionally a mate S)."""
    out = {
        "norm2": tensor_dot(T, T, g_inv),
        "trace": tensor_trace(T, g_inv),
    }
    if S is not None:
        out["dot"] = tensor_dot(T, S, g_inv)
    return out


### ---------------------------------------------------------------------
### connection and curvature

def christoffel_from_partials(dg, g_inv):
    """Christoffel symbols Gamma[..., r, m, n] from a metric derivative stack."""
    lower = 0.5 * (
        np.einsum("...msn->...smn", dg)
        + np.einsum("...nsm->...smn", dg)
        - dg
    )
    return np.einsum("...rs,...smn->...rmn", g_inv, lower)


def christoffels_fd(g, pts, h=1e-2):
    """Christoffel symbols of a metric field at pts, metric derivatives by FD."""
    dg = fd_partials(g, pts, h)
    gi = metric_inverse(g(pts), getattr(g, "det_floor", 1e-12))
    return christoffel_from_partials(dg, gi)


def ricci_direct(g, pts, h=1e-2):
    """Ricci tensor from the textbook curvature formula, all derivatives FD.

    R_ab = d_r Gamma^r_ab - d_a Gamma^r_rb + Gamma^r_rs Gamma^s_ab
           - Gamma^r_as Gamma^s_rb
    """
    gamma = christoffels_fd(g, pts, h)
    dgamma = fd_partials(lambda q: christoffels_fd(g, q, h), pts, h)
    R = (
        np.einsum("...rrab->...ab", dgamma)
        - np.einsum("...arrb->...ab", dgamma)
        + np.einsum("...rrs,...sab->...ab", gamma, gamma)
        - np.einsum("...ras,...srb->...ab", gamma, gamma)
    )
    return 0.5 * (R + np.swapaxes(R, -1, -2))


def quadratic_gradient_block(dg, g_inv):
    """The quadratic first-derivative block of the reduced curvature split.

    Four contractions of dg with two inverse metrics; only the first needs
    explicit symmetrization, the rest are already pairwise symmetric.
    """
    t1 = np.einsum("...ars,...mbn,...mr,...ns->...ab", dg, dg, g_inv, g_inv)
    t2 = np.einsum("...ars,...bmn,...mr,...ns->...ab", dg, dg, g_inv, g_inv)
    t3 = np.einsum("...ran,...sbm,...mr,...ns->...ab", dg, dg, g_inv, g_inv)
    t4 = np.einsum("...rsa,...mnb,...mr,...ns->...ab", dg, dg, g_inv, g_inv)
    return sym_pair(t1) - 0.5 * t2 - t3 + t4


@dataclass
class RicciBreakdown:
    """Ricci tensor split into principal wave part, quadratic gradient part,
    and harmonic-defect (gauge) part; twice the total equals
    -wave_part + p_part + gauge_part by construction."""

    wave_part: np.ndarray
    p_part: np.ndarray
    gauge_part: np.ndarray
    total: np.ndarray


def harmonic_defect(g, pts, h=1e-2):
    """The contracted-Christoffel vector H^r = g^mn Gamma^r_mn."""
    gamma = christoffels_fd(g, pts, h)
    gi = metric_inverse(g(pts), getattr(g, "det_floor", 1e-12))
    return np.einsum("...mn,...rmn->...r", gi, gamma)


def ricci_gwc(g, pts, h=1e-2):
    """Ricci tensor assembled from the wave-operator split used in
    (generalized) wave coordinates; all metric derivatives FD.

    2 R_ab = -g^mn d_m d_n g_ab + P_ab(dg, dg) + g_{r(a} d_{b)} H^r
             + H^r d_r g_ab
    """
    gval = g(pts)
    gi = metric_inverse(gval, getattr(g, "det_floor", 1e-12))
    dg = fd_partials(g, pts, h)
    d2g = fd_second_partials(g, pts, h)

    wave = np.einsum("...mn,...mnab->...ab", gi, d2g)
    p_part = quadratic_gradient_block(dg, gi)

    H = harmonic_defect(g, pts, h)
    dH = fd_partials(lambda q: harmonic_defect(g, q, h), pts, h)
    ### g_{ra} d_b H^r, then the un-normalized (a,b) symmetrization
    gauge = sym_pair(np.einsum("...ra,...br->...ab", gval, dH))
    gauge = gauge + np.einsum("...r,...rab->...ab", H, dg)

    total = 0.5 * (-wave + p_part + gauge)
    return RicciBreakdown(wave_part=wave, p_part=p_part, gauge_part=gauge, total=total)


def wave_operator(g, f, pts, h=1e-2):
    """Scalar curved-space wave operator g^mn (d_m d_n f - Gamma^r_mn d_r f)."""
    gi = metric_inverse(g(pts), getattr(g, "det_floor", 1e-12))
    gamma = christoffels_fd(g, pts, h)
    df = f.partials(pts, h) if hasattr(f, "partials") else fd_partials(f, pts, h)
    d2f = (
        f.second_partials(pts, h)
        if hasattr(f, "second_partials")
        else fd_second_partials(f, pts, h)
    )
    return np.einsum("...mn,...mn->...", gi, d2f) - np.einsum(
        "...mn,...rmn,...r->...", gi, gamma, df
    )


### ---------------------------------------------------------------------
### stock metrics

_MINK = np.diag([-1.0, 1.0, 1.0, 1.0])


def minkowski():
    def fn(pts):
        pts = np.asarray(pts, dtype=float)
        return np.broadcast_to(_MINK, pts.shape[:-1] + (4, 4)).copy()

    def d1(pts):
        pts = np.asarray(pts, dtype=float)
        return np.zeros(pts.shape[:-1] + (4, 4, 4))

    def d2(pts):
        pts = np.asarray(pts, dtype=float)
        return np.zeros(pts.shape[:-1] + (4, 4, 4, 4))

    return LorentzMetricField(fn, d1=d1, d2=d2, name="minkowski")


def pp_wave_metric(profile):
    """Plane-fronted wave metric on the chart (u, v, y, z):
    g = profile(y, z) du^2 - (du dv + dv du) + dy^2 + dz^2.
    """

    def fn(pts):
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1] + (4, 4))
        out[..., 0, 0] = profile(pts[..., 2], pts[..., 3])
        out[..., 0, 1] = -1.0
        out[..., 1, 0] = -1.0
        out[..., 2, 2] = 1.0
        out[..., 3, 3] = 1.0
        return out

    return LorentzMetricField(fn, name="pp-wave")


def diag_bump_metric(amps, waves, phases):
    """Minkowski plus small sinusoidal bumps: a smooth invertible test metric.

    amps: (n, 4, 4) symmetric component amplitudes; waves: (n, 4) wavevectors;
    phases: (n,) offsets. Used by the FD cross-check ensembles.
    """
    amps = symmetrize_exact(np.asarray(amps, dtype=float))
    waves = np.asarray(waves, dtype=float)
    phases = np.asarray(phases, dtype=float)

    def fn(pts):
        pts = np.asarray(pts, dtype=float)
        th = pts @ waves.T + phases  # (..., n)
        return _MINK + np.einsum("...n,nab->...ab", np.sin(th), amps)

    def d1(pts):
        pts = np.asarray(pts, dtype=float)
        th = pts @ waves.T + phases
        return np.einsum("...n,nm,nab->...mab", np.cos(th), waves, amps)

    def d2(pts):
        pts = np.asarray(pts, dtype=float)
        th = pts @ waves.T + phases
        return np.einsum("...n,nm,nk,nab->...mkab", -np.sin(th), waves, waves, amps)

    return LorentzMetricField(fn, d1=d1, d2=d2, name="diag-bump")
