"""Characteristic flow and tensor transport along null phase rays.

The transport operator acting on tensors is ``-2 D_L + (box u)`` where ``L``
is minus the raised phase gradient.  Solving ``(-2 D_L + box u) T = S``
reduces to an ODE along the integral curves of ``L``; both the curves and
the carried tensors are marched with classical RK4, parametrized by
coordinate time (dividing the ray velocity through by ``L^0 > 0``, which
future-directedness guarantees).  A slice-level evaluator recovers the time
derivative of transported data at t = 0 from purely spatial information,
which is what the initial-data construction consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import polarization as po
from .phases import DegeneratePhase, build_null_frame

### blow-up threshold for the carried values
BLOWUP_NORM = 1e12

### finite-difference stencil shared with the geometry block (fourth order)
_OFFSETS = (-2.0, -1.0, 1.0, 2.0)
_WEIGHTS = (1.0 / 12.0, -8.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0)


class Diverged(Exception):
    """Carried values exceeded the blow-up threshold during integration."""


### ---------------------------------------------------------------------
### ray data

def _ray_data(phase, metric, pts, h):
    """Ray vector L, Christoffels, and wave factor (box u) at spacetime pts."""
    du = phase.du(pts, h)
    gi = metric.inverse(pts)
    ell = -np.einsum("...ab,...b->...a", gi, du)
    ell0 = ell[..., 0]
    if not np.all(np.isfinite(ell0)) or np.any(ell0 <= 1e-13):
        raise DegeneratePhase(
            "ray velocity is not future-directed in coordinate time"
        )
    gamma = geo.christoffel_from_partials(metric.partials(pts, h), gi)
    d2u = phase.u.second_partials(pts, h)
    boxu = np.einsum("...ab,...ab->...", gi, d2u) - np.einsum(
        "...ab,...rab,...r->...", gi, gamma, du
    )
    return ell, gamma, boxu


def _embed(t, xs):
    """Spatial points (n, 3) -> spacetime points (n, 4) at common time t."""
    xs = np.asarray(xs, dtype=float)
    col = np.full(xs.shape[:-1] + (1,), float(t))
    return np.concatenate([col, xs], axis=-1)


@dataclass
class CharacteristicBundle:
    """Rays of one phase sampled on a shared coordinate-time grid.

    ``points[k, i]`` is the spacetime position of curve i at ``times[k]``;
    curves that left the domain box are frozen at their last in-box sample
    and flagged, with ``last_step`` the index of that sample.  ``values``
    holds carried tensors (time index first) once a transport solve has
    been attached.
    """

    phase_label: str
    times: np.ndarray
    points: np.ndarray
    dt: float
    truncated: np.ndarray
    last_step: np.ndarray
    values: np.ndarray | None = None

    @property
    def footpoints(self):
        return self.points[0, :, 1:]

    def alive(self, k):
        """Mask of curves whose sample at time index k is valid."""
        return self.last_step >= k

    @property
    def endpoints(self):
        return self.points[-1]


def _march(phase, metric, footpoints, dt, t_span, h, box, tensor0, source, t0=0.0):
    """Joint RK4 march of ray positions and (optionally) carried values."""
    x = np.asarray(footpoints, dtype=float).copy()
    if x.ndim != 2 or x.shape[-1] != 3:
        raise ValueError("footpoints must be an (n, 3) array of slice points")
    n = x.shape[0]
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n_steps = max(1, int(round(abs(t_span) / dt)))
    step = t_span / n_steps

    T = None
    if tensor0 is not None:
        T = np.asarray(
            tensor0(_embed(t0, x)) if callable(tensor0) else tensor0,
            dtype=float,
        ).copy()
        if T.shape[:1] != (n,) or T.ndim not in (1, 3):
            raise ValueError("initial values must be (n,) scalars or (n, 4, 4) tensors")
    rank2 = T is not None and T.ndim == 3

    times = t0 + np.array([k * step for k in range(n_steps + 1)])
    pts_hist = np.empty((n_steps + 1, n, 4))
    pts_hist[0] = _embed(t0, x)
    val_hist = None
    if T is not None:
        val_hist = np.empty((n_steps + 1,) + T.shape)
        val_hist[0] = T

    active = np.ones(n, dtype=bool)
    last = np.full(n, n_steps, dtype=int)

    def rhs(tau, xs, Ts):
        ell, gamma, boxu = _ray_data(phase, metric, _embed(tau, xs), h)
        ell0 = ell[..., 0]
        v = ell[..., 1:] / ell0[..., None]
        v = np.where(active[:, None], v, 0.0)
        if Ts is None:
            return v, None
        if rank2:
            sval = 0.0 if source is None else source(_embed(tau, xs))
            corr = np.einsum("...a,...ram,...rn->...mn", ell, gamma, Ts)
            corr = corr + np.swapaxes(corr, -1, -2)
            dT = (0.5 * (boxu[..., None, None] * Ts - sval) + corr) / ell0[..., None, None]
            dT = np.where(active[:, None, None], dT, 0.0)
        else:
            sval = 0.0 if source is None else source(_embed(tau, xs))
            dT = 0.5 * (boxu * Ts - sval) / ell0
            dT = np.where(active, dT, 0.0)
        return v, dT

    def add(base, k_slope, fac):
        return None if base is None else base + fac * k_slope

    for k in range(n_steps):
        t = times[k]
        k1v, k1T = rhs(t, x, T)
        k2v, k2T = rhs(t + 0.5 * step, x + 0.5 * step * k1v, add(T, k1T, 0.5 * step))
        k3v, k3T = rhs(t + 0.5 * step, x + 0.5 * step * k2v, add(T, k2T, 0.5 * step))
        k4v, k4T = rhs(t + step, x + step * k3v, add(T, k3T, step))
        x_new = x + (step / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        if T is not None:
            T_new = T + (step / 6.0) * (k1T + 2.0 * k2T + 2.0 * k3T + k4T)
            if np.max(np.abs(T_new)) > BLOWUP_NORM:
                raise Diverged(
                    f"carried values exceeded {BLOWUP_NORM:g} at t={times[k + 1]:g}"
                )
        else:
            T_new = None

        if box is not None:
            lo, hi = box
            exited = active & np.any((x_new < lo) | (x_new > hi), axis=-1)
            if np.any(exited):
                ### freeze at the last in-box sample and flag
                x_new[exited] = x[exited]
                if T_new is not None:
                    T_new[exited] = T[exited]
                last[exited] = k
                active[exited] = False
        x = x_new
        T = T_new
        pts_hist[k + 1] = _embed(times[k + 1], x)
        if val_hist is not None:
            val_hist[k + 1] = T

    bundle = CharacteristicBundle(
        phase_label=phase.label,
        times=times,
        points=pts_hist,
        dt=step,
        truncated=~active,
        last_step=last,
        values=val_hist,
    )
    return bundle


def flow_characteristics(phase, metric, footpoints, dt, t_end, h=1e-2, box=None):
    """Integrate the rays of a phase from slice footpoints up to t_end.

    Footpoints are spatial (n, 3) points on the t = 0 slice; the returned
    bundle records positions on the shared time grid.  ``box`` is an
    optional (lo, hi) pair of spatial bounds: curves leaving it are frozen
    and flagged as truncated rather than evaluated outside the domain.
    """
    return _march(phase, metric, footpoints, dt, t_end, h, box, None, None)


def solve_transport(phase, metric, tensor0, footpoints, dt, t_end, source=None,
                    h=1e-2, box=None):
    """March ``(-2 D_L + box u) T = S`` along the rays of a phase.

    ``tensor0`` gives initial values at the footpoints: an (n,) array for
    scalar transport, an (n, 4, 4) array for symmetric rank-2 transport, or
    a callable evaluated at the embedded footpoints.  ``source`` is an
    optional callable of spacetime points returning values of the same
    shape.  Covariant corrections use finite-difference Christoffels; the
    march raises Diverged past a max-norm of 1e12.
    """
    if tensor0 is None:
        raise ValueError("solve_transport requires initial values")
    return _march(phase, metric, footpoints, dt, t_end, h, box, tensor0, source)


def geodesic_residual(bundle, phase, metric, h=1e-2):
    """Max norm of the ray field's self-acceleration D_L L along the bundle.

    Vanishes identically for exactly eikonal phases; otherwise measures how
    far the recorded curves sit from true geodesics of the background.
    """
    worst = 0.0
    for k in range(bundle.times.shape[0]):
        mask = bundle.alive(k)
        if not np.any(mask):
            continue
        pts = bundle.points[k][mask]
        du = phase.du(pts, h)
        d2u = phase.u.second_partials(pts, h)
        gi = metric.inverse(pts)
        dg = metric.partials(pts, h)
        ell = -np.einsum("...ab,...b->...a", gi, du)
        ### d_b L^r = -d_b g^{ra} d_a u - g^{ra} d_b d_a u
        dgi = -np.einsum("...rm,...an,...bmn->...bra", gi, gi, dg)
        dell = -np.einsum("...bra,...a->...br", dgi, du) - np.einsum(
            "...ra,...ba->...br", gi, d2u
        )
        gamma = geo.christoffel_from_partials(dg, gi)
        acc = np.einsum("...a,...ar->...r", ell, dell) + np.einsum(
            "...rab,...a,...b->...r", gamma, ell, ell
        )
        worst = max(worst, float(np.max(np.abs(acc))))
    return worst


def propagation_audit(bundle, phase, metric, density=None, h=1e-2):
    """Residual time series of the carried tensor's algebraic normalizations.

    For a bundle produced by a rank-2 transport solve, returns max-norm
    series over the live curves of: the polarization one-form of the carried
    tensor against the phase gradient, the mixed null-frame component
    contracting the ray vector with its conjugate, and (when a transported
    density history is supplied) the defect between the signed square norm
    and eight times the squared density.
    """
    if bundle.values is None or bundle.values.ndim != 4:
        raise ValueError("propagation_audit needs a bundle carrying rank-2 values")
    nt = bundle.times.shape[0]
    pol_series = np.zeros(nt)
    mixed_series = np.zeros(nt)
    back_series = np.zeros(nt) if density is not None else None
    for k in range(nt):
        mask = bundle.alive(k)
        if not np.any(mask):
            continue
        pts = bundle.points[k][mask]
        f1 = bundle.values[k][mask]
        du = phase.du(pts, h)
        gi = metric.inverse(pts)
        pol_series[k] = float(np.max(np.abs(po.pol(f1, du, gi))))
        frame = build_null_frame(phase, metric, pts, h)
        mixed = np.einsum("...ab,...a,...b->...", f1, frame.L, frame.Lbar)
        mixed_series[k] = float(np.max(np.abs(mixed)))
        if back_series is not None:
            sq = geo.tensor_dot(f1, f1, gi)
            dens = np.asarray(density)[k][mask]
            back_series[k] = float(np.max(np.abs(sq - 8.0 * dens**2)))
    out = {
        "times": bundle.times,
        "polarization": pol_series,
        "transversality": mixed_series,
    }
    if back_series is not None:
        out["backreaction"] = back_series
    return out


def transport_evaluate(phase, metric, tensor0, t, pts3, dt, source=None, h=1e-2):
    """Evaluate transported data at off-characteristic points by inverse flow.

    Rays are integrated backward from (t, pts3) to the initial slice, initial
    values are read off there from the callable ``tensor0``, and the
    transport ODE is then marched forward along the recovered curves.  Exact
    for flat plane phases, where the inverse flow is a rigid shift.  Returns
    (values at the query points, max round-trip position error).
    """
    pts3 = np.asarray(pts3, dtype=float)
    if float(t) == 0.0:
        return np.asarray(tensor0(_embed(0.0, pts3)), dtype=float), 0.0

    ### backward position-only march from (t, x) down to the initial slice
    back = _march(phase, metric, pts3, dt, -float(t), h, None, None, None, t0=float(t))
    feet = back.points[-1][:, 1:]
    fwd = _march(phase, metric, feet, dt, float(t), h, None, tensor0, source)
    roundtrip = float(np.max(np.abs(fwd.points[-1][:, 1:] - pts3)))
    vals = fwd.values[-1]
    return vals, roundtrip


### ---------------------------------------------------------------------
### slice-level time derivative

def slice_phase_inputs(phase, metric, pts3, h=1e-2, adapt_tol=1e-8):
    """Slice normal, gradient norm, Christoffels, and wave factor at t = 0.

    Requires the background to have unit lapse and zero shift on the initial
    slice (the time axis is the unit slice normal there) and the phase
    gradient to be future-null on it; violations raise.  The slice normal
    of the phase is the normalized raised spatial gradient.
    """
    pts3 = np.asarray(pts3, dtype=float)
    p4 = _embed(0.0, pts3)
    gval = metric(p4)
    lapse_err = float(np.max(np.abs(gval[..., 0, 0] + 1.0)))
    shift_err = float(np.max(np.abs(gval[..., 0, 1:])))
    if lapse_err > adapt_tol or shift_err > adapt_tol:
        raise ValueError(
            "background is not slice-adapted at t=0 "
            f"(lapse defect {lapse_err:.2e}, shift defect {shift_err:.2e})"
        )
    gi = metric.inverse(p4)
    du = phase.du(p4, h)
    w2 = np.einsum("...ij,...i,...j->...", gi[..., 1:, 1:], du[..., 1:], du[..., 1:])
    if np.any(w2 <= 1e-24):
        raise DegeneratePhase("vanishing spatial phase gradient on the slice")
    w = np.sqrt(w2)
    null_err = float(np.max(np.abs(du[..., 0] - w)))
    if null_err > adapt_tol * (1.0 + float(np.max(w))):
        raise DegeneratePhase(
            f"phase gradient is not future-null on the slice (defect {null_err:.2e})"
        )
    n_vec = np.einsum("...ij,...j->...i", gi[..., 1:, 1:], du[..., 1:]) / w[..., None]
    gamma = geo.christoffel_from_partials(metric.partials(p4, h), gi)
    d2u = phase.u.second_partials(p4, h)
    boxu = np.einsum("...ab,...ab->...", gi, d2u) - np.einsum(
        "...ab,...rab,...r->...", gi, gamma, du
    )
    return n_vec, w, gamma, boxu


def dt_from_slice_data(tensor0, dtensor0, source0, n_vec, grad_norm, gamma, boxu):
    """Time derivative of transported data from prepared slice arrays.

    Literal evaluation of: the spatial advection along the phase's slice
    normal, plus the Christoffel correction contracted with the vector
    (1, -N) and symmetrized over the free pair without the half, plus the
    wave factor times the data over twice the gradient norm, minus the
    source over twice the gradient norm.
    """
    w = np.asarray(grad_norm, dtype=float)
    if np.any(w <= 1e-24):
        raise DegeneratePhase("vanishing spatial phase gradient on the slice")
    T0 = np.asarray(tensor0, dtype=float)
    adv = np.einsum("...i,...imn->...mn", n_vec, dtensor0)
    V = np.concatenate([np.ones(n_vec.shape[:-1] + (1,)), -n_vec], axis=-1)
    corr = np.einsum("...a,...ram,...nr->...mn", V, gamma, T0)
    corr = corr + np.swapaxes(corr, -1, -2)
    out = adv + corr + (boxu / (2.0 * w))[..., None, None] * T0
    if source0 is not None:
        out = out - np.asarray(source0, dtype=float) / (2.0 * w)[..., None, None]
    return out


def _slice_partials(fn, pts3, h):
    """Fourth-order spatial partials of a slice field at t = 0: (..., 3, ...)."""
    pts3 = np.asarray(pts3, dtype=float)
    base = np.asarray(fn(_embed(0.0, pts3)), dtype=float)
    out = np.zeros(pts3.shape[:-1] + (3,) + base.shape[pts3.ndim - 1:])
    lead = (slice(None),) * (pts3.ndim - 1)
    for a in range(3):
        acc = 0.0
        for off, wgt in zip(_OFFSETS, _WEIGHTS):
            q = pts3.copy()
            q[..., a] += off * h
            acc = acc + wgt * np.asarray(fn(_embed(0.0, q)), dtype=float)
        out[lead + (a,)] = acc / h
    return out


def dt_from_transport(phase, metric, tensor0, pts3, source0=None, h=1e-2,
                      adapt_tol=1e-8):
    """Time derivative of slice data implied by the transport equation.

    ``tensor0`` is a callable returning the (n, 4, 4) slice tensor at
    spacetime points (only evaluated at t = 0); its spatial advection term
    uses fourth-order stencils in the slice directions.  ``source0``, if
    given, is a callable returning the transport source on the slice.
    """
    n_vec, w, gamma, boxu = slice_phase_inputs(phase, metric, pts3, h, adapt_tol)
    p4 = _embed(0.0, np.asarray(pts3, dtype=float))
    T0 = np.asarray(tensor0(p4), dtype=float)
    dT0 = _slice_partials(tensor0, pts3, h)
    S0 = None if source0 is None else np.asarray(source0(p4), dtype=float)
    return dt_from_slice_data(T0, dT0, S0, n_vec, w, gamma, boxu)
