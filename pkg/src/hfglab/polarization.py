"""Polarization algebra: transversality defects, the phase-direction symbol
with its inverse, and the two slice projectors used by the initial-data
construction.

All operations are pointwise numpy array functions batched over leading
dimensions. Spacetime tensors use (...,4,4)/(...,4) shapes; slice tensors
use (...,3,3)/(...,3) with the slice metric passed explicitly. Vectors carry
raised indices unless a name says otherwise.
"""

from __future__ import annotations

import numpy as np

from .geometry import sym_pair

__all__ = [
    "NullDirectionUnsolvable",
    "NotInRange",
    "pol",
    "pv_apply",
    "pv_solve",
    "pbar1",
    "pbar2",
    "ntilde_otimes",
    "frame_components",
]


class NullDirectionUnsolvable(Exception):
    """The inversion divisor g^-1(dv,dv) is too close to null."""


class NotInRange(Exception):
    """Requested inverse of a tensor outside the symbol's range."""


def pol(S, dv, g_inv):
    """Transversality defect one-form of S against the direction dv:

    pol(S, v)_a = g^mn S_am d_n v - (1/2) (tr S) d_a v

    Vanishes exactly on tensors transverse-traceless for the phase v.
    """
    up = np.einsum("...mn,...n->...m", g_inv, dv)
    tr = np.einsum("...mn,...mn->...", g_inv, S)
    return np.einsum("...am,...m->...a", S, up) - 0.5 * tr[..., None] * dv


def pv_apply(S, dv, g_inv):
    """Phase-direction symbol acting on S:

    out_ab = -g^-1(dv,dv) S_ab + dv_(a pol(S,v)_b)

    with the un-normalized pair symmetrization.
    """
    q = np.einsum("...mn,...m,...n->...", g_inv, dv, dv)
    p = pol(S, dv, g_inv)
    return -q[..., None, None] * S + sym_pair(np.einsum("...a,...b->...ab", dv, p))


def pv_solve(A, dv, g_inv, null_floor=1e-10, range_tol=1e-10):
    """Inverse of the phase-direction symbol on its range:

    if pol(A, v) = 0 and g^-1(dv,dv) is bounded away from zero, then
    S = -A / g^-1(dv,dv) satisfies pv_apply(S) = A.

    Raises NullDirectionUnsolvable near the light cone and NotInRange when
    the defect of A is not negligible against its size.
    """
    A = np.asarray(A, dtype=float)
    q = np.einsum("...mn,...m,...n->...", g_inv, dv, dv)
    if np.any(np.abs(q) < null_floor):
        raise NullDirectionUnsolvable(
            f"min |g^-1(dv,dv)| = {float(np.abs(q).min()):.3e} below {null_floor:.1e}"
        )
    defect = pol(A, dv, g_inv)
    scale = np.sqrt(np.sum(A * A, axis=(-1, -2)))
    worst = float(np.max(np.linalg.norm(defect, axis=-1) - range_tol * (1.0 + scale)))
    if worst > 0:
        raise NotInRange(f"defect exceeds tolerance by {worst:.3e}")
    return -A / q[..., None, None]


def pbar1(S, n_vec, g3, g3_inv):
    """Slice projector matching the trace to the double-normal component:

    out = S - (1/2)(tr S - S_NN) g

    Idempotent; its range is the set of tensors with tr S = S(N,N).
    """
    tr = np.einsum("...ij,...ij->...", g3_inv, S)
    snn = np.einsum("...ij,...i,...j->...", S, n_vec, n_vec)
    return S - 0.5 * (tr - snn)[..., None, None] * g3


def pbar2(S, n_vec, g3, g3_inv):
    """Slice projector matching the normal flux to the trace:

    out_ij = S_ij + N_(i (N_j) tr S - S_N j)) - (1/2)(tr S - S_NN) g_ij

    Idempotent; its range is the set of tensors with (tr S) N = S(N, .).
    """
    tr = np.einsum("...ij,...ij->...", g3_inv, S)
    snn = np.einsum("...ij,...i,...j->...", S, n_vec, n_vec)
    n_flat = np.einsum("...ij,...j->...i", g3, n_vec)
    s_n = np.einsum("...ij,...i->...j", S, n_vec)  # one-form S_Nj
    inner = tr[..., None] * n_flat - s_n
    return (
        S
        + sym_pair(np.einsum("...i,...j->...ij", n_flat, inner))
        - 0.5 * (tr - snn)[..., None, None] * g3
    )


def ntilde_otimes(n_vec, x_vec, g3):
    """Compensated symmetric product of two slice vectors:

    (N, X) -> N_(i X_j) - (1/2) g(N,X) g_ij
    """
    n_flat = np.einsum("...ij,...j->...i", g3, n_vec)
    x_flat = np.einsum("...ij,...j->...i", g3, x_vec)
    xn = np.einsum("...i,...i->...", n_flat, x_vec)
    return sym_pair(np.einsum("...i,...j->...ij", n_flat, x_flat)) - 0.5 * xn[
        ..., None, None
    ] * g3


def frame_components(S, frame, gval=None):
    """Components of a rank-2 tensor in the legs of a null frame.

    S is given with lowered indices, the frame legs with raised ones, so no
    metric is needed; returns a dict keyed 'LL', 'LLbar', ..., 'e2e2'.
    """
    legs = frame.legs()
    out = {}
    for na, va in legs.items():
        for nb, vb in legs.items():
            out[f"{na},{nb}"] = np.einsum("...ab,...a,...b->...", S, va, vb)
    return out
