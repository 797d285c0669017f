"""Cascade of profile equations for high-frequency metric ansatz stacks.

This module holds the *algebraic* layer of the construction: given background
data, phase gradients, null frames and profile values at a batch of points, it
evaluates

* the first-order compatibility one-forms whose vanishing selects admissible
  second-layer profiles (``v_tensors``),
* the interaction sources produced by products of first-layer profiles on
  sum/difference words (``i0pm``) and the resulting second-layer interaction
  profiles (``f2pm``),
* the frame-component prescription for third-layer self-interaction profiles
  (``g3h_assign``),
* the leading Ricci coefficient of the full stack, organised word-by-word
  (``r0_blocks``), together with the raw wave/quadratic/gauge pieces it
  recombines from (``order0_pieces``),
* the leading Hamiltonian/momentum constraint coefficients on the initial
  slice (``constraint_leading`` lives here too, once slice data is supplied).

Everything is plain ``numpy`` on batched arrays; derivative stacks follow the
geometry-module convention (derivative axes before component axes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .geometry import (
    LorentzMetricField,
    SymTensorField,
    minkowski,
    raise_lower,
    sym_pair,
    tensor_dot,
    tensor_trace,
)
from .phases import HarmonicWord, NullFrame, Phase, build_null_frame, plane_phase
from .polarization import pol, pv_apply, pv_solve


# ---------------------------------------------------------------------------
# small contractions used throughout
# ---------------------------------------------------------------------------


def _vec_slot(S: np.ndarray, v: np.ndarray) -> np.ndarray:
    """S_{v a}: contract the first slot of a symmetric 2-tensor with a vector."""
    return np.einsum("...ab,...a->...b", S, v)


def _scalar_slot(S: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """S_{v w}: full contraction with two vectors."""
    return np.einsum("...ab,...a,...b->...", S, v, w)


def _raised_contract(S: np.ndarray, v: np.ndarray, gi: np.ndarray) -> np.ndarray:
    """(S)^n_{v} = g^{nm} S_{m r} v^r as a batched vector."""
    return np.einsum("...nm,...mr,...r->...n", gi, S, v)


def norm_pair(gi: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """g^{ab} p_a q_b for batched one-forms."""
    return np.einsum("...ab,...a,...b->...", gi, p, q)


# ---------------------------------------------------------------------------
# compatibility one-forms and transport action
# ---------------------------------------------------------------------------


def q0(dF1: np.ndarray, g_inv: np.ndarray) -> np.ndarray:
    """Divergence-type one-form of a first-layer profile.

    Q_s = g^{mn} (d_m F1_{s n} - 1/2 d_s F1_{m n}) with the derivative stack
    ``dF1[..., m, a, b]`` holding the partial along axis ``m``.
    """
    t1 = np.einsum("...mn,...msn->...s", g_inv, dF1)
    t2 = np.einsum("...mn,...smn->...s", g_inv, dF1)
    return t1 - 0.5 * t2


def q0_covariant(
    dF1: np.ndarray, F1: np.ndarray, gamma: np.ndarray, g_inv: np.ndarray
) -> np.ndarray:
    """Same one-form written with covariant derivatives.

    On a background whose contracted Christoffels vanish the two transcriptions
    agree; keeping both guards the index bookkeeping.
    """
    ### D_m F1_ab = d_m F1_ab - G^r_ma F1_rb - G^r_mb F1_ar
    corr = np.einsum("...rma,...rb->...mab", gamma, F1)
    DF1 = dF1 - corr - np.einsum("...mab->...mba", corr)
    t1 = np.einsum("...mn,...msn->...s", g_inv, DF1)
    t2 = np.einsum("...mn,...smn->...s", g_inv, DF1)
    return t1 - 0.5 * t2


def transport_apply(
    Tval: np.ndarray,
    dT: np.ndarray,
    L: np.ndarray,
    gamma: np.ndarray,
    boxu: np.ndarray,
) -> np.ndarray:
    """Evaluate the transport operator -2 D_L T + (box u) T on a 2-tensor."""
    corr = np.einsum("...m,...rma,...rb->...ab", L, gamma, Tval)
    DLT = np.einsum("...m,...mab->...ab", L, dT) - corr - np.einsum("...ab->...ba", corr)
    return -2.0 * DLT + boxu[..., None, None] * Tval


def backreaction_residual(F1: np.ndarray, F: np.ndarray, g_inv: np.ndarray) -> np.ndarray:
    """|F1|^2 - 8 F^2: zero exactly on admissible seeds."""
    sq = tensor_dot(F1, F1, g_inv)
    return sq - 8.0 * F**2


def v_tensors(
    F21: np.ndarray,
    F22: np.ndarray,
    F1: np.ndarray,
    dF1: np.ndarray,
    du: np.ndarray,
    g_inv: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Compatibility one-forms for the two self-interaction second-layer slots.

    Both must vanish identically for a consistent stack:
      V21 = Pol(F21, u) + Q0(F1),
      V22 = Pol(F22, u) + (3/32)|F1|^2 du.
    """
    v21 = pol(F21, du, g_inv) + q0(dF1, g_inv)
    sq = tensor_dot(F1, F1, g_inv)
    v22 = pol(F22, du, g_inv) + (3.0 / 32.0) * sq[..., None] * du
    return {"V21": v21, "V22": v22}


# ---------------------------------------------------------------------------
# pair-word interaction blocks
# ---------------------------------------------------------------------------


def p0pm(
    F1A: np.ndarray,
    F1B: np.ndarray,
    duA: np.ndarray,
    duB: np.ndarray,
    LA: np.ndarray,
    LB: np.ndarray,
    sign: int,
    g_inv: np.ndarray,
) -> np.ndarray:
    """Quadratic-gradient interaction block on the word u_A +/- u_B."""
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    s = float(sign)
    dot = tensor_dot(F1A, F1B, g_inv)

    ### (F1A)_{L_B s} (F1B)_b{}^s
    xA = _vec_slot(F1A, LB)
    t1 = sym_pair(np.einsum("...a,...b->...ab", duA,
                            np.einsum("...s,...sn,...bn->...b", xA, g_inv, F1B)))
    xB = _vec_slot(F1B, LA)
    t2 = sym_pair(np.einsum("...a,...b->...ab", duB,
                            np.einsum("...s,...sn,...bn->...b", xB, g_inv, F1A)))
    t3 = 0.5 * dot[..., None, None] * sym_pair(np.einsum("...a,...b->...ab", duA, duB))
    yA = _vec_slot(F1A, LB)   # (F1A)_{a L_B} = (F1A)_{L_B a} by symmetry
    zB = _vec_slot(F1B, LA)
    t4 = sym_pair(np.einsum("...a,...b->...ab", yA, zB))
    mix = np.einsum("...an,...nm,...mb->...ab", F1A, g_inv, F1B)
    t5 = norm_pair(g_inv, duA, duB)[..., None, None] * sym_pair(mix)
    return 0.25 * (s * t1 + s * t2 + s * t3 + s * t4 - s * t5)


def i0pm(
    F1A: np.ndarray,
    F1B: np.ndarray,
    duA: np.ndarray,
    duB: np.ndarray,
    LA: np.ndarray,
    LB: np.ndarray,
    sign: int,
    g_inv: np.ndarray,
) -> np.ndarray:
    """Full interaction source on the word u_A +/- u_B.

    Built so that its polarization one-form along the word vanishes; the
    second-layer pair profile is then solvable by ``f2pm``.
    """
    s = float(sign)
    dv = duA + s * duB
    dot = tensor_dot(F1A, F1B, g_inv)

    head = -0.25 * (
        _scalar_slot(F1B, LA, LA)[..., None, None] * F1A
        + _scalar_slot(F1A, LB, LB)[..., None, None] * F1B
    )
    p_block = p0pm(F1A, F1B, duA, duB, LA, LB, sign, g_inv)

    vecBA = _raised_contract(F1B, LA, g_inv)            # (F1B)^n_{L_A}
    w1 = np.einsum("...n,...nb->...b", vecBA, F1A)
    vecAB = _raised_contract(F1A, LB, g_inv)
    w2 = np.einsum("...n,...nb->...b", vecAB, F1B)
    bracket = -0.125 * dot[..., None] * dv - 0.25 * w1 - s * 0.25 * w2
    tail = sym_pair(np.einsum("...a,...b->...ab", dv, bracket))
    return head + p_block + tail


def f2pm(
    F1A: np.ndarray,
    F1B: np.ndarray,
    duA: np.ndarray,
    duB: np.ndarray,
    LA: np.ndarray,
    LB: np.ndarray,
    sign: int,
    g_inv: np.ndarray,
    null_floor: float = 1e-10,
) -> np.ndarray:
    """Second-layer pair profile: solve the oscillator equation on the word.

    Divides the interaction source by minus the squared gradient of the word;
    raises if the word is too close to null (``pv_solve`` guard).
    """
    s = float(sign)
    dv = duA + s * duB
    src = i0pm(F1A, F1B, duA, duB, LA, LB, sign, g_inv)
    return pv_solve(src, dv, g_inv, null_floor=null_floor)


# ---------------------------------------------------------------------------
# third-layer frame assignment
# ---------------------------------------------------------------------------


def g3h_assign(
    Rt: np.ndarray, frame: NullFrame, k: int, gval: np.ndarray
) -> np.ndarray:
    """Third-layer self-interaction profile from a residual one-form.

    Prescribes frame components so that the polarization one-form of the
    result along k-times the phase reproduces the residual:
      S_{LL} = -(1/k) Rt_L,  S_{L e_i} = -(1/k) Rt_{e_i},
      S_{e1 e1} = -(1/k) Rt_{Lbar},  all other frame components zero.
    """
    if k == 0:
        raise ValueError("harmonic index k must be nonzero")
    L, Lb, e1, e2 = frame.L, frame.Lbar, frame.e1, frame.e2
    rL = np.einsum("...a,...a->...", Rt, L)
    rE1 = np.einsum("...a,...a->...", Rt, e1)
    rE2 = np.einsum("...a,...a->...", Rt, e2)
    rLb = np.einsum("...a,...a->...", Rt, Lb)

    ### coframe: th_L = -Lbar_flat/2 picks out the L-component, etc.
    Lf = np.einsum("...ab,...b->...a", gval, L)
    Lbf = np.einsum("...ab,...b->...a", gval, Lb)
    e1f = np.einsum("...ab,...b->...a", gval, e1)
    e2f = np.einsum("...ab,...b->...a", gval, e2)
    thL = -0.5 * Lbf
    thE1 = e1f
    thE2 = e2f

    inv_k = 1.0 / float(k)
    out = -inv_k * rL[..., None, None] * np.einsum("...a,...b->...ab", thL, thL)
    out = out - inv_k * rE1[..., None, None] * sym_pair(
        np.einsum("...a,...b->...ab", thL, thE1)
    )
    out = out - inv_k * rE2[..., None, None] * sym_pair(
        np.einsum("...a,...b->...ab", thL, thE2)
    )
    out = out - inv_k * rLb[..., None, None] * np.einsum("...a,...b->...ab", thE1, thE1)
    return out


# ---------------------------------------------------------------------------
# admissible random samples
# ---------------------------------------------------------------------------


@dataclass
class PhaseSample:
    """Pointwise data for one phase of an admissible random sample."""

    direction: np.ndarray
    du: np.ndarray
    frame: NullFrame
    L: np.ndarray
    F: np.ndarray
    F1: np.ndarray


@dataclass
class AdmissibleSample:
    """Batched admissible data on a background metric value."""

    pts: np.ndarray
    gval: np.ndarray
    g_inv: np.ndarray
    phases: Dict[str, PhaseSample]

    def pair_data(self, a: str, b: str, sign: int):
        pa, pb = self.phases[a], self.phases[b]
        return pa, pb, pa.du + float(sign) * pb.du


def seed_values(
    F: np.ndarray, theta_plus: np.ndarray, theta_cross: np.ndarray, frame: NullFrame,
    gval: np.ndarray,
) -> np.ndarray:
    """First-layer profile value from density and polarization angles.

    F1 = F [th+ (e1 e1 - e2 e2) + thx (e1 e2 + e2 e1)] with flattened legs;
    normalisation th+^2 + thx^2 = 4 gives |F1|^2 = 8 F^2.
    """
    e1, e2 = frame.e1, frame.e2
    e1f = np.einsum("...ab,...b->...a", gval, e1)
    e2f = np.einsum("...ab,...b->...a", gval, e2)
    plus = np.einsum("...a,...b->...ab", e1f, e1f) - np.einsum("...a,...b->...ab", e2f, e2f)
    cross = sym_pair(np.einsum("...a,...b->...ab", e1f, e2f))
    amp_p = (F * theta_plus)[..., None, None]
    amp_x = (F * theta_cross)[..., None, None]
    return amp_p * plus + amp_x * cross


def sample_admissible(
    rng: np.random.Generator,
    n_phases: int = 2,
    n_points: int = 100,
    metric: Optional[LorentzMetricField] = None,
    box: float = 0.7,
    labels: Optional[Tuple[str, ...]] = None,
) -> AdmissibleSample:
    """Draw a batch of admissible pointwise data for identity tests.

    Directions are random distinct unit 3-vectors; densities and polarization
    angles are random smooth-free point values. All algebraic invariants of
    the first layer (transversality, tracelessness, normalisation) hold by
    construction, which the tests double-check.
    """
    if metric is None:
        metric = minkowski()
    if labels is None:
        labels = tuple(chr(ord("A") + i) for i in range(n_phases))
    pts = rng.uniform(-box, box, size=(n_points, 4))
    gval = metric(pts)
    gi = metric.inverse(pts)

    dirs = []
    while len(dirs) < n_phases:
        d = rng.normal(size=3)
        d = d / np.linalg.norm(d)
        if all(abs(d @ e) < 0.99 for e in dirs):
            dirs.append(d)

    phases: Dict[str, PhaseSample] = {}
    for lab, d in zip(labels, dirs):
        ph = plane_phase(d, label=lab)
        du = ph.du(pts)
        frame = build_null_frame(ph, metric, pts)
        F = rng.uniform(0.2, 1.0, size=n_points)
        chi = rng.uniform(0.0, 2.0 * np.pi, size=n_points)
        F1 = seed_values(F, 2.0 * np.cos(chi), 2.0 * np.sin(chi), frame, gval)
        phases[lab] = PhaseSample(
            direction=np.asarray(d), du=du, frame=frame, L=frame.L, F=F, F1=F1
        )
    return AdmissibleSample(pts=pts, gval=gval, g_inv=gi, phases=phases)


# ---------------------------------------------------------------------------
# literal order-0 pieces of the gauge-decomposed Ricci coefficient
# ---------------------------------------------------------------------------


def phase_block_data(
    phase: Phase,
    metric: LorentzMetricField,
    pts: np.ndarray,
    F1_field: SymTensorField,
    F: Optional[np.ndarray] = None,
    F21: Optional[np.ndarray] = None,
    F22: Optional[np.ndarray] = None,
    frak: Optional[np.ndarray] = None,
    h: float = 1e-2,
) -> "PhaseBlockData":
    """Evaluate one phase's inputs for the order-0 assembly at a point batch."""
    from .geometry import christoffel_from_partials

    du = phase.du(pts, h)
    d2u = phase.u.second_partials(pts, h)
    gi = metric.inverse(pts)
    dgv = metric.partials(pts, h)
    gamma = christoffel_from_partials(dgv, gi)
    boxu_red = np.einsum("...mn,...mn->...", gi, d2u)
    boxu_geom = boxu_red - np.einsum(
        "...mn,...rmn,...r->...", gi, gamma, du
    )
    L = -np.einsum("...ab,...b->...a", gi, du)
    F1 = F1_field(pts)
    dF1 = F1_field.partials(pts, h)
    if F is None:
        F = np.zeros(pts.shape[:-1])
    return PhaseBlockData(
        du=du,
        L=L,
        F1=F1,
        dF1=dF1,
        boxu_red=boxu_red,
        boxu_geom=boxu_geom,
        F=F,
        F21=F21,
        F22=F22,
        frak=frak,
    )


@dataclass
class PhaseBlockData:
    """Everything the order-0 assembly needs for one phase, at fixed points.

    ``boxu_red`` is the reduced wave operator g^{mn} d_m d_n u (no
    Christoffels); ``boxu_geom`` the geometric one. They coincide exactly on
    backgrounds with vanishing contracted Christoffels.
    """

    du: np.ndarray
    L: np.ndarray
    F1: np.ndarray
    dF1: np.ndarray
    boxu_red: np.ndarray
    boxu_geom: np.ndarray
    F: np.ndarray
    F21: Optional[np.ndarray] = None
    F22: Optional[np.ndarray] = None
    frak: Optional[np.ndarray] = None

    def slot(self, name: str) -> np.ndarray:
        val = getattr(self, name)
        if val is None:
            shape = self.F1.shape
            return np.zeros(shape)
        return val


def w0_single(pd: PhaseBlockData) -> np.ndarray:
    """Reduced-wave piece produced by the first-layer term: plain directional
    derivative along L minus the reduced wave operator of the phase."""
    LF1 = np.einsum("...m,...mab->...ab", pd.L, pd.dF1)
    return 2.0 * LF1 - pd.boxu_red[..., None, None] * pd.F1


def w0_pair(
    F2: np.ndarray, pa: PhaseBlockData, pb: PhaseBlockData, sign: int, g_inv: np.ndarray
) -> np.ndarray:
    """Reduced-wave piece on a pair word, including the frame-scalar coupling."""
    s = float(sign)
    dv = pa.du + s * pb.du
    qv = norm_pair(g_inv, dv, dv)
    head = -qv[..., None, None] * F2
    tail = 0.25 * (
        _scalar_slot(pb.F1, pa.L, pa.L)[..., None, None] * pa.F1
        + _scalar_slot(pa.F1, pb.L, pb.L)[..., None, None] * pb.F1
    )
    return head + tail


def p0_single(
    pd: PhaseBlockData, gamma: np.ndarray, dg: np.ndarray, g_inv: np.ndarray
) -> np.ndarray:
    """Quadratic-gradient piece linear in the background derivatives."""
    dup = np.einsum("...rs,...s->...r", g_inv, pd.du)
    G = np.einsum("...mar,...r,...bm->...ab", gamma, dup, pd.F1)
    t1 = -2.0 * sym_pair(G)
    F1up = np.einsum("...am,...bn,...mn->...ab", g_inv, g_inv, pd.F1)
    C = np.einsum("...mn,...mbn->...b", F1up, dg) - 0.5 * np.einsum(
        "...mn,...bmn->...b", F1up, dg
    )
    t2 = -sym_pair(np.einsum("...a,...b->...ab", pd.du, C))
    return t1 + t2


def p0_square(pd: PhaseBlockData, g_inv: np.ndarray) -> np.ndarray:
    """Quadratic-gradient piece on the doubled word."""
    sq = tensor_dot(pd.F1, pd.F1, g_inv)
    return 0.25 * sq[..., None, None] * np.einsum("...a,...b->...ab", pd.du, pd.du)


def h1_single(pd: PhaseBlockData, dg: np.ndarray, g_inv: np.ndarray) -> np.ndarray:
    """Gauge-vector contribution of the first-layer term (raised index)."""
    slot = pd.slot("frak") + pd.slot("F21")
    p = pol(slot, pd.du, g_inv)
    term1 = np.einsum("...rs,...s->...r", g_inv, p)
    term2 = np.einsum("...rs,...s->...r", g_inv, q0(pd.dF1, g_inv))
    F1up = np.einsum("...am,...bn,...mn->...ab", g_inv, g_inv, pd.F1)
    inner = np.einsum("...mn,...rs,...msn->...r", F1up, g_inv, dg) - 0.5 * np.einsum(
        "...mn,...rs,...smn->...r", F1up, g_inv, dg
    )
    return term1 + term2 - inner


def h1_double(pd: PhaseBlockData, g_inv: np.ndarray) -> np.ndarray:
    """Gauge-vector contribution of the doubled-word second-layer term."""
    p = pol(pd.slot("F22"), pd.du, g_inv)
    term1 = -2.0 * np.einsum("...rs,...s->...r", g_inv, p)
    sq = tensor_dot(pd.F1, pd.F1, g_inv)
    dup = np.einsum("...rs,...s->...r", g_inv, pd.du)
    return term1 - 0.25 * sq[..., None] * dup


def h1_pair(
    F2: np.ndarray, pa: PhaseBlockData, pb: PhaseBlockData, sign: int, g_inv: np.ndarray
) -> np.ndarray:
    """Gauge-vector contribution of a pair-word second-layer term."""
    s = float(sign)
    dv = pa.du + s * pb.du
    p = pol(F2, dv, g_inv)
    out = -np.einsum("...rs,...s->...r", g_inv, p)
    dot = tensor_dot(pa.F1, pb.F1, g_inv)
    dvp = np.einsum("...rs,...s->...r", g_inv, dv)
    out = out - 0.125 * dot[..., None] * dvp
    vecBA = _raised_contract(pb.F1, pa.L, g_inv)
    out = out - 0.25 * np.einsum("...n,...ns,...sr->...r", vecBA, pa.F1, g_inv)
    vecAB = _raised_contract(pa.F1, pb.L, g_inv)
    out = out - s * 0.25 * np.einsum("...n,...ns,...sr->...r", vecAB, pb.F1, g_inv)
    return out


# ---------------------------------------------------------------------------
# word-indexed leading Ricci coefficient
# ---------------------------------------------------------------------------

TrigKey = Tuple[str, str]  # (word string, "const" | "cos" | "sin")


def _flat(vec: np.ndarray, gval: np.ndarray) -> np.ndarray:
    return np.einsum("...ab,...b->...a", gval, vec)


def r0_analytic(
    phase_data: Dict[str, PhaseBlockData],
    pair_profiles: Dict[Tuple[str, str, int], np.ndarray],
    gval: np.ndarray,
    g_inv: np.ndarray,
    gamma: np.ndarray,
) -> Dict[TrigKey, np.ndarray]:
    """Word-by-word decomposition of twice the leading Ricci coefficient.

    Returns a dict keyed by (word, trig). The ``("1","const")`` entry is the
    non-oscillatory null-dust block; single-phase words carry a ``sin`` entry
    at the phase and a ``cos`` entry at the doubled phase; pair words carry
    ``cos`` entries folding both orderings of the underlying sum (twice the
    per-pair block). Missing second-layer slots count as zero.
    """
    labels = sorted(phase_data.keys())
    out: Dict[TrigKey, np.ndarray] = {}

    resonant = None
    for lab in labels:
        pd = phase_data[lab]
        sq = tensor_dot(pd.F1, pd.F1, g_inv)
        coeff = pd.F**2 - sq / 8.0
        block = 2.0 * coeff[..., None, None] * np.einsum(
            "...a,...b->...ab", pd.du, pd.du
        )
        resonant = block if resonant is None else resonant + block
    out[("1", "const")] = resonant

    for lab in labels:
        pd = phase_data[lab]
        ### sin(u/lambda): transported first layer plus compatibility sources
        script = transport_apply(
            pd.F1, pd.dF1, pd.L, gamma, pd.boxu_geom
        )
        bracket = pol(pd.slot("frak") + pd.slot("F21"), pd.du, g_inv) + q0(
            pd.dF1, g_inv
        )
        sin_block = script - sym_pair(
            np.einsum("...a,...b->...ab", pd.du, bracket)
        )
        out[(lab, "sin")] = sin_block

        ### cos(2u/lambda): doubled-word bracket
        sq = tensor_dot(pd.F1, pd.F1, g_inv)
        bracket2 = pol(pd.slot("F22"), pd.du, g_inv) + (3.0 / 32.0) * sq[
            ..., None
        ] * pd.du
        cos2 = -4.0 * sym_pair(np.einsum("...a,...b->...ab", pd.du, bracket2))
        word2 = f"2{lab}"
        out[(word2, "cos")] = cos2

    for i, la in enumerate(labels):
        for lb in labels[i + 1 :]:
            pa, pb = phase_data[la], phase_data[lb]
            for sign, wn in ((+1, f"{la}+{lb}"), (-1, f"{la}-{lb}")):
                F2 = pair_profiles.get((la, lb, sign))
                if F2 is None:
                    F2 = np.zeros_like(pa.F1)
                dv = pa.du + float(sign) * pb.du
                blk = -pv_apply(F2, dv, g_inv) + i0pm(
                    pa.F1, pb.F1, pa.du, pb.du, pa.L, pb.L, sign, g_inv
                )
                out[(wn, "cos")] = 2.0 * blk
    return out


### ------------------------------------------------------------------ slice
### leading constraint coefficients on the initial slice


def inverse_partials(gi3: np.ndarray, dg3: np.ndarray) -> np.ndarray:
    """Partials of the inverse 3-metric from partials of the metric."""
    return -np.einsum("...ia,...jb,...mab->...mij", gi3, gi3, dg3)


def raised_hessian(
    du3: np.ndarray, d2u3: np.ndarray, gi3: np.ndarray, dgi3: np.ndarray
) -> np.ndarray:
    """Successive raised-gradient derivative of a slice scalar.

    Computes g^{ia} d_a (g^{jb} d_b u): the raised-derivative operator applied
    twice, which differs from the plain raised Hessian by an inverse-metric
    gradient term.
    """
    plain = np.einsum("...ia,...jb,...ab->...ij", gi3, gi3, d2u3)
    extra = np.einsum("...ia,...ajb,...b->...ij", gi3, dgi3, du3)
    return plain + extra


def qbar_slice(
    F1: np.ndarray, dF1: np.ndarray, dg3: np.ndarray, gi3: np.ndarray
) -> np.ndarray:
    """Leading Christoffel perturbation of the oscillating slice metric.

    Qbar^k_ij = 1/2 [ g^{kl}(d_(i F1_j)l - d_l F1_ij)
                      - F1^{kl}(d_(i g_j)l - d_l g_ij) ],
    with un-normalised pair symmetrisation. Used for cross-checks: its trace
    vanishes and its phase-gradient contraction reproduces the raised-Hessian
    block of the leading Hamiltonian coefficient on admissible data.
    """
    t = np.einsum("...kl,...ijl->...kij", gi3, dF1)
    tsym = t + np.einsum("...kij->...kji", t)
    tlast = np.einsum("...kl,...lij->...kij", gi3, dF1)
    F1up = np.einsum("...ka,...lb,...ab->...kl", gi3, gi3, F1)
    s = np.einsum("...kl,...ijl->...kij", F1up, dg3)
    ssym = s + np.einsum("...kij->...kji", s)
    slast = np.einsum("...kl,...lij->...kij", F1up, dg3)
    return 0.5 * ((tsym - tlast) - (ssym - slast))


@dataclass
class SlicePhaseData:
    """Slice-restricted inputs for one phase of the leading constraints."""

    du3: np.ndarray        # spatial phase gradient components
    d2u3: np.ndarray       # spatial second partials of the phase
    grad_norm: np.ndarray  # |grad u| w.r.t. the slice metric
    F1: np.ndarray         # seed profile, spatial components
    dwF1: np.ndarray       # spatial partials of (|grad u| * F1)
    F: np.ndarray          # scalar density
    kappa11: Optional[np.ndarray] = None
    kappa12: Optional[np.ndarray] = None


@dataclass
class SliceData:
    """Slice background plus per-phase and per-pair profile values."""

    g3: np.ndarray
    gi3: np.ndarray
    dg3: np.ndarray
    k0: np.ndarray
    phases: Dict[str, SlicePhaseData]
    gamma2: Dict[Tuple[str, str, int], np.ndarray] = field(default_factory=dict)
    kappa1pm: Dict[Tuple[str, str, int], np.ndarray] = field(default_factory=dict)


def _pair_key(a: str, b: str, sign: int) -> Tuple[str, str, int]:
    """Canonical unordered key; difference words use the sorted-label order."""
    if a <= b:
        return (a, b, sign)
    return (b, a, sign)


def _word_name(a: str, b: str, sign: int) -> str:
    a2, b2, s2 = _pair_key(a, b, sign)
    return f"{a2}+{b2}" if s2 == +1 else f"{a2}-{b2}"


def constraint_leading(sd: SliceData) -> Dict[str, Dict[TrigKey, np.ndarray]]:
    """Leading Hamiltonian and momentum coefficients, organised word-by-word.

    Returns {"H": {...}, "M": {...}} keyed by (word, trig); "H" entries are
    scalars, "M" entries spatial one-forms. Pair-word entries accumulate both
    orderings of the underlying sums (see the pair-word bookkeeping note in
    the module docstring); product-trig rows are expanded onto the sum and
    difference words before accumulation.
    """
    gi3, dg3, k0 = sd.gi3, sd.dg3, sd.k0
    dgi3 = inverse_partials(gi3, dg3)
    k0up = np.einsum("...ia,...jb,...ab->...ij", gi3, gi3, k0)
    labels = sorted(sd.phases.keys())

    H: Dict[TrigKey, np.ndarray] = {}
    M: Dict[TrigKey, np.ndarray] = {}

    def acc(store, key, val):
        store[key] = val if key not in store else store[key] + val

    ### gauge-divergence scalar of the background slice metric
    Wvec = np.einsum("...aca->...c", dgi3) + 0.5 * np.einsum(
        "...ab,...cd,...dab->...c", gi3, gi3, dg3
    )

    for lab in labels:
        ph = sd.phases[lab]
        w = ph.grad_norm
        gradu = np.einsum("...ab,...b->...a", gi3, ph.du3)
        hess_up = raised_hessian(ph.du3, ph.d2u3, gi3, dgi3)
        slip = np.einsum("...l,...lij->...ij", gradu, dgi3)

        hsin = np.einsum(
            "...ij,...ij->...",
            ph.F1,
            hess_up - 0.5 * slip - w[..., None, None] * k0up,
        )
        acc(H, (lab, "sin"), hsin)
        acc(H, (f"2{lab}", "cos"), -6.0 * w**2 * ph.F**2)

        ### momentum, single-phase rows
        k11 = ph.kappa11 if ph.kappa11 is not None else np.zeros_like(ph.F1)
        k12 = ph.kappa12 if ph.kappa12 is not None else np.zeros_like(ph.F1)
        tr11 = np.einsum("...ab,...ab->...", gi3, k11)
        msin = ph.du3 * tr11[..., None] - np.einsum("...ai,...a->...i", k11, gradu)
        msin = msin + 0.5 * np.einsum("...ba,...abi->...i", gi3, ph.dwF1)
        msin = msin + 0.25 * w[..., None] * np.einsum(
            "...bc,...ibc->...i", ph.F1, dgi3
        )
        msin = msin + 0.5 * w[..., None] * np.einsum("...ic,...c->...i", ph.F1, Wvec)
        msin = msin - 0.5 * ph.du3 * np.einsum(
            "...bc,...bc->...", ph.F1, k0up
        )[..., None]
        acc(M, (lab, "sin"), msin)

        tr12 = np.einsum("...ab,...ab->...", gi3, k12)
        mcos2 = (
            2.0 * np.einsum("...ai,...a->...i", k12, gradu)
            - 2.0 * ph.du3 * tr12[..., None]
            + 3.0 * (w * ph.F**2)[..., None] * ph.du3
        )
        acc(M, (f"2{lab}", "cos"), mcos2)

    ### ordered pair sums
    for la in labels:
        for lb in labels:
            if la == lb:
                continue
            pa, pb = sd.phases[la], sd.phases[lb]
            gradA = np.einsum("...ab,...b->...a", gi3, pa.du3)
            gradB = np.einsum("...ab,...b->...a", gi3, pb.du3)
            wa, wb = pa.grad_norm, pb.grad_norm
            dot = np.einsum(
                "...ac,...bd,...ab,...cd->...", gi3, gi3, pa.F1, pb.F1
            )
            ip = np.einsum("...a,...a->...", gradA, pb.du3)
            K = np.einsum(
                "...ib,...b,...ij,...ja,...a->...", pa.F1, gradB, gi3, pb.F1, gradA
            )

            ### rows carrying explicit pair-word trig factors (ordered sum,
            ### so each unordered word receives both orderings)
            for s in (+1, -1):
                wn = _word_name(la, lb, s)
                dv = pa.du3 + s * pb.du3
                gradv = gradA + s * gradB
                qv = np.einsum("...a,...a->...", gradv, dv)

                g2 = sd.gamma2.get(_pair_key(la, lb, s))
                if g2 is not None:
                    trg = np.einsum("...ab,...ab->...", gi3, g2)
                    gvv = np.einsum("...ab,...a,...b->...", g2, gradv, gradv)
                    acc(H, (wn, "cos"), qv * trg - gvv)
                block = 2.0 * s * K + dot * (
                    -2.0 * wa**2 - 2.0 * wb**2 - 3.0 * s * ip + s * wa * wb
                )
                acc(H, (wn, "cos"), block / 8.0)

                k1 = sd.kappa1pm.get(_pair_key(la, lb, s))
                if k1 is not None:
                    trk = np.einsum("...ab,...ab->...", gi3, k1)
                    mrow = np.einsum("...ai,...a->...i", k1, gradv) - dv * trk[
                        ..., None
                    ]
                    acc(M, (wn, "cos"), mrow)

            ### product-trig rows of the momentum block, expanded onto words:
            ### cos cos -> +1/2 on both words; sin sin -> +1/2 diff, -1/2 sum
            r1 = -0.5 * wb[..., None] * (
                np.einsum("...bm,...mc,...c,...bi->...i", gi3, pa.F1, gradB, pb.F1)
                - pb.du3 * dot[..., None]
            )
            r2 = -0.25 * (wb * dot)[..., None] * pa.du3
            acc(M, (_word_name(la, lb, +1), "cos"), 0.5 * r1 - 0.5 * r2)
            acc(M, (_word_name(la, lb, -1), "cos"), 0.5 * r1 + 0.5 * r2)

    return {"H": H, "M": M}


def order0_pieces(
    phase_data: Dict[str, PhaseBlockData],
    pair_profiles: Dict[Tuple[str, str, int], np.ndarray],
    gval: np.ndarray,
    g_inv: np.ndarray,
    gamma: np.ndarray,
    dg: np.ndarray,
) -> Dict[TrigKey, Dict[str, np.ndarray]]:
    """Literal wave/quadratic/gauge pieces per word, plus their recombination.

    Each entry holds the raw pieces ``{"wave","quad","gauge","combined"}``
    where ``combined`` = -wave + quad + gauge-coupling. Pair entries are kept
    per ordered pair (NOT folded); on backgrounds whose contracted
    Christoffels vanish, ``combined`` matches the corresponding
    ``r0_analytic`` entry directly for single-phase words and after a factor
    2 for pair words.
    """
    labels = sorted(phase_data.keys())
    out: Dict[TrigKey, Dict[str, np.ndarray]] = {}

    for lab in labels:
        pd = phase_data[lab]
        w = w0_single(pd)
        p = p0_single(pd, gamma, dg, g_inv)
        hvec = h1_single(pd, dg, g_inv)
        hf = _flat(hvec, gval)
        coupling = -sym_pair(np.einsum("...a,...b->...ab", pd.du, hf))
        out[(lab, "sin")] = {
            "wave": w,
            "quad": p,
            "gauge": hvec,
            "combined": -w + p + coupling,
        }

        p2 = p0_square(pd, g_inv)
        h2 = h1_double(pd, g_inv)
        h2f = _flat(h2, gval)
        coupling2 = 2.0 * sym_pair(np.einsum("...a,...b->...ab", pd.du, h2f))
        out[(f"2{lab}", "cos")] = {
            "wave": np.zeros_like(p2),
            "quad": p2,
            "gauge": h2,
            "combined": p2 + coupling2,
        }

    for i, la in enumerate(labels):
        for lb in labels[i + 1 :]:
            pa, pb = phase_data[la], phase_data[lb]
            for sign, wn in ((+1, f"{la}+{lb}"), (-1, f"{la}-{lb}")):
                F2 = pair_profiles.get((la, lb, sign))
                if F2 is None:
                    F2 = np.zeros_like(pa.F1)
                dv = pa.du + float(sign) * pb.du
                w = w0_pair(F2, pa, pb, sign, g_inv)
                p = p0pm(pa.F1, pb.F1, pa.du, pb.du, pa.L, pb.L, sign, g_inv)
                hvec = h1_pair(F2, pa, pb, sign, g_inv)
                hf = _flat(hvec, gval)
                coupling = sym_pair(np.einsum("...a,...b->...ab", dv, hf))
                out[(wn, "cos")] = {
                    "wave": w,
                    "quad": p,
                    "gauge": hvec,
                    "combined": -w + p + coupling,
                }
    return out
