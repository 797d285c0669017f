"""Eikonal phase families, null frames, and harmonic word lattices.

A phase is a scalar function u with null gradient; its label indexes one
traveling-wave family. Integer combinations of phase labels ("words") index
the oscillation frequencies that products of waves can populate; the word
lattices collect the patterns reachable at each expansion order, and the
margin scan measures how far pair words stay from the light cone
(coherence) and from spatial stationarity.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import ScalarField, fd_partials, christoffels_fd

__all__ = [
    "InvalidDirection",
    "DegeneratePhase",
    "EikonalViolated",
    "Phase",
    "NullFrame",
    "HarmonicWord",
    "plane_phase",
    "radial_phase",
    "eikonal_residual",
    "build_null_frame",
    "harmonic_lattice",
    "pair_words",
    "scan_words",
    "coherence_margins",
    "geodesic_residual",
]


class InvalidDirection(Exception):
    """Zero or otherwise unusable propagation direction."""


class DegeneratePhase(Exception):
    """Vanishing spatial gradient where a unit normal is required."""


class EikonalViolated(Exception):
    """Phase gradient is not null to the required tolerance."""


@dataclass
class Phase:
    """One traveling phase: label, scalar field u, reference direction."""

    label: str
    u: ScalarField
    direction: np.ndarray | None = None

    def du(self, pts, h=1e-2):
        return self.u.partials(pts, h)


def plane_phase(direction, label="A"):
    """Linear phase u = t - z.x for a unit spatial direction z.

    Exactly eikonal on the flat background; gradient (1, -z).
    """
    d = np.asarray(direction, dtype=float)
    nrm = float(np.linalg.norm(d))
    if nrm == 0.0:
        raise InvalidDirection("direction must be nonzero")
    d = d / nrm
    grad = np.concatenate([[1.0], -d])

    def fn(p):
        p = np.asarray(p, dtype=float)
        return p[..., 0] - p[..., 1:] @ d

    def d1(p):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(grad, p.shape[:-1] + (4,)).copy()

    def d2(p):
        p = np.asarray(p, dtype=float)
        return np.zeros(p.shape[:-1] + (4, 4))

    return Phase(label, ScalarField(fn, d1=d1, d2=d2, name=f"u_{label}"), d)


def radial_phase(center, label="A"):
    """Spherical phase u = t - |x - c|: exactly eikonal on the flat
    background away from the center, with curved level sets (varying normal,
    nonzero Hessian). Do not evaluate at the center."""
    c = np.asarray(center, dtype=float)

    def rad(p):
        return np.linalg.norm(p[..., 1:] - c, axis=-1)

    def fn(p):
        p = np.asarray(p, dtype=float)
        return p[..., 0] - rad(p)

    def d1(p):
        p = np.asarray(p, dtype=float)
        r = rad(p)[..., None]
        out = np.zeros(p.shape[:-1] + (4,))
        out[..., 0] = 1.0
        out[..., 1:] = -(p[..., 1:] - c) / r
        return out

    def d2(p):
        p = np.asarray(p, dtype=float)
        dx = p[..., 1:] - c
        r = np.linalg.norm(dx, axis=-1)
        n = dx / r[..., None]
        out = np.zeros(p.shape[:-1] + (4, 4))
        proj = np.eye(3) - np.einsum("...i,...j->...ij", n, n)
        out[..., 1:, 1:] = -proj / r[..., None, None]
        return out

    return Phase(label, ScalarField(fn, d1=d1, d2=d2, name=f"u_{label}"), None)


def eikonal_residual(phase, g, pts, h=1e-2):
    du = phase.du(pts, h)
    gi = g.inverse(pts)
    return np.einsum("...ab,...a,...b->...", gi, du, du)


@dataclass
class NullFrame:
    """Null pair plus two orthonormal spacelike legs at each point."""

    L: np.ndarray
    Lbar: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def legs(self):
        return {"L": self.L, "Lbar": self.Lbar, "e1": self.e1, "e2": self.e2}

    def completeness_residual(self, gval):
        """Componentwise error of rebuilding g from the co-frame legs."""
        lb = np.einsum("...ab,...b->...a", gval, self.L)
        lbb = np.einsum("...ab,...b->...a", gval, self.Lbar)
        e1b = np.einsum("...ab,...b->...a", gval, self.e1)
        e2b = np.einsum("...ab,...b->...a", gval, self.e2)
        rebuilt = (
            -0.5 * (np.einsum("...a,...b->...ab", lb, lbb) + np.einsum("...a,...b->...ab", lbb, lb))
            + np.einsum("...a,...b->...ab", e1b, e1b)
            + np.einsum("...a,...b->...ab", e2b, e2b)
        )
        return rebuilt - gval


def build_null_frame(phase, g, pts, h=1e-2, eik_tol=1e-10):
    """Frame (L, Lbar, e1, e2) attached to an eikonal phase at pts.

    L is minus the raised gradient; Lbar completes the null pair against the
    normalized time axis; e1/e2 come from Gram-Schmidt seeded by the lowest
    coordinate axis that is not parallel to the spatial normal (per-point).
    """
    pts = np.asarray(pts, dtype=float)
    du = phase.du(pts, h)
    gval = g(pts)
    gi = g.inverse(pts)

    res = np.einsum("...ab,...a,...b->...", gi, du, du)
    if np.any(np.abs(res) > eik_tol):
        raise EikonalViolated(f"max |g^-1(du,du)| = {np.abs(res).max():.3e}")
    if np.any(np.linalg.norm(du[..., 1:], axis=-1) < 1e-14):
        raise DegeneratePhase("vanishing spatial gradient")

    L = -np.einsum("...ab,...b->...a", gi, du)

    ### unit timelike reference along the time axis
    T = np.zeros_like(L)
    T[..., 0] = 1.0 / np.sqrt(-gval[..., 0, 0])
    a = np.einsum("...ab,...a,...b->...", gval, L, T)  # negative for future L
    Lbar = -(2.0 * a[..., None] * T + L) / (a**2)[..., None]

    lb = np.einsum("...ab,...b->...a", gval, L)
    lbb = np.einsum("...ab,...b->...a", gval, Lbar)

    def complement(v):
        ### remove the null-pair components: v + (g(v,Lbar)/2) L + (g(v,L)/2) Lbar
        cL = np.einsum("...a,...a->...", lb, v)
        cLb = np.einsum("...a,...a->...", lbb, v)
        return v + 0.5 * cLb[..., None] * L + 0.5 * cL[..., None] * Lbar

    ### candidate spacelike legs from the three spatial axes
    cands, norms = [], []
    for k in (1, 2, 3):
        axis = np.zeros_like(L)
        axis[..., k] = 1.0
        w = complement(axis)
        n2 = np.einsum("...ab,...a,...b->...", gval, w, w)
        cands.append(w)
        norms.append(n2)
    cands = np.stack(cands, axis=-2)  # (..., 3, 4)
    norms = np.stack(norms, axis=-1)  # (..., 3)

    ok = norms > 1e-6
    first = np.argmax(ok, axis=-1)
    e1 = np.take_along_axis(cands, first[..., None, None], axis=-2)[..., 0, :]
    n2 = np.take_along_axis(norms, first[..., None], axis=-1)[..., 0]
    e1 = e1 / np.sqrt(n2)[..., None]

    e1b = np.einsum("...ab,...b->...a", gval, e1)
    second_ok = ok.copy()
    np.put_along_axis(second_ok, first[..., None], False, axis=-1)
    ### orthogonality to e1 also required; recompute candidate norms after
    ### removing the e1 component, then choose the first viable axis
    res_cands = cands - np.einsum("...a,...ka->...k", e1b, cands)[..., None] * e1[..., None, :]
    res_norms = np.einsum("...ab,...ka,...kb->...k", gval, res_cands, res_cands)
    viable = second_ok & (res_norms > 1e-6)
    second = np.argmax(viable, axis=-1)
    e2 = np.take_along_axis(res_cands, second[..., None, None], axis=-2)[..., 0, :]
    n2 = np.take_along_axis(res_norms, second[..., None], axis=-1)[..., 0]
    e2 = e2 / np.sqrt(n2)[..., None]

    return NullFrame(L=L, Lbar=Lbar, e1=e1, e2=e2)


### ---------------------------------------------------------------- words

@dataclass(frozen=True)
class HarmonicWord:
    """Integer combination of phase labels, canonicalized up to overall sign
    (the first nonzero coefficient in label order is positive)."""

    coeffs: tuple  # ((label, int), ...) sorted by label, zeros dropped
    tag: str = ""

    @staticmethod
    def make(mapping, tag=""):
        items = sorted((k, int(v)) for k, v in mapping.items() if int(v) != 0)
        if not items:
            raise ValueError("empty harmonic word")
        if items[0][1] < 0:
            items = [(k, -v) for k, v in items]
        return HarmonicWord(coeffs=tuple(items), tag=tag)

    def canonical_key(self):
        return self.coeffs

    def value(self, phase_map, pts, h=1e-2):
        tot = 0.0
        for lab, c in self.coeffs:
            tot = tot + c * phase_map[lab].u(pts)
        return tot

    def gradient(self, phase_map, pts, h=1e-2):
        tot = 0.0
        for lab, c in self.coeffs:
            tot = tot + c * phase_map[lab].du(pts, h)
        return tot

    def __str__(self):
        parts = []
        for lab, c in self.coeffs:
            mag = "" if abs(c) == 1 else str(abs(c))
            parts.append(("-" if c < 0 else ("+" if parts else "")) + mag + lab)
        return "".join(parts)


### absolute-coefficient patterns defining each word class
_PATTERNS = {
    "N1": [(1,)],
    "N2": [(2,)],
    "N3": [(3,)],
    "I2": [(1, 1)],
    "I3": [(1, 2), (1, 1, 1)],
    "I4": [(1, 3), (1, 1, 2), (1, 1, 1, 1)],
    "I5": [(1, 4), (3, 2), (1, 2, 2), (1, 1, 3), (1, 1, 1, 2)],
}


def harmonic_lattice(labels, classes=("N1", "N2", "N3", "I2", "I3", "I4", "I5")):
    """Enumerate the harmonic words of the requested classes, deduplicated
    up to overall sign; deterministic order."""
    labels = list(labels)
    if not labels:
        raise ValueError("need at least one phase label")
    out = []
    for tag in classes:
        seen = set()
        words = []
        for pattern in _PATTERNS[tag]:
            r = len(pattern)
            if r > len(labels):
                continue
            for assign in itertools.permutations(labels, r):
                for signs in itertools.product((1, -1), repeat=r):
                    w = HarmonicWord.make(
                        {lab: s * m for lab, s, m in zip(assign, signs, pattern)}, tag
                    )
                    if w.coeffs not in seen:
                        seen.add(w.coeffs)
                        words.append(w)
        out.extend(sorted(words, key=lambda w: w.coeffs))
    return out


def pair_words(labels):
    """The interaction words inverted during profile construction (classes I2+I3)."""
    return [w for w in harmonic_lattice(labels) if w.tag in ("I2", "I3")]


def scan_words(labels):
    """The measurement dictionary: single-phase words and pair words (class W)."""
    return [w for w in harmonic_lattice(labels) if w.tag in ("N1", "N2", "N3", "I2", "I3")]


def coherence_margins(lattice, phases, g, pts, h=1e-2):
    """Minimum |g^-1(dw,dw)| over interaction words (coherence) and minimum
    Euclidean spatial gradient over the full extended lattice (spatial)."""
    phase_map = {p.label: p for p in phases}
    gi = g.inverse(pts)
    c_coh = np.inf
    c_spa = np.inf
    for w in lattice:
        dw = w.gradient(phase_map, pts, h)
        if w.tag in ("I2", "I3"):
            val = np.einsum("...ab,...a,...b->...", gi, dw, dw)
            c_coh = min(c_coh, float(np.abs(val).min()))
        c_spa = min(c_spa, float(np.linalg.norm(dw[..., 1:], axis=-1).min()))
    return {"c_coherence": c_coh, "c_spatial": c_spa}


def geodesic_residual(phase, g, pts, h=1e-2):
    """Acceleration D_L L of the raised phase gradient; zero for exact
    eikonal phases."""

    def L_closure(q):
        du = phase.du(q, h)
        gi = g.inverse(q)
        return -np.einsum("...ab,...b->...a", gi, du)

    L = L_closure(pts)
    dL = fd_partials(L_closure, pts, h)
    gamma = christoffels_fd(g, pts, h)
    return np.einsum("...m,...mr->...r", L, dL) + np.einsum(
        "...rmn,...m,...n->...r", gamma, L, L
    )
