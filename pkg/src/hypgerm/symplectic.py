"""Symplectic pairings on germ tangent vectors and on connection 1-forms.

``omega_H`` is the cotangent-bundle pairing of two tangent pairs ``(h, n)``
and ``omega_M`` the pairing of E-valued 1-forms through the C-bilinear
trace, normalized by ``-2 sqrt(6)`` and the imaginary part.  With these
signs the Zariski form intertwines the two pairings point by point, for
arbitrary ``(h, n)``; agreement is therefore limited only by round-off.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .connection import build_connection, fem_covariant_derivative
from .germ import EPSILON, Germ
from .linearization import (
    TangentPair,
    hodge_decompose,
    tangent_space_sample,
    zariski_form,
)
from .surface import smooth_fields

SQRT6 = np.sqrt(6.0)
NORMALIZATION = -2.0 * SQRT6


class TangentProjectionError(RuntimeError):
    """Not enough near-kernel tangent vectors were found."""


@dataclass
class PairingReport:
    """Both pairings of one ordered couple of tangent pairs."""

    omega_H: float
    omega_M: float
    rel_discrepancy: float
    residuals: list = field(default_factory=list)


def _pair_arrays(p):
    if isinstance(p, TangentPair):
        return np.asarray(p.h, dtype=float), np.asarray(p.n, dtype=float)
    h, n = p
    return np.asarray(h, dtype=float), np.asarray(n, dtype=float)


def omega_H(germ: Germ, first, second) -> float:
    """``int (h . n' - h' . n) dvol`` for tangent pairs ``(h, n)`` and ``(h', n')``."""
    h, n = _pair_arrays(first)
    h2, n2 = _pair_arrays(second)
    dens = np.einsum("qab,qab->q", h, n2) - np.einsum("qab,qab->q", h2, n)
    return float(np.sum(germ.g.mass * dens))


def trace_wedge(mass: np.ndarray, v: np.ndarray, w: np.ndarray) -> complex:
    """``int Tr(v ^ w)``: ``eps_AC v_A . w_C`` with the C-bilinear contraction."""
    v = np.asarray(v).reshape(len(mass), 2, 3)
    w = np.asarray(w).reshape(len(mass), 2, 3)
    return complex(np.sum(mass * np.einsum("ac,qak,qck->q", EPSILON, v, w)))


def omega_M(conn, v: np.ndarray, w: np.ndarray) -> float:
    """``-2 sqrt(6) Im int Tr(v ^ w)`` for E-valued 1-forms ``v[q, A, a]``."""
    return float(NORMALIZATION * trace_wedge(conn.g.mass, v, w).imag)


def t_involution(v: np.ndarray) -> np.ndarray:
    """``t(v)_A = i eps_AB conj(v_B)``."""
    return 1j * np.einsum("ab,qbk->qak", EPSILON, np.conj(v))


def moment_residuals(germ: Germ, count: int = 20, seed: int = 0) -> tuple:
    """``(sup_v |P.v| / |v|, max |tr m|)`` over ``count`` random vector fields.

    ``P.v = int m^{AB} d_A v_B dvol``; both vanish on germs since a
    traceless Codazzi tensor is divergence free.
    """
    g = germ.g
    n = g.mesh.n_classes
    rng = np.random.default_rng(seed)
    G1 = g.gradient_operator(1)
    G0 = g.gradient_operator(0)
    # one bump basis, random combinations df + eps.dh per sample
    modes = smooth_fields(g.mesh, 16, seed=seed)
    worst = 0.0
    for _ in range(count):
        f = modes @ rng.standard_normal(16)
        h = modes @ rng.standard_normal(16)
        v = (G0 @ f).reshape(n, 2) + (G0 @ h).reshape(n, 2) @ EPSILON.T
        dv = (G1 @ v.ravel()).reshape(n, 2, 2)
        pv = float(np.sum(g.mass * np.einsum("qab,qab->q", germ.m, dv)))
        worst = max(worst, abs(pv) / np.sqrt(np.sum(g.mass[:, None] * v**2)))
    p_res = float(np.abs(np.trace(germ.m, axis1=1, axis2=2)).max())
    return worst, p_res


def pairing_report(germ: Germ, first, second, conn=None) -> PairingReport:
    conn = build_connection(germ) if conn is None else conn
    h, n = _pair_arrays(first)
    h2, n2 = _pair_arrays(second)
    wh = omega_H(germ, (h, n), (h2, n2))
    wm = omega_M(conn, zariski_form(germ, h, n), zariski_form(germ, h2, n2))
    scale = max(abs(wh), 1e-300)
    residuals = [getattr(p, "residuals", {}) for p in (first, second)]
    return PairingReport(wh, wm, abs(wh - wm) / scale, residuals)


def agreement_check(germ: Germ, sample_count: int = 10, modes: int = 16, floor: float = 1e-12) -> dict:
    """Compare ``omega_H`` with ``omega_M`` of the Zariski forms on tangent pairs.

    ``sample_count`` near-kernel tangent pairs are drawn with
    :func:`~hypgerm.linearization.tangent_space_sample`; every ordered
    couple is paired and the discrepancy is divided by
    ``max(|omega_H|, floor * |p| |q|)``.
    """
    pairs = tangent_space_sample(germ, count=sample_count, modes=modes)
    if len(pairs) < sample_count:
        raise TangentProjectionError(f"only {len(pairs)} tangent pairs found")
    conn = build_connection(germ)
    mass = germ.g.mass
    forms = [zariski_form(germ, p.h, p.n) for p in pairs]
    norms = [np.sqrt(np.sum(np.repeat(mass, 8) * p.ravel() ** 2)) for p in pairs]
    worst, values = 0.0, []
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            wh = omega_H(germ, pairs[i], pairs[j])
            wm = omega_M(conn, forms[i], forms[j])
            rel = abs(wh - wm) / max(abs(wh), floor * norms[i] * norms[j])
            worst = max(worst, rel)
            values.append((wh, wm))
    return {
        "samples": len(pairs),
        "max_rel_discrepancy": float(worst),
        "refinement": int(germ.mesh.refinement_level),
        "tangent_residuals": [p.residuals for p in pairs],
        "pairings": [[a, b] for a, b in values],
    }


def stokes_degeneracy(germ: Germ, count: int = 4, seed: int = 0) -> float:
    """``max |omega_M(nabla u, w)| / (|nabla u| |w|)`` over harmonic ``w``.

    The harmonic forms are the remainders of the Hodge decomposition of
    random smooth 1-forms and ``u`` are random smooth sections; everything
    is evaluated with the triangle-based operators of
    :func:`~hypgerm.linearization.hodge_decompose`.
    """
    conn = build_connection(germ)
    g = germ.g
    area = g.tri_area
    F = len(area)
    rng = np.random.default_rng(seed)
    D = fem_covariant_derivative(conn).matrix
    f = smooth_fields(g.mesh, 6, seed=seed)
    coeff = lambda: f @ (rng.standard_normal((6, 3)) + 1j * rng.standard_normal((6, 3)))
    nrm = lambda a: np.sqrt(np.sum(np.repeat(area, 6) * np.abs(np.ravel(a)) ** 2))
    worst = 0.0
    for _ in range(count):
        u = coeff()
        raw = np.stack([coeff(), coeff()], axis=1)
        _, _, w = hodge_decompose(conn, raw)
        du = (D @ u.ravel()).reshape(F, 2, 3)
        wedge = NORMALIZATION * trace_wedge(area, du, w).imag
        worst = max(worst, abs(wedge) / (nrm(du) * nrm(w)))
    return float(worst)
