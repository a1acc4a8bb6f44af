"""Linearized germ equations, the gauge operator and the Jacobi operator.

Tensor fields are class arrays of orthonormal-frame components with the
full ``2 x 2`` block stored for every rank-2 index pair; the discrete L2
inner product weights every component by the lumped vertex area.  All
operators are sparse matrices acting on the flattened arrays (row-major in
``[q, index...]``), wrapped as :class:`~hypgerm.surface.SparseOperator`
when an adjoint is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .connection import build_connection, section_gradient
from .germ import EPSILON, Germ, norm_squared
from .surface import SparseOperator, covariant_derivative, smooth_fields

SQRT6 = np.sqrt(6.0)
GAUGE_REGULARIZATION = 1e-10
KERNEL_REL_TOL = 1e-8
KILLING_DIM = 6  # isometries of hyperbolic 3-space

_EYE2 = np.eye(2)
_TRACE = np.array([[1.0, 0.0, 0.0, 1.0]])
_METRIC = _TRACE.T
_SWAP = np.eye(4)[[0, 2, 1, 3]]
# symmetric (h11, h12, h22) and traceless (n11, n12) parameterizations
SYM_BASIS = np.array([[1.0, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1]])
TRACELESS_BASIS = np.array([[1.0, 0], [0, 1], [0, 1], [-1, 0]])


class GaugeSolveError(RuntimeError):
    """The gauge-fixing least-squares solve failed."""


class IllConditionedError(RuntimeError):
    """The Hodge solve is too ill-conditioned (near-reducible connection)."""


def _kron(n: int, M) -> sp.csr_matrix:
    return sp.kron(sp.identity(n, format="csr"), sp.csr_matrix(np.asarray(M, dtype=float)), format="csr")


def _pointwise(blocks: np.ndarray) -> sp.csr_matrix:
    """Block-diagonal matrix from per-vertex blocks ``(n, rows, cols)``."""
    n, r, c = blocks.shape
    return sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(n * r, n * c)).tocsr()


def _div_first(rank: int) -> np.ndarray:
    """Contract the derivative slot with the first tensor slot: ``d_A T_{A...}``."""
    dim = 2 ** (rank - 1)
    M = np.zeros((dim, 2 * 2 * dim))
    for A in range(2):
        for k in range(dim):
            M[k, A * 2 * dim + A * dim + k] = 1.0
    return M


# ---------------------------------------------------------------------------
# Elementary operators

class _Ops:
    """Cached derivative operators of a germ."""

    def __init__(self, germ: Germ):
        g = germ.g
        self.n = n = g.mesh.n_classes
        self.m = m = germ.m
        self.G0 = g.gradient_operator(0)
        self.G1 = g.gradient_operator(1)
        self.G2 = g.gradient_operator(2)
        self.dm = covariant_derivative(m, g)  # [q, C, A, B] = d_C m_AB
        self.tr = _kron(n, _TRACE)
        self.metric = _kron(n, _METRIC)
        self.dotm = _pointwise(m.reshape(n, 1, 4))
        self.mass = g.mass


def _ops(germ: Germ) -> _Ops:
    cache = germ.__dict__.get("_lin_ops")
    if cache is None:
        cache = _Ops(germ)
        germ.__dict__["_lin_ops"] = cache
    return cache


def _hessian(o: _Ops) -> sp.csr_matrix:
    """Symmetrized ``d_A d_B f`` (scalars to rank-2 fields)."""
    H = o.G1 @ o.G0
    return (0.5 * (H + _kron(o.n, _SWAP) @ H)).tocsr()


def _lie_blocks(o: _Ops) -> sp.csr_matrix:
    """``(Dv)_{A'C'} -> m_BC' delta_AA' + m_AC' delta_BA'`` per vertex."""
    n, m = o.n, o.m
    blk = np.zeros((n, 4, 4))
    for A in range(2):
        for B in range(2):
            for C in range(2):
                blk[:, A * 2 + B, A * 2 + C] += m[:, B, C]
                blk[:, A * 2 + B, B * 2 + C] += m[:, A, C]
    return _pointwise(blk)


def _transport_blocks(o: _Ops) -> sp.csr_matrix:
    """``v -> v^C d_C m_AB``."""
    return _pointwise(np.transpose(o.dm, (0, 2, 3, 1)).reshape(o.n, 4, 2))


# ---------------------------------------------------------------------------
# L, l and D

def _L_terms(germ: Germ) -> list:
    """The separate terms of the linearization, each a ``3n x 8n`` matrix."""
    o = _ops(germ)
    n, m = o.n, o.m
    M1 = np.zeros((2, 8))
    for C in range(2):
        for A in range(2):
            for B in range(2):
                M1[B, C * 4 + A * 2 + B] = EPSILON[C, A]
    em = np.einsum("ac,qad->qcd", EPSILON, m)  # (eps^T m)_CD
    b2 = np.zeros((n, 2, 8))
    b3 = np.zeros((n, 2, 8))
    for B in range(2):
        for C in range(2):
            for D in range(2):
                b2[:, B, C * 4 + D * 2 + B] = 0.5 * em[:, C, D]
    for B in range(2):
        for E in range(2):
            for F in range(2):
                for C in range(2):
                    b3[:, B, E * 4 + F * 2 + C] += 0.5 * EPSILON[E, F] * m[:, B, C]
    M4 = 0.5 * EPSILON.T  # [B, C] = eps_CB / 2
    coef = 0.5 * (1.0 / 3.0 - norm_squared(m))
    div = _kron(n, _div_first(2)) @ o.G2
    Z1 = sp.csr_matrix((2 * n, 4 * n))
    Z3 = sp.csr_matrix((n, 4 * n))
    top = [
        sp.hstack([Z1, _kron(n, M1) @ o.G2]),
        sp.hstack([_pointwise(b2) @ o.G2, Z1]),
        sp.hstack([_pointwise(b3) @ o.G2, Z1]),
        sp.hstack([_kron(n, M4) @ o.G0 @ o.dotm, Z1]),
    ]
    bottom = [
        sp.hstack([sp.diags(coef) @ o.tr, Z3]),
        sp.hstack([o.tr @ o.G1 @ div, Z3]),
        sp.hstack([-germ.g.fit_laplacian @ o.tr, Z3]),
        sp.hstack([Z3, 2.0 * o.dotm]),
    ]
    Zt = sp.csr_matrix((n, 8 * n))
    Zb = sp.csr_matrix((2 * n, 8 * n))
    return [sp.vstack([T, Zt]).tocsr() for T in top] + [sp.vstack([Zb, T]).tocsr() for T in bottom]


def assemble_L(germ: Germ) -> SparseOperator:
    """Linearization of the germ equations.

    Domain: ``(h, n)`` full rank-2 fields (``8 n`` entries); range: the
    1-form ``gamma_B`` followed by the scalar ``gamma_3`` (``3 n`` entries).
    """
    cache = germ.__dict__.setdefault("_lin_cache", {})
    if "L" not in cache:
        o = _ops(germ)
        mat = sum(_L_terms(germ)[1:], _L_terms(germ)[0]).tocsr()
        w_in = np.repeat(o.mass, 8)
        w_out = np.concatenate([np.repeat(o.mass, 2), o.mass])
        cache["L"] = SparseOperator(mat, w_in, w_out, "L")
    return cache["L"]


def assemble_l(germ: Germ) -> SparseOperator:
    """Infinitesimal diffeomorphism action ``v -> (h, n)``.

    ``h = d_A v_B + d_B v_A`` and ``n`` the traceless part of the Lie
    derivative of ``m`` (the trace is carried by ``h``).
    """
    o = _ops(germ)
    n = o.n
    Dv = o.G1
    h = (_kron(n, np.eye(4) + _SWAP) @ Dv).tocsr()
    trace_fix = _kron(n, _METRIC) @ o.dotm @ Dv
    nn = _transport_blocks(o) + _lie_blocks(o) @ Dv - trace_fix
    mat = sp.vstack([h, nn]).tocsr()
    return SparseOperator(mat, np.repeat(o.mass, 2), np.repeat(o.mass, 8), "l")


def metric_variation_map(germ: Germ) -> sp.csr_matrix:
    """``(h, n) -> (delta g, delta m) = (h, n + (1/2) (h.m) g)``."""
    o = _ops(germ)
    n = o.n
    blk = 0.5 * np.einsum("ab,qef->qabef", _EYE2, o.m).reshape(n, 4, 4)
    I = sp.identity(4 * n, format="csr")
    Z = sp.csr_matrix((4 * n, 4 * n))
    return sp.bmat([[I, Z], [_pointwise(blk), I]]).tocsr()


def assemble_D(germ: Germ) -> SparseOperator:
    """``D = (L, l*)``: germ linearization together with the gauge condition."""
    L = assemble_L(germ)
    ls = assemble_l(germ).adjoint()
    mat = sp.vstack([L.matrix, ls.matrix]).tocsr()
    return SparseOperator(mat, L.domain_weight, np.concatenate([L.range_weight, ls.range_weight]), "D")


def _gauge_terms(germ: Germ) -> list:
    """Term matrices of the orbit-orthogonality expression (``2n x 8n`` each)."""
    o = _ops(germ)
    n, m = o.n, o.m
    divf = _kron(n, _div_first(2)) @ o.G2
    y_n = np.zeros((n, 4, 4))
    for A in range(2):
        for C in range(2):
            for B in range(2):
                y_n[:, A * 2 + C, A * 2 + B] = m[:, B, C]
    y_h = 0.5 * np.einsum("qac,qef->qacef", m, m).reshape(n, 4, 4)
    Z = sp.csr_matrix((2 * n, 4 * n))
    return [
        sp.hstack([-divf, Z]).tocsr(),
        sp.hstack([Z, _pointwise(0.5 * o.dm.reshape(n, 2, 4))]).tocsr(),
        sp.hstack([-divf @ _pointwise(y_h), -divf @ _pointwise(y_n)]).tocsr(),
    ]


def gauge_operator(germ: Germ) -> sp.csr_matrix:
    """Orbit-orthogonality expression as a matrix on ``(h, n)`` (``2n x 8n``).

    ``-d_A h_AC + (1/2) n_AB d_C m_AB - d_A(n_AB m_BC + (1/2)(h.m) m_AC)``.
    """
    cache = germ.__dict__.setdefault("_lin_cache", {})
    if "gauge" not in cache:
        t = _gauge_terms(germ)
        cache["gauge"] = (t[0] + t[1] + t[2]).tocsr()
    return cache["gauge"]


def gauge_residual(germ: Germ, h: np.ndarray, nfield: np.ndarray) -> np.ndarray:
    """Orbit-orthogonality expression per vertex (a 1-form, index ``C``)."""
    x = np.concatenate([np.ravel(h), np.ravel(nfield)])
    return (gauge_operator(germ) @ x).reshape(-1, 2)


def sobolev_norm(germ: Germ, x: np.ndarray, order: int = 2) -> float:
    """Discrete ``H^order`` norm of a field pair ``(h, n)`` or a 1-form/rank-2 field.

    ``x`` holds one or more stacked rank-2 fields (``4n`` entries each) or a
    vector field (``2n`` entries); derivatives come from the fit gradients.
    """
    g = germ.g
    n = g.mesh.n_classes
    x = np.asarray(x, dtype=float)
    rank = 2 if x.size % (4 * n) == 0 else 1
    fields = x.reshape(-1, n * 2 ** rank)
    total = 0.0
    mass = g.mass
    for f in fields:
        cur, r = f, rank
        for k in range(order + 1):
            total += float(np.sum(np.repeat(mass, 2 ** r) * cur**2))
            if k < order:
                cur = g.gradient_operator(r) @ cur
                r += 1
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Jacobi operator

def jacobi_operator(germ: Germ) -> SparseOperator:
    """``-Delta - |m|^2 + 1/3`` with the P1 stiffness and lumped mass."""
    g = germ.g
    K = g.mesh.stiffness
    mass = g.mass
    mat = (sp.diags(1.0 / mass) @ K + sp.diags(1.0 / 3.0 - norm_squared(germ.m))).tocsr()
    return SparseOperator(mat, mass, mass, "jacobi")


def jacobi_spectrum(germ: Germ, k: int = 6) -> np.ndarray:
    op = jacobi_operator(germ)
    return np.sort(op.smallest_eigenvalues(k, sigma=-1.0))


def kernel_report(name: str, values: np.ndarray, scale: float, refinement: int,
                  rel_tol: float = KERNEL_REL_TOL) -> dict:
    """Count ``|values| <= rel_tol * scale`` and the gap to the next value."""
    a = np.sort(np.abs(np.asarray(values)))
    dim = int(np.sum(a <= rel_tol * scale))
    gap = float(a[dim] / scale) if dim < len(a) else 0.0
    return {"operator": name, "dim": dim, "gap": gap, "refinement": int(refinement)}


def jacobi_kernel(germ: Germ, k: int = 8) -> dict:
    op = jacobi_operator(germ)
    vals = op.smallest_eigenvalues(k, sigma=-1.0)
    M = sp.diags(op.domain_weight).tocsc()
    top = spla.eigsh(op.symmetric_form().tocsc(), k=1, M=M, which="LM", return_eigenvectors=False)
    return kernel_report("jacobi", vals, float(np.abs(top).max()), germ.mesh.refinement_level)


# ---------------------------------------------------------------------------
# Tangent pairs

@dataclass
class TangentPair:
    """First-order deformation ``(h, n)`` of a germ with diagnostics."""

    h: np.ndarray
    n: np.ndarray
    sigma_vector: np.ndarray | None = None
    residuals: dict = field(default_factory=dict)

    def ravel(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.h), np.ravel(self.n)])


def pair_from_vector(x: np.ndarray, n: int) -> TangentPair:
    x = np.asarray(x)
    return TangentPair(x[: 4 * n].reshape(n, 2, 2), x[4 * n:].reshape(n, 2, 2))


def _gauge_solver(germ: Germ, reg: float):
    cache = germ.__dict__.setdefault("_gauge_lu", {})
    if reg not in cache:
        o = _ops(germ)
        l = assemble_l(germ).matrix
        A = (gauge_operator(germ) @ l).tocsr()
        W = sp.diags(np.repeat(o.mass, 2))
        try:
            lu = spla.splu((A.T @ W @ A + reg * W).tocsc())
        except RuntimeError as exc:
            raise GaugeSolveError(str(exc)) from exc
        cache[reg] = (lu, A, W, l)
    return cache[reg]


def gauge_fix(germ: Germ, x: np.ndarray, reg: float = GAUGE_REGULARIZATION):
    """Move ``x`` along the orbit until the orthogonality expression vanishes.

    Solves ``min |K (x - l s)|^2 + reg |s|^2`` over vector fields ``s``,
    with ``K`` the :func:`gauge_operator`, and returns ``(x - l s, s)``.
    """
    lu, A, W, l = _gauge_solver(germ, reg)
    x = np.asarray(x, dtype=float)
    s = lu.solve(A.T @ (W @ (gauge_operator(germ) @ x)))
    if not np.all(np.isfinite(s)):
        raise GaugeSolveError("gauge solve produced non-finite values")
    return x - l @ s, s


def _finish_pair(germ: Germ, base: np.ndarray, sigma_vector) -> TangentPair:
    o = _ops(germ)
    if sigma_vector is None:
        x, s = gauge_fix(germ, base)
    else:
        s = np.ravel(sigma_vector)
        x = base - assemble_l(germ).matrix @ s
    pair = pair_from_vector(x, o.n)
    pair.sigma_vector = s.reshape(o.n, 2)
    pair.residuals = tangent_residuals(germ, pair)
    return pair


def _sigma_bases(germ: Germ, sigma: np.ndarray):
    o = _ops(germ)
    n, m = o.n, o.m
    sigma = np.asarray(sigma, dtype=float)
    hess = (_hessian(o) @ sigma).reshape(n, 2, 2)
    lap = np.trace(hess, axis1=1, axis2=2)
    n_hess = hess - 0.5 * lap[:, None, None] * _EYE2
    h_M = -2.0 * m * sigma[:, None, None]
    h_T = sigma[:, None, None] * _EYE2
    return h_M, n_hess, h_T


def tangent_from_sigma_M(germ: Germ, sigma, sigma_vector=None) -> TangentPair:
    """Tangent pair attached to a scalar ``sigma`` for the connection map.

    ``h = -(d_A s_B + d_B s_A) - 2 m sigma`` and ``n`` the matching Lie
    term plus the traceless Hessian of ``sigma``; the vector field ``s``
    is fixed by orbit orthogonality unless given.
    """
    h_M, n_hess, _ = _sigma_bases(germ, sigma)
    base = np.concatenate([h_M.ravel(), n_hess.ravel()])
    return _finish_pair(germ, base, sigma_vector)


def tangent_from_sigma_T(germ: Germ, sigma, sigma_vector=None) -> TangentPair:
    """Tangent pair attached to ``sigma`` for the cotangent map.

    ``h = -(d_A s_B + d_B s_A) + g sigma`` and ``n`` the matching Lie term.
    """
    _, n_hess, h_T = _sigma_bases(germ, sigma)
    base = np.concatenate([h_T.ravel(), np.zeros(n_hess.size)])
    return _finish_pair(germ, base, sigma_vector)


def tangent_residuals(germ: Germ, pair: TangentPair) -> dict:
    """Residuals of a tangent pair relative to its discrete Sobolev norms.

    ``L`` is second order in ``h`` and the orthogonality expression first
    order, so they are divided by the ``H^2`` and ``H^1`` norms.
    """
    o = _ops(germ)
    x = pair.ravel()
    L = assemble_L(germ)
    gam = L.matrix @ x
    gau = gauge_operator(germ) @ x
    return {
        "L": float(np.sqrt(np.sum(L.range_weight * gam**2))) / max(sobolev_norm(germ, x, 2), 1e-300),
        "gauge": float(np.sqrt(np.sum(np.repeat(o.mass, 2) * gau**2))) / max(sobolev_norm(germ, x, 1), 1e-300),
        "trace_n": float(np.abs(np.trace(pair.n, axis1=1, axis2=2)).max()),
    }


def _trial_space(germ: Germ, modes: int) -> np.ndarray:
    """Smooth trial pairs: conformal, Codazzi-type and rotated Codazzi-type fields."""
    from .germ import codazzi_basis, epsilon_dot
    n = germ.mesh.n_classes
    f = np.column_stack([np.ones(n), smooth_fields(germ.mesh, modes - 1, seed=0)])
    basis, _ = codazzi_basis(germ.g)
    zero = np.zeros(4 * n)
    cols = [np.concatenate([(f[:, k, None, None] * _EYE2).ravel(), zero]) for k in range(modes)]
    for b in basis:
        for t in (b, epsilon_dot(b)):
            for k in range(modes):
                tf = (f[:, k, None, None] * t).ravel()
                cols.append(np.concatenate([tf, zero]))
                cols.append(np.concatenate([zero, tf]))
    return np.stack(cols, axis=1)


def tangent_space_sample(germ: Germ, count: int = 12, modes: int = 16,
                         threshold: float = 1e-6):
    """Near-kernel tangent pairs of ``L`` orthogonal to the orbit.

    A smooth trial space (Gaussian bump fields times the conformal direction
    and times Codazzi tensors, in both slots) is gauge fixed, ``L`` is
    minimized on its span and the right singular vectors with relative
    singular value below ``threshold`` are returned; if fewer exist, the
    ``count`` smallest are returned and their singular values recorded.
    """
    n = germ.mesh.n_classes
    X = np.stack([gauge_fix(germ, c)[0] for c in _trial_space(germ, modes).T], axis=1)
    L = assemble_L(germ)
    Q, R = np.linalg.qr(np.sqrt(L.domain_weight)[:, None] * X)
    keep = np.abs(np.diag(R)) > 1e-10 * np.abs(np.diag(R)).max()
    X, R = X[:, keep], R[np.ix_(keep, keep)]
    Rinv = np.linalg.solve(R, np.eye(R.shape[0]))
    Y = np.sqrt(L.range_weight)[:, None] * (L.matrix @ (X @ Rinv))
    _, sv, Vt = np.linalg.svd(Y, full_matrices=False)
    rel = sv / sv.max()
    order = np.argsort(rel)
    pick = [i for i in order if rel[i] <= threshold]
    if len(pick) < count:
        pick = list(order[:count])
    pairs = []
    for i in pick[:count]:
        p = pair_from_vector(X @ (Rinv @ Vt[i]), n)
        p.residuals = tangent_residuals(germ, p)
        p.residuals["relative_singular_value"] = float(rel[i])
        pairs.append(p)
    return pairs


# ---------------------------------------------------------------------------
# Zariski form and Hodge decomposition

def zariski_form(germ: Germ, h: np.ndarray, nfield: np.ndarray) -> np.ndarray:
    """E-valued 1-form ``v[q, A, a]`` of a tangent pair (complex)."""
    o = _ops(germ)
    n, m = o.n, o.m
    h = np.asarray(h, dtype=float)
    nfield = np.asarray(nfield, dtype=float)
    hm = np.einsum("qab,qab->q", h, m)
    v = np.zeros((n, 2, 3), dtype=complex)
    v[:, :, :2] = (-np.einsum("ae,qeb->qab", EPSILON, nfield)
                   + 0.5 * EPSILON[None] * hm[:, None, None]
                   - 0.5 * np.einsum("cb,qfa,qcf->qab", EPSILON, m, h)
                   - (1j / (2 * SQRT6)) * h)
    divh = (_kron(n, _div_first(2)) @ o.G2 @ h.ravel()).reshape(n, 2)
    dtr = (o.G0 @ np.trace(h, axis1=1, axis2=2)).reshape(n, 2)
    v[:, :, 2] = np.einsum("ae,qe->qa", EPSILON, 0.5 * divh - 0.5 * dtr)
    return v


def _form_derivative(conn, v: np.ndarray) -> np.ndarray:
    """Full covariant derivative ``nabla_A v_C`` of an E-valued 1-form ``[q, A, C, a]``."""
    g = conn.g
    n = g.mesh.n_classes
    th = conn.theta
    vb = np.ascontiguousarray(v[:, :, :2])
    v3 = np.ascontiguousarray(v[:, :, 2])
    dvb = (g.gradient_operator(2) @ vb.reshape(-1)).reshape(n, 2, 2, 2)  # [A, C, b]
    dv3 = (g.gradient_operator(1) @ v3.reshape(-1)).reshape(n, 2, 2)  # [A, C]
    out = np.zeros((n, 2, 2, 3), dtype=complex)
    out[..., :2] = dvb + np.einsum("qab,qc->qacb", th, v3)
    out[..., 2] = dv3 - np.einsum("qab,qcb->qac", th, vb)
    return out


def exterior_derivative(conn, v: np.ndarray) -> np.ndarray:
    """``eps_AC nabla_A v_C`` for an E-valued 1-form (sections ``[q, a]``)."""
    return np.einsum("ac,qack->qk", EPSILON, _form_derivative(conn, v))


def closure_residual(germ: Germ, h, nfield) -> float:
    """``|eps_AC nabla_A v_C| / |nabla v|`` for the Zariski form of ``(h, n)``."""
    conn = build_connection(germ)
    v = zariski_form(germ, h, nfield)
    dv = _form_derivative(conn, v)
    d = np.einsum("ac,qack->qk", EPSILON, dv)
    mass = germ.g.mass
    num = np.sqrt(np.sum(mass[:, None] * np.abs(d) ** 2))
    den = np.sqrt(np.sum(mass[:, None, None, None] * np.abs(dv) ** 2))
    return float(num / max(den, 1e-300))


def _form_epsilon(n: int) -> sp.csr_matrix:
    return _kron(n, np.kron(EPSILON, np.eye(3)))


def _hodge_system(conn):
    """Triangle-based ``B = [nabla, eps . nabla_bar]`` and its weights."""
    from .connection import ConnectionField, fem_covariant_derivative
    bar = ConnectionField(conn.germ, np.conj(conn.theta), "nabla_bar")
    D = fem_covariant_derivative(conn)
    Db = fem_covariant_derivative(bar)
    F = len(conn.mesh.triangles)
    B = sp.hstack([D.matrix, _form_epsilon(F) @ Db.matrix]).tocsc()
    return D, Db, B


def vertex_forms_to_triangles(mesh, v: np.ndarray) -> np.ndarray:
    """Average a vertex-based 1-form ``[q, A, a]`` over each triangle.

    Corner values are rotated from class frames into the chart frame of the
    triangle (both the form index and the cotangent block of the section
    index) before averaging; the result has shape ``(F, 2, 3)``.
    """
    from .connection import _section_frames
    v = np.asarray(v).reshape(mesh.n_classes, 2, 3)
    R3 = _section_frames(mesh)[mesh.triangles]  # (F, 3, 3, 3)
    R2 = R3[..., :2, :2]
    corner = v[mesh.corner_class]  # (F, 3, 2, 3)
    return np.einsum("fiAB,fiuv,fiBv->fAu", R2, R3, corner) / 3.0


def _hodge_factor(conn, cond_limit: float):
    cache = conn.__dict__.setdefault("_hodge_cache", {})
    if "lu" not in cache:
        D, _, B = _hodge_system(conn)
        wf = np.repeat(conn.g.tri_area, 6)
        N = (B.conj().T @ sp.diags(wf) @ B).tocsc()
        try:
            lu = spla.splu(N)
        except RuntimeError as exc:
            raise IllConditionedError(str(exc)) from exc
        ud = np.abs(lu.U.diagonal())
        if ud.min() < ud.max() / cond_limit:
            raise IllConditionedError("Hodge system is near singular: connection close to reducible")
        cache.update(lu=lu, B=B, wf=wf)
    return cache["lu"], cache["B"], cache["wf"]


def hodge_decompose(conn, v: np.ndarray, cond_limit: float = 1e12):
    """Split ``v = nabla alpha + eps . nabla_bar beta + w`` (area-weighted least squares).

    Sections ``alpha, beta`` are piecewise linear on vertex classes and the
    1-forms are constant on triangles, so ``B = [nabla, eps . nabla_bar]``
    is rectangular and ``w`` is orthogonal to its range to solver
    precision.  A vertex-based ``v`` of shape ``(n, 2, 3)`` is first
    averaged onto triangles; a triangle-based ``(F, 2, 3)`` input is used
    as is.  Returns ``(alpha, beta, w)`` with ``w`` of shape ``(F, 2, 3)``.
    """
    mesh = conn.mesh
    n, F = mesh.n_classes, len(mesh.triangles)
    v = np.asarray(v)
    if v.size == 6 * n and v.size != 6 * F:
        v = vertex_forms_to_triangles(mesh, v)
    vt = v.reshape(-1).astype(complex)
    lu, B, wf = _hodge_factor(conn, cond_limit)
    c = lu.solve(B.conj().T @ (wf * vt))
    w = vt - B @ c
    # one refinement step removes the round-off left by the normal equations
    c2 = lu.solve(B.conj().T @ (wf * w))
    w = w - B @ c2
    c = c + c2
    return c[: 3 * n].reshape(n, 3), c[3 * n:].reshape(n, 3), w.reshape(F, 2, 3)


def hermitian_inner(mass: np.ndarray, a: np.ndarray, b: np.ndarray) -> complex:
    a = np.asarray(a).reshape(len(mass), -1)
    b = np.asarray(b).reshape(len(mass), -1)
    return complex(np.sum(mass[:, None] * np.conj(a) * b))


# ---------------------------------------------------------------------------
# Twisted simplicial cochain complex

@dataclass
class TwistedComplex:
    """Cochains of the flat bundle on the surface triangulation.

    Sections live on vertex classes, 1-cochains on surface edges (value in
    the frame of the edge's tail) and 2-cochains on triangles (value in the
    frame of the first corner); ``d0`` and ``d1`` use the edge transports
    of the connection.  Weights are the diagonal Hodge stars: lumped vertex
    area, the cotangent weight of each edge and inverse triangle area.
    """

    d0: sp.csr_matrix
    d1: sp.csr_matrix
    w0: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def curvature_defect(self) -> float:
        """``|d1 d0|`` relative to ``|d1| |d0|`` (zero for an exactly flat transport)."""
        est = lambda A: float(spla.norm(A, "fro"))
        return est(self.d1 @ self.d0) / max(est(self.d1) * est(self.d0), 1e-300)


def twisted_complex(conn) -> TwistedComplex:
    from scipy.linalg import expm
    from .connection import _chart_data, _edge_generator, _section_frames
    mesh = conn.mesh
    cd = _chart_data(conn)
    frames = _section_frames(mesh)
    cls = mesh.vertex_class
    n = mesh.n_classes
    edge_index, transports, tails, heads = {}, [], [], []
    for a, b in mesh.edges:
        a, b = int(a), int(b)
        key = frozenset((int(cls[a]), int(cls[b])))
        if key in edge_index:
            continue
        edge_index[key] = len(tails)
        # class frame at a -> chart frame -> transport -> class frame at b
        transports.append(frames[b].T @ expm(-_edge_generator(cd, a, b)) @ frames[a])
        tails.append(int(cls[a]))
        heads.append(int(cls[b]))
    ne = len(tails)
    T = np.array(transports)
    Tinv = np.linalg.inv(T)
    eye = np.eye(3)
    rows, cols, vals = [], [], []

    def put(r, c, block):
        for i in range(3):
            for j in range(3):
                if block[i, j] != 0:
                    rows.append(3 * r + i)
                    cols.append(3 * c + j)
                    vals.append(block[i, j])

    for e in range(ne):
        put(e, heads[e], Tinv[e])
        put(e, tails[e], -eye)
    d0 = sp.csr_matrix((vals, (rows, cols)), shape=(3 * ne, 3 * n), dtype=complex)

    def oriented(p, q):
        """(edge index, matrix) giving the cochain on p -> q in p's frame."""
        e = edge_index[frozenset((p, q))]
        if tails[e] == p and heads[e] == q:
            return e, eye
        return e, -T[e]

    def transport(p, q):
        e = edge_index[frozenset((p, q))]
        return T[e] if tails[e] == p else Tinv[e]

    rows, cols, vals = [], [], []
    tri = cls[mesh.triangles]
    for f, (a, b, c) in enumerate(tri):
        a, b, c = int(a), int(b), int(c)
        back_b = np.linalg.inv(transport(a, b))
        back_c = back_b @ np.linalg.inv(transport(b, c))
        for (p, q), carry in (((a, b), eye), ((b, c), back_b), ((c, a), back_c)):
            e, M = oriented(p, q)
            put(f, e, carry @ M)
    d1 = sp.csr_matrix((vals, (rows, cols)), shape=(3 * len(tri), 3 * ne), dtype=complex)
    # Hodge stars: the cotangent weight of a 1-form is conformally invariant
    P = mesh.vertices
    cot = {}
    for a, b, c in mesh.triangles:
        for i, j, k in ((a, b, c), (b, c, a), (c, a, b)):
            u, v = P[i] - P[k], P[j] - P[k]
            key = frozenset((int(cls[i]), int(cls[j])))
            cot[key] = cot.get(key, 0.0) + 0.5 * (u @ v) / abs(u[0] * v[1] - u[1] * v[0])
    w1 = np.zeros(ne)
    for key, e in edge_index.items():
        w1[e] = cot[key]
    return TwistedComplex(d0, d1, np.repeat(conn.g.mass, 3), np.repeat(w1, 3),
                          np.repeat(1.0 / conn.g.tri_area, 3))


def harmonic_report(conn, k: int = 16) -> dict:
    """Near-kernel of ``(d0^*, d1)`` on 1-cochains of the twisted complex.

    The complex dimension of the harmonic space is at least
    ``-3 chi = 6`` for any transport (a count of unknowns and equations);
    the report gives the smallest singular values, the count below
    ``KERNEL_REL_TOL`` relative to the largest and the real dimension.
    """
    cx = twisted_complex(conn)
    if np.any(cx.w1 <= 0):
        raise IllConditionedError("non-positive cotangent weight: mesh is not Delaunay")
    s0, s1, s2 = np.sqrt(cx.w0), np.sqrt(cx.w1), np.sqrt(cx.w2)
    A = sp.vstack([sp.diags(1.0 / s0) @ cx.d0.conj().T @ sp.diags(s1),
                   sp.diags(s2) @ cx.d1 @ sp.diags(1.0 / s1)]).tocsc()
    N = (A.conj().T @ A).tocsc()
    top = spla.eigsh(N, k=1, which="LM", return_eigenvectors=False)
    vals = spla.eigsh(N, k=k, sigma=-1e-10 * float(abs(top[0])), which="LM", return_eigenvectors=False,
                      v0=np.ones(N.shape[0], dtype=complex))
    sv = np.sqrt(np.clip(np.sort(vals.real), 0.0, None)) / np.sqrt(float(abs(top[0])))
    dim = int(np.sum(sv <= np.sqrt(KERNEL_REL_TOL)))
    return {"singular_values": sv.tolist(), "complex_dim": dim, "real_dim": 2 * dim,
            "gap": float(sv[dim]) if dim < len(sv) else 0.0,
            "curvature_defect": cx.curvature_defect()}


# ---------------------------------------------------------------------------
# Cokernel system and its complex reformulation

def cokernel_system(germ: Germ) -> SparseOperator:
    """Overdetermined operator ``(v_A, v_3, kappa) -> (E1, E2)``.

    ``E1 = d_A v_B + d_B v_A - g_AB (d_C v_C + kappa) + 2 m_AB v_3`` and
    ``E2 = (1/2)(1/3 + |m|^2) v_3 g_AB - d_A d_B v_3 + v^C d_C m_AB
    + d_B v_C m_CA + d_A v_C m_CB``.  The unknown vector is
    ``[v (2n), v_3 (n), kappa (1)]``.
    """
    o = _ops(germ)
    n, m = o.n, o.m
    Dv = o.G1
    div = o.tr @ Dv
    e1_v = _kron(n, np.eye(4) + _SWAP) @ Dv - o.metric @ div
    e1_3 = _pointwise(2.0 * m.reshape(n, 4, 1))
    e1_k = sp.csr_matrix(-np.tile(_METRIC.ravel(), n)[:, None])
    lie = np.zeros((n, 4, 4))
    for A in range(2):
        for B in range(2):
            for C in range(2):
                lie[:, A * 2 + B, B * 2 + C] += m[:, C, A]
                lie[:, A * 2 + B, A * 2 + C] += m[:, C, B]
    e2_v = _transport_blocks(o) + _pointwise(lie) @ Dv
    coef = 0.5 * (1.0 / 3.0 + norm_squared(m))
    e2_3 = _pointwise((coef[:, None] * _METRIC.ravel()[None, :]).reshape(n, 4, 1)) - _hessian(o)
    e2_k = sp.csr_matrix((4 * n, 1))
    mat = sp.bmat([[e1_v, e1_3, e1_k], [e2_v, e2_3, e2_k]]).tocsr()
    w_in = np.concatenate([np.repeat(o.mass, 2), o.mass, [o.mass.sum()]])
    return SparseOperator(mat, w_in, np.tile(np.repeat(o.mass, 4), 2), "cokernel")


def complex_sections(germ: Germ, v: np.ndarray, v3: np.ndarray, kappa: float = 0.0):
    """Complex sections ``(eta, u)`` built from a real section ``(v, v_3)``."""
    o = _ops(germ)
    n, m = o.n, o.m
    v = np.asarray(v, dtype=float).reshape(n, 2)
    v3 = np.asarray(v3, dtype=float).reshape(n)
    dv3 = (o.G0 @ v3).reshape(n, 2)
    dv = (o.G1 @ v.ravel()).reshape(n, 2, 2)
    eta = np.zeros((n, 3), dtype=complex)
    eta[:, :2] = v + 1j * SQRT6 * (-np.einsum("cb,qc->qb", EPSILON, dv3)
                                   + np.einsum("qe,cb,qec->qb", v, EPSILON, m))
    eta[:, 2] = v3 + 1j * np.sqrt(1.5) * np.einsum("ef,qef->q", EPSILON, dv)
    u = np.zeros((n, 3), dtype=complex)
    u[:, 2] = -1j * np.sqrt(1.5) * (np.trace(dv, axis1=1, axis2=2) + kappa)
    return eta, u


def intertwining_residual(germ: Germ, eta: np.ndarray, u: np.ndarray, mask=None) -> float:
    """Relative size of ``nabla_A eta - eps_AB nabla'_B u`` over ``mask``.

    Solutions of the cokernel system come from ambient Killing fields, so
    ``eta`` is close to parallel and ``nabla eta`` nearly cancels; the
    residual is therefore divided by the sum of the term norms
    ``|d eta| + |theta eta| + |nabla' u|`` rather than by ``|nabla eta|``.
    """
    n = germ.mesh.n_classes
    c = build_connection(germ, "nabla")
    cp = build_connection(germ, "nabla_prime")
    G = section_gradient(c)
    flat = section_gradient(type(c)(germ, np.zeros_like(c.theta), "nabla"))
    d_eta = (flat @ eta.ravel()).reshape(n, 2, 3)
    a = (G @ eta.ravel()).reshape(n, 2, 3)
    b = np.einsum("ab,qbk->qak", EPSILON, (section_gradient(cp) @ u.ravel()).reshape(n, 2, 3))
    w = germ.g.mass if mask is None else germ.g.mass * np.asarray(mask, dtype=float)
    nrm = lambda t: float(np.sqrt(np.sum(w[:, None, None] * np.abs(t) ** 2)))
    den = nrm(d_eta) + nrm(a - d_eta) + nrm(b)
    return nrm(a - b) / max(den, 1e-300)


def cokernel_trial_spectrum(germ: Germ, degree: int = 10, mask=None):
    """Weighted SVD of the cokernel system on chart polynomials of degree ``<= degree``.

    Returns ``(basis, coefficients, singular_values, right_vectors, weights)``
    where trial field ``k`` is ``basis @ coefficients[:, k]`` and the
    singular values are relative to the largest one.
    """
    n = germ.mesh.n_classes
    z = germ.mesh.z[germ.mesh.representatives]
    rho = np.abs(z).max() if mask is None else np.abs(z[np.asarray(mask, bool)]).max()
    x, y = z.real / rho, z.imag / rho
    P = np.stack([x**i * y**j for i in range(degree + 1) for j in range(degree + 1 - i)], axis=1)
    nb = P.shape[1]
    basis = np.zeros((3 * n + 1, 3 * nb + 1))
    basis[0:2 * n:2, :nb] = P
    basis[1:2 * n:2, nb:2 * nb] = P
    basis[2 * n:3 * n, 2 * nb:3 * nb] = P
    basis[-1, -1] = 1.0
    op = cokernel_system(germ)
    if mask is None:
        w_out, w_in = op.range_weight, op.domain_weight
    else:
        mk = np.asarray(mask, dtype=float)
        w_out = op.range_weight * np.tile(np.repeat(mk, 4), 2)
        w_in = op.domain_weight * np.concatenate([np.repeat(mk, 2), mk, [1.0]])
    _, S, Wt = np.linalg.svd(np.sqrt(w_in)[:, None] * basis, full_matrices=False)
    keep = S > 1e-12 * S.max()
    Rinv = Wt[keep].T / S[keep]  # orthonormal trial fields in the weighted norm
    Y = np.sqrt(w_out)[:, None] * (op.matrix @ (basis @ Rinv))
    _, sv, Vt = np.linalg.svd(Y, full_matrices=False)
    return basis, Rinv, sv / sv.max(), Vt, (op, w_in, w_out)


def cokernel_samples(germ: Germ, count: int = 10, seed: int = 0, degree: int = 10, mask=None,
                     dim: int = KILLING_DIM):
    """Least-squares solutions of the cokernel system on smooth polynomial fields.

    Local solutions are restrictions of ambient Killing fields, a space of
    dimension ``dim = 6``; each sample is a random combination of the
    ``dim`` right singular vectors with the smallest singular values.
    Returns dicts with ``v``, ``v3``, ``kappa``, the relative system
    residual and the largest relative singular value used.
    """
    n = germ.mesh.n_classes
    basis, Rinv, sv, Vt, (op, w_in, w_out) = cokernel_trial_spectrum(germ, degree, mask)
    near = Vt[-dim:]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        coeff = near.T @ rng.standard_normal(len(near))
        sol = basis @ (Rinv @ coeff)
        res = np.sqrt(np.sum(w_out * (op.matrix @ sol) ** 2))
        nrm = np.sqrt(np.sum(w_in * sol**2))
        out.append({"v": sol[: 2 * n].reshape(n, 2), "v3": sol[2 * n:3 * n], "kappa": float(sol[-1]),
                    "system_residual": float(res / nrm), "singular_value": float(sv[-dim])})
    return out


def _sobolev_factor(germ: Germ, X: np.ndarray) -> np.ndarray:
    """Stack of weighted fields and derivatives whose Gram matrix is the ``H^2`` form.

    ``X`` holds columns ``[v (2n), v_3 (n), ...]``; extra rows are ignored.
    """
    g = germ.g
    n = g.mesh.n_classes
    mass = g.mass
    out = []
    for block, rank in ((X[: 2 * n], 1), (X[2 * n:3 * n], 0)):
        cur, r = block, rank
        for k in range(3):
            out.append(np.sqrt(np.repeat(mass, 2 ** r))[:, None] * cur)
            if k < 2:
                cur = g.gradient_operator(r) @ cur
                r += 1
    return np.vstack(out)


def cokernel_margin(germ: Germ, modes: int = 16) -> float:
    """Smallest ``|E(x)| / |x|_{H^2}`` of the cokernel system over smooth fields.

    The trial space holds ``(d f, 0)``, ``(eps . d f, 0)`` and ``(0, f)``
    for a constant and Gaussian bump fields ``f``; with ``kappa`` free.
    Rough mesh-scale modes of the fit operators are excluded by design.
    """
    o = _ops(germ)
    n = o.n
    f = np.column_stack([np.ones(n), smooth_fields(germ.mesh, modes - 1, seed=1)])
    cols = []
    for k in range(modes):
        d = (o.G0 @ f[:, k]).reshape(n, 2)
        for vec in (d, d @ EPSILON.T):
            cols.append(np.concatenate([vec.ravel(), np.zeros(n), [0.0]]))
        cols.append(np.concatenate([np.zeros(2 * n), f[:, k], [0.0]]))
    X = np.stack(cols, axis=1)
    kappa = np.zeros((3 * n + 1, 1))
    kappa[-1] = 1.0
    X = np.hstack([X, kappa])
    op = cokernel_system(germ)
    S = _sobolev_factor(germ, X)
    S = np.vstack([S, np.sqrt(o.mass.sum()) * X[-1:]])
    _, sv, Wt = np.linalg.svd(S, full_matrices=False)
    keep = sv > 1e-10 * sv.max()
    B = Wt[keep].T / sv[keep]
    Y = np.sqrt(op.range_weight)[:, None] * (op.matrix @ (X @ B))
    return float(np.linalg.svd(Y, compute_uv=False).min())


# ---------------------------------------------------------------------------
# Reports

SPECTRUM_HEADER = ["operator", "eig_index", "eigenvalue", "refinement", "h_max"]


def spectrum_rows(germ: Germ, operator: str = "jacobi", k: int = 8) -> list:
    mesh = germ.mesh
    if operator == "jacobi":
        vals = jacobi_spectrum(germ, k)
    elif operator == "laplacian":
        from .surface import laplacian
        L = laplacian(germ.g)  # non-positive; report the spectrum of -Delta
        minus = SparseOperator(-L.matrix, L.domain_weight, L.range_weight, "minus_laplacian")
        vals = np.sort(minus.smallest_eigenvalues(k, sigma=-1.0))
    elif operator == "connection":
        from .connection import _lowest_sections
        vals, _ = _lowest_sections(build_connection(germ), k)
    elif operator == "codazzi":
        from .germ import fem_codazzi_spectrum
        vals = fem_codazzi_spectrum(germ.g, k)
    else:
        raise ValueError(f"unknown operator '{operator}'")
    return [[operator, i, float(v), mesh.refinement_level, mesh.h_max] for i, v in enumerate(vals)]
