"""Minimal hyperbolic germs: residuals, Codazzi projection and the Gauss solver.

A germ is a conformal metric ``g`` together with a symmetric traceless
tensor ``m`` stored as frame components ``m[q, A, B]`` in the orthonormal
frame of ``g`` at each quotient vertex ``q``.  It is a hyperbolic germ when

* ``d_C m_AB - d_B m_AC = 0``  (Codazzi),
* ``r + |m|^2 + 1/3 - k^2 = 0`` with ``k = tr m`` (Gauss),

and minimal when ``k = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq
from sklearn.base import BaseEstimator

from .surface import (
    MeshMismatchError,
    MetricField,
    SurfaceError,
    SurfaceMesh,
    build_bolza_mesh,
    build_disk_patch,
    fuchsian_metric,
    integrate,
    mesh_from_dict,
    scalar_curvature,
)

EPSILON = np.array([[0.0, 1.0], [-1.0, 0.0]])
TOL_TRACE = 1e-12
TOL_GAUSS = 1e-6
TOL_CODAZZI = 1e-3


class ConvergenceError(RuntimeError):
    """An iterative solve did not reach its tolerance."""

    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class SingularLinearizationError(RuntimeError):
    """The Newton Jacobian ``Delta + |m|^2 - 1/3`` is numerically singular."""


class GermRejectedError(ValueError):
    """A germ exceeds its tolerances and no override was given."""


# ---------------------------------------------------------------------------
# Traceless tensors

def traceless_from_components(a, b) -> np.ndarray:
    """Symmetric traceless frame tensors ``[[a, b], [b, -a]]``."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return np.stack([np.stack([a, b], -1), np.stack([b, -a], -1)], -2)


def traceless_part(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    k = np.trace(m, axis1=-2, axis2=-1)
    return m - 0.5 * k[..., None, None] * np.eye(2)


def norm_squared(m: np.ndarray) -> np.ndarray:
    """Pointwise ``|m|^2 = m_AB m_AB`` in the orthonormal frame."""
    return np.einsum("...ab,...ab->...", m, m)


def epsilon_dot(m: np.ndarray) -> np.ndarray:
    """``(eps . m)_AB = eps_AC m_CB``."""
    return np.einsum("ac,...cb->...ab", EPSILON, m)


# ---------------------------------------------------------------------------
# Residuals

def _check(g: MetricField, m: np.ndarray):
    if m.shape[0] != g.mesh.n_classes:
        raise MeshMismatchError("tensor field and metric live on different meshes")


def trace_residual(g: MetricField, m) -> np.ndarray:
    """``k = g^{AB} m_AB`` at every vertex."""
    m = np.asarray(m)
    _check(g, m)
    return np.trace(m, axis1=1, axis2=2)


def codazzi_residual(g: MetricField, m) -> np.ndarray:
    """``c[q, C, A, B] = d_C m_AB - d_B m_AC`` in the orthonormal frame."""
    m = np.asarray(m)
    _check(g, m)
    from .surface import covariant_derivative
    dm = covariant_derivative(m, g)
    return dm - np.transpose(dm, (0, 3, 2, 1))


def codazzi_norm(g: MetricField, m) -> np.ndarray:
    c = codazzi_residual(g, m)
    return np.sqrt(np.einsum("qcab,qcab->q", c, c))


def gauss_residual(g: MetricField, m, curvature: Optional[np.ndarray] = None) -> np.ndarray:
    """``r + |m|^2 + 1/3 - k^2`` at every vertex."""
    m = np.asarray(m)
    _check(g, m)
    r = scalar_curvature(g) if curvature is None else curvature
    k = np.trace(m, axis1=1, axis2=2)
    return r + norm_squared(m) + 1.0 / 3.0 - k**2


def residual_summary(g: MetricField, m) -> dict:
    return {
        "codazzi": float(codazzi_norm(g, m).max()),
        "gauss": float(np.abs(gauss_residual(g, m)).max()),
        "trace": float(np.abs(trace_residual(g, m)).max()),
    }


# ---------------------------------------------------------------------------
# Germ

@dataclass(eq=False)
class Germ:
    """Pair ``(g, m)`` with cached residuals and tolerances."""

    g: MetricField
    m: np.ndarray
    tol_trace: float = TOL_TRACE
    tol_codazzi: float = TOL_CODAZZI
    tol_gauss: float = TOL_GAUSS
    provenance: dict = field(default_factory=dict)
    residuals: Optional[dict] = None

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        _check(self.g, self.m)
        if self.m.shape[1:] != (2, 2):
            raise SurfaceError("m must have shape (n, 2, 2)")
        if not np.allclose(self.m, np.swapaxes(self.m, 1, 2), atol=1e-13, rtol=0):
            raise SurfaceError("m is not symmetric")
        if self.residuals is None:
            self.residuals = residual_summary(self.g, self.m)

    @property
    def mesh(self) -> SurfaceMesh:
        return self.g.mesh

    @property
    def accepted(self) -> bool:
        r = self.residuals
        return (r["trace"] <= self.tol_trace and r["codazzi"] <= self.tol_codazzi
                and r["gauss"] <= self.tol_gauss)

    def require_accepted(self, force: bool = False) -> "Germ":
        if not (force or self.accepted):
            raise GermRejectedError(f"germ residuals {self.residuals} exceed tolerances")
        return self

    @property
    def m_norm_squared(self) -> np.ndarray:
        return norm_squared(self.m)

    def with_m(self, m) -> "Germ":
        return Germ(self.g, m, self.tol_trace, self.tol_codazzi, self.tol_gauss, dict(self.provenance))

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        mesh = self.mesh
        lam_c = self.g.chart_lam
        m_chart = mesh.expand(self.m) * lam_c[:, None, None]
        out = {
            "mesh_ref": mesh.to_dict(),
            "g": self.g.components(),
            "m": np.stack([m_chart[:, 0, 0], m_chart[:, 0, 1], m_chart[:, 1, 1]], axis=1),
            "residuals": self.residuals,
            "tolerances": {"trace": self.tol_trace, "codazzi": self.tol_codazzi, "gauss": self.tol_gauss},
            "provenance": self.provenance,
        }
        if self.g.ref_lam is not None:
            out["reference"] = {"lam": self.g.ref_lam, "curvature": self.g.ref_curvature}
        return out


def germ_from_dict(data: dict, mesh: Optional[SurfaceMesh] = None) -> Germ:
    """Rebuild a germ from its JSON form; validates shapes and consistency."""
    for key in ("mesh_ref", "g", "m", "residuals", "provenance"):
        if key not in data:
            raise SurfaceError(f"germ document missing key '{key}'")
    if mesh is None:
        ref = data["mesh_ref"]
        if isinstance(ref, str):
            from .io import load_json
            ref = load_json(ref)
        mesh = mesh_from_dict(ref)
    gc = np.asarray(data["g"], dtype=float)
    mc = np.asarray(data["m"], dtype=float)
    n = len(mesh.vertices)
    if gc.shape != (n, 3):
        raise SurfaceError("germ field 'g' must hold [g11, g12, g22] per vertex")
    if mc.shape != (n, 3):
        raise SurfaceError("germ field 'm' must hold [m11, m12, m22] per vertex")
    if np.abs(gc[:, 1]).max() > 1e-12 * np.abs(gc[:, 0]).max() or np.abs(gc[:, 0] - gc[:, 2]).max() > 1e-12 * np.abs(gc[:, 0]).max():
        raise SurfaceError("only conformal metrics are supported")
    lam_chart = gc[:, 0]
    lam = mesh.collapse(lam_chart * np.abs(mesh.transition) ** 2, check=1e-8 * lam_chart.max())
    ref = data.get("reference")
    g = MetricField(mesh, lam,
                    None if ref is None else np.asarray(ref["lam"], dtype=float),
                    None if ref is None else float(ref["curvature"]))
    trace = (mc[:, 0] + mc[:, 2]) / lam_chart
    if np.abs(trace).max() > 1e-9:
        raise SurfaceError("stored m fails the trace check")
    m_frame_chart = np.stack([np.stack([mc[:, 0], mc[:, 1]], -1), np.stack([mc[:, 1], mc[:, 2]], -1)], -2)
    m_frame_chart = m_frame_chart / lam_chart[:, None, None]
    m = mesh.collapse(m_frame_chart)
    if np.abs(mesh.expand(m) - m_frame_chart).max() > 1e-8 * max(1.0, np.abs(m).max()):
        raise SurfaceError("m disagrees on identified vertices")
    tol = data.get("tolerances", {})
    return Germ(g, m, tol.get("trace", TOL_TRACE), tol.get("codazzi", TOL_CODAZZI),
                tol.get("gauss", TOL_GAUSS), dict(data["provenance"]))


def fuchsian_germ(refinement: int = 0, mesh: Optional[SurfaceMesh] = None) -> Germ:
    mesh = build_bolza_mesh(refinement) if mesh is None else mesh
    g = fuchsian_metric(mesh)
    return Germ(g, np.zeros((mesh.n_classes, 2, 2)), provenance={"solver": "fuchsian"})


# ---------------------------------------------------------------------------
# Codazzi kernel

def divergence_operator(g: MetricField) -> sp.csr_matrix:
    """``(a, b) -> d_A m_AC`` for ``m = [[a, b], [b, -a]]`` (2n -> 2n)."""
    n = g.mesh.n_classes
    P = sp.kron(sp.eye(n), sp.csr_matrix(np.array([[1.0, 0], [0, 1], [0, 1], [-1, 0]])))
    sel = np.zeros((2, 8))
    for A in range(2):
        for C in range(2):
            sel[C, 4 * A + 2 * A + C] = 1.0
    S = sp.kron(sp.eye(n), sp.csr_matrix(sel))
    return (S @ g.gradient_operator(2) @ P).tocsr()


def _fem_dbar(g: MetricField) -> sp.csr_matrix:
    """Per-triangle ``d/dzbar`` of the chart differential ``phi = lam q``."""
    mesh = g.mesh
    grad, _ = mesh.tri_geometry
    a = 0.5 * (grad[:, 0, :] + 1j * grad[:, 1, :]) * g.corner_lam * np.exp(-2j * mesh.psi[mesh.triangles])
    F = len(mesh.triangles)
    return sp.csr_matrix((a.ravel(), (np.repeat(np.arange(F), 3), mesh.corner_class.ravel())),
                         shape=(F, mesh.n_classes))


def fem_codazzi_spectrum(g: MetricField, k: int = 10) -> np.ndarray:
    """Square roots of the lowest Rayleigh quotients of the P1 Codazzi energy.

    The energy is ``int |div m|^2 dvol`` for ``q = m11 - i m12`` with the
    chart differential ``lam q dz^2`` interpolated linearly per triangle.
    Each value is a complex eigenvalue (two real dimensions).
    """
    _, area = g.mesh.tri_geometry
    B = _fem_dbar(g)
    K = (B.conj().T @ sp.diags(4.0 * area / g.tri_lam**2) @ B).tocsc()
    M = sp.diags(2.0 * g.mass).tocsc()
    n = K.shape[0]
    if n <= 400:
        from scipy.linalg import eigh
        vals = eigh(K.toarray(), M.toarray(), eigvals_only=True)[:k]
    else:
        vals = spla.eigsh(K, k=k, M=M, sigma=-1e-6, which="LM", return_eigenvectors=False)
    return np.sqrt(np.abs(np.sort(vals.real)))


def gap_count(values: np.ndarray, max_count: Optional[int] = None) -> int:
    """Number of values below the largest logarithmic gap of a sorted list."""
    v = np.sort(np.abs(values))
    v = np.maximum(v, 1e-300)
    ratios = v[1:] / v[:-1]
    if max_count is not None:
        ratios = ratios[:max_count]
    return int(np.argmax(ratios)) + 1


def codazzi_kernel_dimension(g: MetricField) -> int:
    """Real dimension of the discrete space of traceless Codazzi tensors."""
    return 2 * gap_count(fem_codazzi_spectrum(g, 10), 8)


def codazzi_basis(g: MetricField, dim: Optional[int] = None):
    """L2-orthonormal basis of the near-kernel of the divergence on traceless tensors.

    Returns ``(basis, singular_values)`` with ``basis`` of shape
    ``(dim, n, 2, 2)``.  ``dim`` defaults to the count detected by
    :func:`codazzi_kernel_dimension`.
    """
    cache = g.__dict__.setdefault("_codazzi_cache", {})
    if dim is None:
        dim = codazzi_kernel_dimension(g)
    if dim in cache:
        return cache[dim]
    D = divergence_operator(g)
    w = np.repeat(g.mass, 2)
    N = (D.T @ sp.diags(w) @ D)
    N = (0.5 * (N + N.T)).tocsc()
    Wm = sp.diags(2.0 * w).tocsc()
    n2 = N.shape[0]
    k = min(dim + 4, n2 - 1)
    if n2 <= 600:
        from scipy.linalg import eigh
        vals, vecs = eigh(N.toarray(), Wm.toarray())
    else:
        vals, vecs = spla.eigsh(N, k=k, M=Wm, sigma=-1e-7, which="LM", v0=np.ones(n2))
    order = np.argsort(vals)
    vals, vecs = vals[order][:dim], vecs[:, order][:, :dim]
    basis = np.stack([traceless_from_components(v[0::2], v[1::2]) for v in vecs.T])
    result = (basis, np.sqrt(np.abs(vals)))
    cache[dim] = result
    return result


def l2_inner(g: MetricField, a: np.ndarray, b: np.ndarray) -> float:
    """Discrete L2 product of frame tensor fields of equal rank."""
    return float(np.sum(g.mass * (a * b).reshape(len(a), -1).sum(axis=1)))


def project_codazzi(g: MetricField, m_raw) -> np.ndarray:
    """L2-orthogonal projection onto the discrete traceless Codazzi space."""
    m_raw = np.asarray(m_raw, dtype=float)
    _check(g, m_raw)
    if np.abs(np.trace(m_raw, axis1=1, axis2=2)).max() > 1e-10 * max(1.0, np.abs(m_raw).max()):
        raise SurfaceError("project_codazzi expects a traceless input")
    basis, _ = codazzi_basis(g)
    coef = np.array([l2_inner(g, b, m_raw) for b in basis])
    return np.einsum("k,kqab->qab", coef, basis)


def random_codazzi(g: MetricField, seed: int, amp: float) -> np.ndarray:
    """Random traceless Codazzi tensor scaled to ``max |m|^2 = amp``."""
    basis, _ = codazzi_basis(g)
    rng = np.random.default_rng(seed)
    m = np.einsum("k,kqab->qab", rng.standard_normal(len(basis)), basis)
    return m * np.sqrt(amp / norm_squared(m).max())


# ---------------------------------------------------------------------------
# Conformal Gauss solver

def _gauss_map(g: MetricField, m2: np.ndarray, u: np.ndarray):
    """``F(u)`` and its Jacobian for the metric ``e^{-u} g``."""
    gu = g.conformal_change(u)
    r = scalar_curvature(gu)
    F = r + np.exp(2 * u) * m2 + 1.0 / 3.0
    return gu, F


def _gauss_jacobian(gu: MetricField, r: np.ndarray, m2u: np.ndarray) -> sp.csr_matrix:
    lap = gu.fit_laplacian
    return (lap + sp.diags(r + 2.0 * m2u)).tocsr()


def solve_conformal_gauss(g: MetricField, m, tol: float = 1e-12, max_iter: int = 20, fixed=None):
    """Solve ``r(e^{-u} g) + |m|^2 + 1/3 = 0`` for ``u`` by damped Newton.

    Parameters
    ----------
    g : MetricField
        Starting metric.
    m : array (n, 2, 2)
        Traceless Codazzi frame components with respect to ``g``.  The
        covariant tensor is kept fixed, so its frame components scale by
        ``e^u`` in the new metric.
    tol : float
        Target for ``max |F(u)|``.
    max_iter : int
        Newton iteration cap.
    fixed : array of int, optional
        Vertices where ``u = 0`` is imposed (Dirichlet data on a patch);
        the equation is enforced at the remaining vertices only.

    Returns
    -------
    u : array (n,)
    germ : Germ
        ``(e^{-u} g, e^u m)`` with its residuals.
    """
    m = np.asarray(m, dtype=float)
    _check(g, m)
    m2 = norm_squared(m)
    u = np.zeros(g.mesh.n_classes)
    free = np.ones(len(u), dtype=bool)
    if fixed is not None:
        free[np.asarray(fixed, dtype=int)] = False
    gu, F = _gauss_map(g, m2, u)
    F = np.where(free, F, 0.0)
    history = [float(np.abs(F).max())]
    for it in range(max_iter):
        if history[-1] <= tol:
            break
        r = scalar_curvature(gu)
        J = _gauss_jacobian(gu, r, np.exp(2 * u) * m2)
        if not free.all():
            keep = sp.diags(free.astype(float))
            J = (keep @ J + sp.diags((~free).astype(float))).tocsr()
        try:
            with np.errstate(all="raise"):
                step = spla.spsolve(J.tocsc(), -F)
        except (RuntimeError, FloatingPointError) as exc:
            raise SingularLinearizationError(str(exc)) from exc
        if not np.all(np.isfinite(step)) or np.abs(step).max() > 1e6:
            raise SingularLinearizationError("Newton step is not finite: Jacobian near singular")
        norm0 = np.sqrt(integrate(F**2, gu))
        t = 1.0
        while True:
            gt, Ft = _gauss_map(g, m2, u + t * step)
            Ft = np.where(free, Ft, 0.0)
            if np.sqrt(integrate(Ft**2, gt)) < (1 - 1e-4 * t) * norm0 or t < 1e-4:
                break
            t *= 0.5
        u = u + t * step
        gu, F = gt, Ft
        history.append(float(np.abs(F).max()))
    if history[-1] > tol:
        raise ConvergenceError(f"Newton did not converge: residual {history[-1]:.3e}", history)
    germ = Germ(gu, np.exp(u)[:, None, None] * m,
                provenance={"solver": "newton", "tol": tol, "iterations": len(history) - 1,
                            "history": history})
    return u, germ


class ConformalGaussSolver(BaseEstimator):
    """Estimator wrapper of :func:`solve_conformal_gauss`.

    ``fit(g, m)`` stores ``u_``, ``germ_``, ``n_iter_`` and ``history_``.
    """

    def __init__(self, tol: float = 1e-12, max_iter: int = 20):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, g: MetricField, m=None):
        if m is None:
            m = np.zeros((g.mesh.n_classes, 2, 2))
        self.u_, self.germ_ = solve_conformal_gauss(g, m, self.tol, self.max_iter)
        self.history_ = self.germ_.provenance["history"]
        self.n_iter_ = len(self.history_) - 1
        return self

    def transform(self, g: MetricField) -> MetricField:
        return g.conformal_change(self.u_)


def solve_germ(refinement: int = 2, seed: int = 7, amp: float = 0.1, tol: float = 1e-12,
               rtol: float = 1e-3, growth: float = 1.25, max_solves: int = 40) -> Germ:
    """Germ built from a random Codazzi tensor on the Fuchsian metric.

    The input amplitude ``a`` of ``sqrt(a) m`` is tuned so that the solved
    germ has ``max |m|^2 = amp`` to relative accuracy ``rtol`` (the
    conformal change enlarges ``|m|`` where the metric shrinks).  The map
    from ``a`` to the solved ``max |m|^2`` folds back at a critical input,
    so the target is first bracketed by geometric growth from below and
    then located with Brent's method on the branch through the Fuchsian
    germ.
    """
    g0 = fuchsian_metric(build_bolza_mesh(refinement))
    m = random_codazzi(g0, seed, 1.0)
    solved = {}

    def reached(a):
        if a == 0.0:
            return -amp
        if a not in solved:
            if len(solved) >= max_solves:
                raise ConvergenceError(f"amplitude search exceeded {max_solves} solves", [])
            _, solved[a] = solve_conformal_gauss(g0, np.sqrt(a) * m, tol)
        return float(solved[a].m_norm_squared.max()) - amp

    lo, hi = 0.0, 0.5 * amp
    try:
        while reached(hi) < 0:
            lo, hi = hi, hi * growth
    except (ConvergenceError, SingularLinearizationError) as exc:
        raise ConvergenceError(f"amplitude {amp} lies beyond the fold of the Gauss solver "
                               f"(last converged input {lo:.4g})", []) from exc
    if abs(reached(hi)) > rtol * amp:
        brentq(reached, lo, hi, xtol=1e-12, rtol=1e-3 * rtol)
    used = min(solved, key=lambda a: abs(reached(a)))
    germ = solved[used]
    germ.provenance.update({"qd_seed": seed, "amp": amp, "input_amp": used, "refinement": refinement})
    return germ


def disk_germ(radius: float = 0.5, resolution: int = 16, amp: float = 0.1,
              coefficients=(1.0, 0.6 - 0.3j, 0.4j), tol: float = 1e-10) -> Germ:
    """Germ on a disk patch from a polynomial quadratic differential.

    ``m`` is the real part of ``phi(z) dz^2`` with ``phi`` the polynomial with
    the given coefficients, scaled to ``max |m|^2 = amp`` on the Fuchsian
    metric; the Gauss equation is then solved with ``u = 0`` on the rim.
    """
    mesh = build_disk_patch(radius, resolution)
    g0 = fuchsian_metric(mesh)
    z = mesh.z
    phi = np.polyval(list(coefficients)[::-1], z)
    m = traceless_from_components(phi.real / g0.lam, -phi.imag / g0.lam)
    m *= np.sqrt(amp / norm_squared(m).max())
    _, germ = solve_conformal_gauss(g0, m, tol, fixed=mesh.boundary_vertices)
    germ.provenance.update({"patch": "disk", "radius": radius, "resolution": resolution, "amp": amp})
    return germ


# ---------------------------------------------------------------------------
# Circle action and cotangent element

def circle_action(germ: Germ, tau: float) -> Germ:
    """``m -> cos(tau) m + sin(tau) eps.m`` with ``g`` unchanged."""
    m = np.cos(tau) * germ.m + np.sin(tau) * epsilon_dot(germ.m)
    out = Germ(germ.g, m, germ.tol_trace, germ.tol_codazzi, germ.tol_gauss, dict(germ.provenance))
    out.provenance["circle_tau"] = float(tau) + float(germ.provenance.get("circle_tau", 0.0))
    return out


def cotangent_element(germ: Germ) -> np.ndarray:
    """Density components ``det(g)^{1/2} g^{AC} g^{BD} m_CD`` at chart vertices.

    For a conformal metric these equal the frame components of ``m``
    (expressed in chart axes), so ``g_AB mhat^{AB} = lam tr(m_frame) / lam``.
    """
    return germ.mesh.expand(germ.m)


def pairing(germ: Germ, h) -> float:
    """``int g^{AC} g^{BD} m_CD h_AB dvol`` with ``h`` in frame components."""
    h = np.asarray(h, dtype=float)
    _check(germ.g, h)
    return l2_inner(germ.g, germ.m, h)


def lie_derivative_metric(g: MetricField, v) -> np.ndarray:
    """``d_A v_B + d_B v_A`` for a frame vector field ``v``."""
    from .surface import covariant_derivative
    dv = covariant_derivative(np.asarray(v, dtype=float), g)
    return dv + np.swapaxes(dv, 1, 2)


def random_vector_field(g: MetricField, rng: np.random.Generator, count: int = 8) -> np.ndarray:
    """Smooth random frame vector field ``df + eps.dh`` from Gaussian bump fields."""
    from .surface import covariant_derivative, smooth_fields
    modes = smooth_fields(g.mesh, count, seed=int(rng.integers(2**31)))
    f = modes @ rng.standard_normal(modes.shape[1])
    h = modes @ rng.standard_normal(modes.shape[1])
    return covariant_derivative(f, g) + covariant_derivative(h, g) @ EPSILON.T
