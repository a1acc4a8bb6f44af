"""The flat SO(3, C) connection of a germ, its curvature and holonomy.

Sections of ``E = T*S (+) R`` are stored as complex 3-vectors ``(eta_1,
eta_2, eta_3)`` in an orthonormal frame.  In direction ``e_A`` the
connection acts as ``nabla_A eta = e_A(eta) + cal_A eta`` with

    cal_A = [[-Gamma_A J, theta_A.], [-theta_A.^T, 0]],
    theta_AB = m_AB + (i / sqrt 6) eps_AB,

where ``Gamma_A J`` is the Levi-Civita part on the cotangent block.
Transport along an edge is ``exp(-cal(edge))`` with midpoint-averaged
coefficients, expressed in the chart-axis frames of the edge's chart.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import expm

from .germ import EPSILON, Germ
from .surface import SparseOperator, covariant_derivative, scalar_curvature, smooth_fields

SQRT6 = np.sqrt(6.0)
J = np.array([[0.0, -1.0], [1.0, 0.0]])
T_MATRIX = np.diag([-1.0, -1.0, 1.0])
VARIANTS = ("nabla", "nabla_prime", "nabla_bar", "nabla_bar_prime")

# Generator loops: (j, i) means centre -> midpoint of side j, cross to the
# partner midpoint on side i, back to the centre.  With these choices the
# product of commutators U1 U2 U1^-1 U2^-1 U3 U4 U3^-1 U4^-1 is the relator.
GENERATOR_LOOPS = ((2, 0), (1, 3), (6, 4), (5, 7))


class PathError(ValueError):
    """A vertex sequence is not a path of the mesh."""


@dataclass(eq=False)
class ConnectionField:
    """Frame coefficients ``theta[q, A, B]`` of a connection on ``E``."""

    germ: Germ
    theta: np.ndarray
    variant: str = "nabla"

    @property
    def mesh(self):
        return self.germ.mesh

    @property
    def g(self):
        return self.germ.g


def theta_from_germ(m: np.ndarray) -> np.ndarray:
    return m.astype(complex) + (1j / SQRT6) * EPSILON


def build_connection(germ: Germ, variant: str = "nabla") -> ConnectionField:
    """Connection coefficients of the germ for one of the four variants.

    ``nabla_prime`` replaces ``theta`` by ``-theta``; ``nabla_bar`` by its
    complex conjugate; ``nabla_bar_prime`` does both.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}'")
    theta = theta_from_germ(germ.m)
    if variant in ("nabla_bar", "nabla_bar_prime"):
        theta = np.conj(theta)
    if variant in ("nabla_prime", "nabla_bar_prime"):
        theta = -theta
    return ConnectionField(germ, theta, variant)


def t_conjugate(conn: ConnectionField) -> ConnectionField:
    """Gauge transform by ``T = diag(-1, -1, 1)`` (``theta -> -theta``)."""
    swap = {"nabla": "nabla_prime", "nabla_prime": "nabla",
            "nabla_bar": "nabla_bar_prime", "nabla_bar_prime": "nabla_bar"}
    return ConnectionField(conn.germ, -conn.theta, swap[conn.variant])


# ---------------------------------------------------------------------------
# Curvature

def curvature_2form(conn: ConnectionField) -> np.ndarray:
    """``R_12 = [nabla_1, nabla_2]`` as a 3x3 complex matrix at every vertex.

    Cotangent block ``-r_DB12 - (theta_1B theta_2D - theta_2B theta_1D)``,
    mixed blocks ``+-(d_1 theta_2B - d_2 theta_1B)`` and zero in the corner.
    """
    g = conn.g
    th = conn.theta
    r = scalar_curvature(g)
    dth = covariant_derivative(th, g)  # [q, A, C, B] = d_A theta_CB
    cod = dth[:, 0, 1, :] - dth[:, 1, 0, :]
    n = len(th)
    R = np.zeros((n, 3, 3), dtype=complex)
    quad = np.einsum("qb,qd->qbd", th[:, 0, :], th[:, 1, :]) - np.einsum("qb,qd->qbd", th[:, 1, :], th[:, 0, :])
    R[:, :2, :2] = -0.5 * r[:, None, None] * EPSILON.T[None] - quad
    R[:, :2, 2] = cod
    R[:, 2, :2] = -cod
    return R


def gauss_block(conn: ConnectionField) -> np.ndarray:
    """Scalar ``-r - theta_AB theta_BA + theta_AA theta_BB`` per vertex."""
    th = conn.theta
    r = scalar_curvature(conn.g)
    return -r - np.einsum("qab,qba->q", th, th) + np.trace(th, axis1=1, axis2=2) ** 2


def codazzi_block(conn: ConnectionField) -> np.ndarray:
    """``d_1 theta_2B - d_2 theta_1B`` per vertex (complex 2-vector)."""
    dth = covariant_derivative(conn.theta, conn.g)
    return dth[:, 0, 1, :] - dth[:, 1, 0, :]


def curvature_norm(conn: ConnectionField) -> float:
    """``max_q |R_12(q)|_F / sqrt 2`` (each independent entry counted once)."""
    R = curvature_2form(conn)
    return float(np.sqrt(np.einsum("qij,qij->q", R, R.conj()).real).max() / np.sqrt(2.0))


# ---------------------------------------------------------------------------
# Transport

def _chart_grad_log_lam(g) -> np.ndarray:
    """Complex chart gradient ``d_x + i d_y`` of ``log lam`` at chart vertices."""
    mesh = g.mesh
    d = g.log_lam_derivatives
    grad_rep = (d[:, 0] + 1j * d[:, 1])[mesh.vertex_class]
    z_rep = mesh.z[mesh.representatives][mesh.vertex_class]
    W = np.array(mesh.words)
    c, dd = W[:, 1, 0], W[:, 1, 1]
    inner = grad_rep + 4.0 * np.conj(c / (c * z_rep + dd))
    return inner / np.conj(mesh.transition)


class _ChartData:
    """Per chart-vertex connection data in chart-axis frames."""

    def __init__(self, conn: ConnectionField):
        mesh = conn.mesh
        self.z = mesh.z
        self.lam = conn.g.chart_lam
        self.grad_w = 0.5 * _chart_grad_log_lam(conn.g)
        self.theta = mesh.expand(conn.theta)
        self.psi = mesh.psi
        self.vertex_class = mesh.vertex_class
        nb = set()
        for a, b in mesh.edges:
            nb.add((int(a), int(b)))
            nb.add((int(b), int(a)))
        self.adjacent = nb


def _chart_data(conn: ConnectionField) -> _ChartData:
    cache = conn.__dict__.get("_chart")
    if cache is None:
        cache = _ChartData(conn)
        conn.__dict__["_chart"] = cache
    return cache


def _edge_generator(cd: _ChartData, a: int, b: int) -> np.ndarray:
    """so(3, C) element ``cal(edge)`` for the chart edge ``a -> b``."""
    dz = cd.z[b] - cd.z[a]
    s = np.sqrt(np.sqrt(cd.lam[a] * cd.lam[b]))
    gw = 0.5 * (cd.grad_w[a] + cd.grad_w[b])
    omega = gw.imag * dz.real - gw.real * dz.imag
    th = 0.5 * (cd.theta[a] + cd.theta[b])
    disp = s * np.array([dz.real, dz.imag])
    thv = disp @ th  # sum_A disp_A theta_AB
    A = np.zeros((3, 3), dtype=complex)
    A[:2, :2] = -omega * J
    A[:2, 2] = thv
    A[2, :2] = -thv
    return A


def _jump_matrix(cd: _ChartData, a: int, b: int) -> np.ndarray:
    """Frame change from copy ``a`` to copy ``b`` of the same quotient vertex."""
    phi = cd.psi[b] - cd.psi[a]
    R = np.eye(3, dtype=complex)
    R[:2, :2] = [[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]]
    return R


def parallel_transport(conn: ConnectionField, path) -> np.ndarray:
    """Ordered product of edge transports along a chart-vertex path.

    Consecutive entries must be adjacent in the chart mesh or be copies of
    the same quotient vertex (a crossing of an identified side).
    """
    cd = _chart_data(conn)
    path = [int(p) for p in path]
    n = len(cd.z)
    if any(p < 0 or p >= n for p in path):
        raise PathError("path vertex out of range")
    U = np.eye(3, dtype=complex)
    for a, b in zip(path[:-1], path[1:]):
        if a == b:
            continue
        if (a, b) in cd.adjacent:
            U = expm(-_edge_generator(cd, a, b)) @ U
        elif cd.vertex_class[a] == cd.vertex_class[b]:
            U = _jump_matrix(cd, a, b) @ U
        else:
            raise PathError(f"vertices {a} and {b} are not adjacent")
    return U


def path_length(conn: ConnectionField, path) -> float:
    cd = _chart_data(conn)
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        if (a, b) in cd.adjacent:
            total += abs(cd.z[b] - cd.z[a]) * np.sqrt(np.sqrt(cd.lam[a] * cd.lam[b]))
    return float(total)


def _geodesic_chain(mesh, start: int, end: int) -> list:
    """Mesh vertices on the straight chart ray from the centre to a side midpoint."""
    z = mesh.z
    target = z[end]
    direction = target / abs(target)
    on_ray = np.flatnonzero((np.abs(z.imag * direction.real - z.real * direction.imag) < 1e-12)
                            & ((z * np.conj(direction)).real >= -1e-15)
                            & (np.abs(z) <= abs(target) + 1e-12))
    return [int(v) for v in on_ray[np.argsort(np.abs(z[on_ray]))]]


def side_midpoint_vertex(mesh, s: int) -> int:
    from .surface import geodesic_midpoint, octagon_vertex
    zm = geodesic_midpoint(octagon_vertex(s), octagon_vertex(s + 1))
    return int(np.argmin(np.abs(mesh.z - zm)))


def generator_loops(mesh) -> list:
    """Chart-vertex paths of the four generator loops based at the centre."""
    centre = int(np.argmin(np.abs(mesh.z)))
    loops = []
    for j, i in GENERATOR_LOOPS:
        mj, mi = side_midpoint_vertex(mesh, j), side_midpoint_vertex(mesh, i)
        out = _geodesic_chain(mesh, centre, mj)
        back = _geodesic_chain(mesh, centre, mi)[::-1]
        if out[0] != centre or back[-1] != centre:
            raise PathError("generator loop does not start at the centre")
        loops.append(out + back)
    return loops


def generator_holonomies(conn: ConnectionField):
    loops = generator_loops(conn.mesh)
    return [parallel_transport(conn, p) for p in loops], loops


def relator_product(U) -> np.ndarray:
    inv = np.linalg.inv
    U1, U2, U3, U4 = U
    return U1 @ U2 @ inv(U1) @ inv(U2) @ U3 @ U4 @ inv(U3) @ inv(U4)


def relator_check(conn: ConnectionField, generators=None) -> float:
    """``|U1 U2 U1^-1 U2^-1 U3 U4 U3^-1 U4^-1 - I|_F`` for the generator loops."""
    if generators is None:
        U, loops = generator_holonomies(conn)
    else:
        loops = list(generators)
        if len(loops) != 4:
            raise PathError("four generator loops are required")
        starts = {(p[0], p[-1]) for p in loops}
        if len(starts) != 1 or loops[0][0] != loops[0][-1]:
            raise PathError("loops must share a base vertex")
        U = [parallel_transport(conn, p) for p in loops]
    return float(np.linalg.norm(relator_product(U) - np.eye(3)))


def so3c_residual(U: np.ndarray) -> tuple:
    """``(|U^T U - I|_F, |det U - 1|)``."""
    return float(np.linalg.norm(U.T @ U - np.eye(3))), float(abs(np.linalg.det(U) - 1.0))


# ---------------------------------------------------------------------------
# Operators on sections

def _section_frames(mesh) -> np.ndarray:
    """Per chart vertex 3x3 frame rotation (cotangent block rotated by psi)."""
    psi = mesh.psi
    R = np.zeros((len(psi), 3, 3))
    R[:, 0, 0] = np.cos(psi)
    R[:, 0, 1] = -np.sin(psi)
    R[:, 1, 0] = np.sin(psi)
    R[:, 1, 1] = np.cos(psi)
    R[:, 2, 2] = 1.0
    return R


def fem_covariant_derivative(conn: ConnectionField) -> SparseOperator:
    """P1 discretization of ``nabla`` from sections to E-valued 1-forms.

    Sections live at quotient vertices (3 complex components); the output
    lives on triangles (components ``[t, A, a]``) with weights ``area``.
    """
    mesh = conn.mesh
    g = conn.g
    grad, _ = mesh.tri_geometry
    theta_c = mesh.expand(conn.theta)[mesh.triangles].mean(axis=1)  # (F, 2, 2)
    Gam = g.tri_frame_connection  # (F, 2)
    lam_t = g.tri_lam
    F = len(mesh.triangles)
    cal = np.zeros((F, 2, 3, 3), dtype=complex)
    for A in range(2):
        cal[:, A, :2, :2] = -Gam[:, A, None, None] * J
        cal[:, A, :2, 2] = theta_c[:, A, :]
        cal[:, A, 2, :2] = -theta_c[:, A, :]
    Rf = _section_frames(mesh)[mesh.triangles]  # (F, 3 corners, 3, 3)
    s = 1.0 / np.sqrt(lam_t)
    # block for corner i: (s grad_Ai I + cal_A / 3) R_i
    blocks = (s[:, None, None, None, None] * grad[:, :, :, None, None] * np.eye(3)
              + cal[:, :, None, :, :] / 3.0)  # (F, A, i, 3, 3)
    blocks = np.einsum("faiuv,fivw->faiuw", blocks, Rf)
    rows = (np.arange(F)[:, None, None, None, None] * 6 + np.arange(2)[None, :, None, None, None] * 3
            + np.arange(3)[None, None, None, :, None])
    cols = mesh.corner_class[:, None, :, None, None] * 3 + np.arange(3)[None, None, None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    n = mesh.n_classes
    B = sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(6 * F, 3 * n))
    w_out = np.repeat(g.tri_area, 6)
    w_in = np.repeat(g.mass, 3)
    return SparseOperator(B, w_in, w_out, "nabla_fem")


def _lowest_sections(conn: ConnectionField, k: int = 4):
    if not conn.mesh.is_closed:
        raise ValueError("irreducibility margin requires the closed mesh")
    op = fem_covariant_derivative(conn)
    N = op.normal_form().tocsc()
    W = sp.diags(op.domain_weight).tocsc()
    n = N.shape[0]
    if n <= 600:
        from scipy.linalg import eigh
        vals, vecs = eigh(N.toarray(), W.toarray())
        vals, vecs = vals[:k], vecs[:, :k]
    else:
        try:
            vals, vecs = spla.eigsh(N, k=k, M=W, sigma=-1e-4, which="LM",
                                    v0=np.ones(n, dtype=complex))
        except spla.ArpackNoConvergence as exc:
            raise RuntimeError("eigensolver did not converge") from exc
        order = np.argsort(vals.real)
        vals, vecs = vals[order], vecs[:, order]
    return np.sqrt(np.clip(vals.real, 0.0, None)), vecs


def irreducibility_margin(conn: ConnectionField, k: int = 4) -> float:
    """Smallest weighted singular value of the discrete ``nabla`` on sections."""
    sv, _ = _lowest_sections(conn, k)
    return float(sv[0])


def second_order_kernel_check(germ: Germ, k: int = 4) -> dict:
    """Lowest modes of ``nabla`` and the share of their norm in the ``T*S`` block.

    Returns the smallest singular values and, for each mode, the weighted
    norm fraction carried by ``(eta_1, eta_2)``.
    """
    conn = build_connection(germ, "nabla")
    sv, vecs = _lowest_sections(conn, k)
    w = np.repeat(conn.g.mass, 3)
    frac = []
    for v in vecs.T:
        e = (w * np.abs(v) ** 2).reshape(-1, 3)
        frac.append(float(np.sqrt(e[:, :2].sum() / e.sum())))
    return {"singular_values": sv.tolist(), "cotangent_fraction": frac}


def second_order_commutator_residual(germ: Germ, count: int = 5) -> float:
    """Relative gap between ``nabla'_A nabla_A`` and ``nabla_A nabla'_A`` on smooth sections.

    The test sections are ``(df, h)`` for smooth bump fields ``f, h``.
    """
    A, B = second_order_laplacians(germ)
    g = germ.g
    f = smooth_fields(g.mesh, count + 1, seed=0)
    n = g.mesh.n_classes
    worst = 0.0
    for k in range(1, count + 1):
        d = (g.gradient_operator(0) @ f[:, k]).reshape(n, 2)
        eta = np.concatenate([d, f[:, [k - 1]]], axis=1).reshape(-1).astype(complex)
        a = A @ eta
        worst = max(worst, float(np.linalg.norm(a - B @ eta) / np.linalg.norm(a)))
    return worst


def section_gradient(conn: ConnectionField) -> sp.csr_matrix:
    """Vertex-based ``nabla``: sections ``[q, a]`` to 1-forms ``[q, A, a]``."""
    g = conn.g
    n = g.mesh.n_classes
    G1 = g.gradient_operator(1)  # [q, A, B] from [q, B]
    G0 = g.gradient_operator(0)  # [q, A] from [q]
    P12 = sp.kron(sp.eye(n), sp.csr_matrix(np.array([[1, 0, 0], [0, 1, 0]], float)))
    P3 = sp.kron(sp.eye(n), sp.csr_matrix(np.array([[0, 0, 1.0]])))
    E1 = sp.kron(sp.eye(n), sp.csr_matrix(np.kron(np.eye(2), np.array([[1.0, 0], [0, 1], [0, 0]]))))
    E3 = sp.kron(sp.eye(n), sp.csr_matrix(np.kron(np.eye(2), np.array([[0.0], [0], [1]]))))
    D = E1 @ G1 @ P12 + E3 @ G0 @ P3
    th = conn.theta
    blk = np.zeros((n, 2, 3, 3), dtype=complex)
    blk[:, :, :2, 2] = th
    blk[:, :, 2, :2] = -th
    return (D + sp.block_diag(list(blk.reshape(n, 6, 3)))).tocsr()


def one_form_divergence(conn: ConnectionField) -> sp.csr_matrix:
    """Vertex-based ``v -> nabla_A v_A`` for E-valued 1-forms ``[q, A, a]``."""
    g = conn.g
    n = g.mesh.n_classes
    G2 = g.gradient_operator(2)  # [q, C, A, B] from [q, A, B]
    G1 = g.gradient_operator(1)  # [q, C, A] from [q, A]
    # pick v_AB (B in 0,1) and v_A3
    Pab = np.zeros((4, 6))
    for A in range(2):
        for B in range(2):
            Pab[2 * A + B, 3 * A + B] = 1.0
    Pa3 = np.zeros((2, 6))
    for A in range(2):
        Pa3[A, 3 * A + 2] = 1.0
    Cab = np.zeros((3, 8))
    for A in range(2):
        for B in range(2):
            Cab[B, 4 * A + 2 * A + B] = 1.0
    Ca3 = np.zeros((3, 4))
    for A in range(2):
        Ca3[2, 2 * A + A] = 1.0
    I = sp.eye(n)
    D = (sp.kron(I, sp.csr_matrix(Cab)) @ G2 @ sp.kron(I, sp.csr_matrix(Pab))
         + sp.kron(I, sp.csr_matrix(Ca3)) @ G1 @ sp.kron(I, sp.csr_matrix(Pa3)))
    th = conn.theta
    blk = np.zeros((n, 3, 2, 3), dtype=complex)
    for A in range(2):
        blk[:, :2, A, 2] = th[:, A, :]
        blk[:, 2, A, :2] = -th[:, A, :]
    return (D + sp.block_diag(list(blk.reshape(n, 3, 6)))).tocsr()


def second_order_laplacians(germ: Germ):
    """Vertex-based ``nabla'_A nabla_A`` and ``nabla_A nabla'_A`` (sections -> sections)."""
    c = build_connection(germ, "nabla")
    cp = build_connection(germ, "nabla_prime")
    return (one_form_divergence(cp) @ section_gradient(c)).tocsr(), \
        (one_form_divergence(c) @ section_gradient(cp)).tocsr()


# ---------------------------------------------------------------------------
# Report

def holonomy_report(conn: ConnectionField) -> dict:
    from .io import complex_matrix_to_json
    U, loops = generator_holonomies(conn)
    res = []
    for Uk, p in zip(U, loops):
        a, b = so3c_residual(Uk)
        res.append({"orthogonality": a, "determinant": b, "loop_length": path_length(conn, p)})
    return {
        "generators": [complex_matrix_to_json(Uk) for Uk in U],
        "relator_deviation": float(np.linalg.norm(relator_product(U) - np.eye(3))),
        "so3c_residuals": res,
        "irreducibility_margin": irreducibility_margin(conn),
        "curvature_norm": curvature_norm(conn),
    }
