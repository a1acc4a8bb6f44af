"""Genus-2 and disk meshes, conformal metrics and discrete calculus.

The closed surface is the regular octagon with interior angles pi/4 in the
Poincare disk, glued by the commutator pattern
``a1 b1 a1^-1 b1^-1 a2 b2 a2^-1 b2^-1``.  Every vertex of the chart
triangulation belongs to a *class* (a vertex of the quotient surface).  Each
class has a representative chart vertex; the other members are images of the
representative under a side-pairing word ``G`` (``z_c = G(z_rep)``).

Fields are stored per class, in the orthonormal frame ``e_A = lam^{-1/2} dx^A``
of the representative.  A rank-k frame tensor at a copy ``c`` is obtained by
rotating every index by ``psi_c = arg G_c'(z_rep)``.

Two discretizations are provided:

* P1 finite elements (cotangent stiffness, lumped mass) for scalar elliptic
  problems and for per-triangle energies;
* vertex-centred quadratic least-squares fits on unfolded stars, used for
  covariant derivatives of tensors of any rank.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay

FUCHSIAN_SCALE = 24.0
FUCHSIAN_CURVATURE = -1.0 / 3.0

OCTAGON_VERTEX_RADIUS = 2.0 ** -0.25
# cosh of the distance from the centre to a side midpoint is cot(pi/8)
_SIDE_DISTANCE = np.arccosh(1.0 + np.sqrt(2.0))
SIDE_PAIRS = ((0, 2), (1, 3), (4, 6), (5, 7))

# least-squares derivative stencils: polynomial degree and unfolded ring count
FIT_DEGREE = 4
FIT_RINGS = 2


class SurfaceError(ValueError):
    """Base class for invalid surface data."""


class DomainError(SurfaceError):
    """A point lies outside the unit disk."""


class SingularMetricError(SurfaceError):
    """A metric is not positive definite."""


class MeshMismatchError(SurfaceError):
    """Two objects live on different meshes."""


# ---------------------------------------------------------------------------
# Moebius maps of the disk (SL(2, C) matrices with unit determinant)

def mobius(M, z):
    """Apply the Moebius map ``M`` to ``z``."""
    return (M[0, 0] * z + M[0, 1]) / (M[1, 0] * z + M[1, 1])


def mobius_derivative(M, z):
    """Complex derivative of a unit-determinant Moebius map."""
    return 1.0 / (M[1, 0] * z + M[1, 1]) ** 2


def rotation_map(phi: float) -> np.ndarray:
    return np.array([[np.exp(0.5j * phi), 0.0], [0.0, np.exp(-0.5j * phi)]])


def boost_map(distance: float) -> np.ndarray:
    """Hyperbolic translation along the real axis (curvature -1 units)."""
    ch, sh = np.cosh(0.5 * distance), np.sinh(0.5 * distance)
    return np.array([[ch, sh], [sh, ch]], dtype=complex)


def geodesic_midpoint(a: complex, b: complex) -> complex:
    """Midpoint of the hyperbolic geodesic segment from ``a`` to ``b``."""
    w = (b - a) / (1.0 - np.conj(a) * b)
    r = abs(w)
    if r == 0.0:
        return a
    mid = w / r * np.tanh(0.5 * np.arctanh(r))
    return (mid + a) / (1.0 + np.conj(a) * mid)


def side_angle(s: int) -> float:
    return s * np.pi / 4.0


def octagon_vertex(s: int) -> complex:
    return OCTAGON_VERTEX_RADIUS * np.exp(1j * (2 * s - 1) * np.pi / 8.0)


def side_pairing(i: int, j: int) -> np.ndarray:
    """Isometry taking side ``j`` onto side ``i`` (interior to exterior).

    Sends vertex ``v_j`` to ``v_{i+1}`` and ``v_{j+1}`` to ``v_i``.
    """
    M = rotation_map(side_angle(i)) @ boost_map(2.0 * _SIDE_DISTANCE) @ rotation_map(np.pi - side_angle(j))
    return M / np.sqrt(np.linalg.det(M))


def generator_maps() -> dict:
    """The four side pairings ``side j -> side i`` keyed by ``(i, j)``."""
    return {(i, j): side_pairing(i, j) for i, j in SIDE_PAIRS}


@lru_cache(maxsize=8)
def orbit_maps(cutoff: float) -> tuple:
    """Elements of the surface group moving the origin less than ``cutoff``.

    Distances are in curvature -1 units.  Found by breadth-first search over
    words in the side pairings; the identity comes first.
    """
    gens = [side_pairing(i, j) for i, j in SIDE_PAIRS]
    gens += [np.linalg.inv(M) for M in gens]
    out = [np.eye(2, dtype=complex)]
    seen = {(0.0, 0.0)}
    frontier = list(out)
    while frontier:
        nxt = []
        for W in frontier:
            for M in gens:
                P = W @ M
                p = mobius(P, 0.0)
                key = (round(p.real, 9), round(p.imag, 9))
                if key in seen or 2.0 * np.arctanh(min(abs(p), 1 - 1e-16)) > cutoff:
                    continue
                seen.add(key)
                out.append(P)
                nxt.append(P)
        frontier = nxt
    return tuple(out)


def smooth_fields(mesh: "SurfaceMesh", count: int, seed: int = 0, width: float = 0.6) -> np.ndarray:
    """Smooth scalar class fields built from Gaussian bumps (columns).

    Each field is ``exp(-d(z, c)^2 / width^2)`` in the curvature -1 distance,
    summed over the orbit of the centre ``c`` on closed meshes, so it is a
    genuinely smooth function on the surface.  Nodal values of discrete
    eigenvectors carry mesh-scale roughness that repeated differentiation
    amplifies; these fields do not.
    """
    rng = np.random.default_rng(seed)
    z = mesh.z[mesh.representatives]
    rmax = OCTAGON_VERTEX_RADIUS if mesh.is_closed else 0.6 * np.abs(z).max()
    radius = rmax * np.sqrt(rng.uniform(0.0, 1.0, count))
    centres = radius * np.exp(2j * np.pi * rng.uniform(0.0, 1.0, count))
    if mesh.is_closed:
        maps = orbit_maps(round(4.0 * np.arctanh(OCTAGON_VERTEX_RADIUS) + 7.0 * width, 6))
    else:
        maps = [np.eye(2, dtype=complex)]
    img = np.stack([mobius(M, centres) for M in maps]).ravel()
    out = np.zeros((len(z), count))
    for start in range(0, len(z), 512):
        zz = z[start:start + 512, None]
        w = np.abs((zz - img[None, :]) / (1.0 - np.conj(img)[None, :] * zz))
        d = 2.0 * np.arctanh(np.minimum(w, 1 - 1e-16))
        out[start:start + 512] = np.exp(-(d / width) ** 2).reshape(len(zz), len(maps), count).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# Meshes

@dataclass(eq=False)
class SurfaceMesh:
    """Chart triangulation of a closed genus-2 surface or of a disk.

    Attributes
    ----------
    vertices : (N, 2) array
        Chart coordinates in the unit disk.
    triangles : (F, 3) int array
        Positively oriented vertex triples.
    vertex_class : (N,) int array
        Quotient vertex of each chart vertex.
    transition : (N,) complex array
        ``G_c'(z_rep)`` for the word ``G_c`` with ``z_c = G_c(z_rep)``.
    words : list of (2, 2) arrays
        The Moebius words ``G_c``.
    identifications : list of dict
        Paired boundary edges with the frame rotation across them.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_class: np.ndarray
    transition: np.ndarray
    words: list
    identifications: list
    refinement_level: int = 0
    kind: str = "disk"
    boundary_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    base_level: int = 0

    # -- topology -----------------------------------------------------------
    @property
    def z(self) -> np.ndarray:
        return self.vertices[:, 0] + 1j * self.vertices[:, 1]

    @property
    def n_classes(self) -> int:
        return int(self.vertex_class.max()) + 1

    @cached_property
    def representatives(self) -> np.ndarray:
        rep = np.full(self.n_classes, -1)
        for c in range(len(self.vertices) - 1, -1, -1):
            rep[self.vertex_class[c]] = c
        return rep

    @cached_property
    def edges(self) -> np.ndarray:
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    @property
    def is_closed(self) -> bool:
        return self.kind == "bolza"

    @property
    def chi(self) -> int:
        """Euler characteristic ``V - E + F`` of the quotient complex."""
        n_edges = len(self.edges)
        if self.is_closed:
            n_edges -= len(self.boundary_edges) // 2
        return int(self.n_classes - n_edges + len(self.triangles))

    @cached_property
    def psi(self) -> np.ndarray:
        """Frame rotation of each chart vertex relative to its class."""
        return np.angle(self.transition)

    @cached_property
    def h_max(self) -> float:
        z = self.z
        return float(np.abs(z[self.edges[:, 0]] - z[self.edges[:, 1]]).max())

    def metric_edge_lengths(self, lam_chart: np.ndarray) -> np.ndarray:
        z = self.z
        e = self.edges
        return np.abs(z[e[:, 0]] - z[e[:, 1]]) * np.sqrt(0.5 * (lam_chart[e[:, 0]] + lam_chart[e[:, 1]]))

    # -- field transport ----------------------------------------------------
    def expand(self, values: np.ndarray) -> np.ndarray:
        """Chart-vertex values of a class field (frame indices rotated)."""
        values = np.asarray(values)
        out = values[self.vertex_class]
        rank = values.ndim - 1
        if rank == 0 or not self.is_closed:
            return out.copy()
        R = _rotations(self.psi)
        for slot in range(rank):
            out = np.moveaxis(np.einsum("nab,n...b->n...a", R, np.moveaxis(out, 1 + slot, -1)), -1, 1 + slot)
        return out

    def collapse(self, chart_values: np.ndarray, check: Optional[float] = None) -> np.ndarray:
        """Class values from chart-vertex values; optionally check consistency."""
        chart_values = np.asarray(chart_values)
        out = chart_values[self.representatives]
        if check is not None:
            err = np.abs(self.expand(out) - chart_values).max() if len(chart_values) else 0.0
            if err > check:
                raise SurfaceError(f"identified vertices disagree by {err:.3e}")
        return out

    # -- per-triangle data ----------------------------------------------------
    @cached_property
    def corner_class(self) -> np.ndarray:
        return self.vertex_class[self.triangles]

    @cached_property
    def tri_geometry(self):
        """P1 gradient matrices (F, 2, 3) and chart areas (F,)."""
        P = self.vertices[self.triangles]
        e1 = P[:, 1] - P[:, 0]
        e2 = P[:, 2] - P[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise SurfaceError("triangle with non-positive orientation")
        inv = np.empty((len(P), 2, 2))
        inv[:, 0, 0] = e2[:, 1] / det
        inv[:, 0, 1] = -e2[:, 0] / det
        inv[:, 1, 0] = -e1[:, 1] / det
        inv[:, 1, 1] = e1[:, 0] / det
        # gradient of barycentric coordinates: columns for corners 1, 2
        grad = np.zeros((len(P), 2, 3))
        grad[:, :, 1] = inv[:, 0, :]
        grad[:, :, 2] = inv[:, 1, :]
        grad[:, :, 0] = -grad[:, :, 1] - grad[:, :, 2]
        return grad, 0.5 * det

    @cached_property
    def class_chart_area(self) -> np.ndarray:
        """Lumped chart area pulled back to the representative chart."""
        _, area = self.tri_geometry
        w = (area[:, None] / 3.0) / np.abs(self.transition[self.triangles]) ** 2
        return np.bincount(self.corner_class.ravel(), w.ravel(), minlength=self.n_classes)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Cotangent stiffness matrix on classes (conformally invariant)."""
        grad, area = self.tri_geometry
        Kt = np.einsum("fai,faj->fij", grad, grad) * area[:, None, None]
        cc = self.corner_class
        rows = np.repeat(cc, 3, axis=1).ravel()
        cols = np.tile(cc, (1, 3)).ravel()
        n = self.n_classes
        return sp.csr_matrix((Kt.ravel(), (rows, cols)), shape=(n, n))

    # -- unfolded stars for least-squares fits -------------------------------
    @cached_property
    def _vertex_triangles(self):
        vt = defaultdict(list)
        for t, tri in enumerate(self.triangles):
            for c in tri:
                vt[c].append(t)
        return vt

    @cached_property
    def _class_members(self):
        members = defaultdict(list)
        for c, q in enumerate(self.vertex_class):
            members[q].append(c)
        return members

    @cached_property
    def _stars(self):
        """Per chart vertex: sorted chart neighbours including itself."""
        nb = [set() for _ in range(len(self.vertices))]
        for tri in self.triangles:
            for c in tri:
                nb[c].update(int(x) for x in tri)
        return [sorted(s) for s in nb]

    @cached_property
    def _word_tuples(self):
        return [tuple(complex(v) for v in W.ravel()) for W in self.words]

    @cached_property
    def _inverse_word_tuples(self):
        return [(d, -b, -c, a) for a, b, c, d in self._word_tuples]

    def _lifted_star(self, chart_vertex: int, phi):
        """Lifted neighbours of the class of ``chart_vertex`` around its lift.

        ``phi`` maps the chart of ``chart_vertex`` into the target chart
        (a Moebius 4-tuple, or None for the identity).  Returns (x, Phi)
        pairs meaning the point ``Phi(z_x)``.
        """
        q = self.vertex_class[chart_vertex]
        members = self._class_members[q]
        if len(members) == 1:
            return [(x, phi) for x in self._stars[chart_vertex]]
        G_w = self._word_tuples[chart_vertex]
        base = G_w if phi is None else _compose(phi, G_w)
        out = []
        for c in members:
            # chart of copy c -> representative -> chart_vertex -> target
            Phi = _compose(base, self._inverse_word_tuples[c])
            out.extend((x, Phi) for x in self._stars[c])
        return out

    @cached_property
    def fit_stencils(self):
        """Least-squares differentiation stencils per class.

        Returns arrays (rows, cols, angle, logjac, coef) with ``coef`` of shape
        (n, 5) holding weights for ``f_x, f_y, f_xx, f_xy, f_yy`` at the
        representative.  ``angle`` is the frame rotation to apply to the
        class value of ``cols`` and ``logjac`` the shift ``log |Phi'|^2``
        (including the word of the source vertex).
        """
        z = [complex(v) for v in self.z]
        rows, cols, ang, ljac, coefs = [], [], [], [], []
        for q in range(self.n_classes):
            r = int(self.representatives[q])
            z0 = z[r]
            ring = {}

            def add(items):
                for x, Phi in items:
                    p = z[x] if Phi is None else _apply(Phi, z[x])
                    key = (round(p.real, 11), round(p.imag, 11))
                    if key not in ring:
                        ring[key] = (x, Phi, p)

            add(self._lifted_star(r, None))
            for _ in range(FIT_RINGS - 1):
                for x, Phi, p in list(ring.values()):
                    add(self._lifted_star(x, Phi))
            pts = list(ring.values())
            d = np.array([p - z0 for _, _, p in pts])
            scale = np.abs(d).max()
            coef = _taylor_weights(d.real / scale, d.imag / scale, FIT_DEGREE)
            coef = coef / np.array([scale, scale, scale**2, scale**2, scale**2])[None, :]
            for k, (x, Phi, p) in enumerate(pts):
                dphi = 1.0 if Phi is None else 1.0 / (Phi[2] * z[x] + Phi[3]) ** 2
                rows.append(q)
                cols.append(self.vertex_class[x])
                ang.append(self.psi[x] + np.angle(dphi) if self.is_closed else 0.0)
                ljac.append(np.log(np.abs(self.transition[x]) ** 2 * np.abs(dphi) ** 2))
                coefs.append(coef[k])
        return (np.array(rows), np.array(cols), np.array(ang), np.array(ljac), np.array(coefs))

    def fit_operator(self, rank: int, which: int) -> sp.csr_matrix:
        """Chart partial derivative ``which`` (0..4) of rank-``rank`` frame fields.

        The result acts on flattened class fields and returns, at each class,
        the chart derivative of the frame components (rotated to the
        representative's chart frame) before any connection correction.
        """
        key = (rank, which)
        cache = self.__dict__.setdefault("_fit_cache", {})
        if key in cache:
            return cache[key]
        rows, cols, ang, _, coefs = self.fit_stencils
        n = self.n_classes
        dim = 2 ** rank
        Rk = _tensor_rotation(ang, rank)  # (npts, dim, dim)
        data = coefs[:, which][:, None, None] * Rk
        rr, cc = np.broadcast_arrays(rows[:, None, None] * dim + np.arange(dim)[None, :, None],
                                     cols[:, None, None] * dim + np.arange(dim)[None, None, :])
        M = sp.csr_matrix((data.ravel(), (rr.ravel(), cc.ravel())), shape=(n * dim, n * dim))
        M.eliminate_zeros()
        cache[key] = M
        return M

    def fit_log_jacobian_derivatives(self) -> np.ndarray:
        """Fitted derivatives of ``log |Phi'|^2`` shifts (n, 5).

        Added to fits of class values of ``log lam`` this yields derivatives
        of the chart-consistent logarithm of a conformal factor.
        """
        rows, _, _, ljac, coefs = self.fit_stencils
        out = np.zeros((self.n_classes, 5))
        for k in range(5):
            out[:, k] = np.bincount(rows, coefs[:, k] * ljac, minlength=self.n_classes)
        return out

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "refinement": self.refinement_level,
            "base_level": self.base_level,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "identifications": self.identifications,
            "chi": self.chi,
        }


def _compose(A, B):
    a, b, c, d = A
    e, f, g, h = B
    return (a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h)


def _apply(M, z):
    return (M[0] * z + M[1]) / (M[2] * z + M[3])


def _taylor_weights(dx: np.ndarray, dy: np.ndarray, degree: int) -> np.ndarray:
    """Weights mapping samples to (f_x, f_y, f_xx, f_xy, f_yy) at the origin.

    Weighted polynomial least squares; the centre sample is weighted heavily
    and distant samples are down-weighted.
    """
    powers = [(a, k - a) for k in range(degree + 1) for a in range(k, -1, -1)]
    B = np.stack([dx**a * dy**b for a, b in powers], axis=1)
    r2 = dx**2 + dy**2
    w = np.where(r2 < 1e-24, 10.0, 1.0 / (r2 + 0.25))
    P = np.linalg.pinv(B * w[:, None]) * w[None, :]
    idx = {p: i for i, p in enumerate(powers)}
    return np.stack([P[idx[(1, 0)]], P[idx[(0, 1)]], 2.0 * P[idx[(2, 0)]],
                     P[idx[(1, 1)]], 2.0 * P[idx[(0, 2)]]], axis=1)


def _rotations(psi: np.ndarray) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _tensor_rotation(psi: np.ndarray, rank: int) -> np.ndarray:
    R = _rotations(np.asarray(psi, dtype=float))
    out = np.ones((len(R), 1, 1))
    for _ in range(rank):
        out = np.einsum("nab,ncd->nacbd", out, R).reshape(len(R), out.shape[1] * 2, out.shape[2] * 2)
    return out


def slot_rotation_generator(rank: int) -> np.ndarray:
    """Infinitesimal frame rotation ``J`` acting on every index of a rank-k tensor."""
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    dim = 2 ** rank
    out = np.zeros((dim, dim))
    for slot in range(rank):
        term = np.ones((1, 1))
        for s in range(rank):
            term = np.kron(term, J if s == slot else np.eye(2))
        out += term
    return out


def _subdivide(z: list, tags: list, triangles: np.ndarray):
    mids = {}
    new = []

    def mid(a, b):
        key = (min(a, b), max(a, b))
        if key not in mids:
            mids[key] = len(z)
            z.append(geodesic_midpoint(z[a], z[b]))
            tags.append(tags[a] & tags[b])
        return mids[key]

    for a, b, c in triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return np.array(new, dtype=int)


def build_bolza_mesh(refinement: int = 0, base_level: int = 2) -> SurfaceMesh:
    """Closed genus-2 mesh of the regular pi/4 octagon.

    Parameters
    ----------
    refinement : int
        Number of geodesic midpoint subdivisions on top of the base mesh.
    base_level : int
        Subdivisions already contained in refinement level 0.  The coarse
        skeleton has 16 triangles (a fan from the centre through the corners
        and side midpoints).
    """
    if refinement < 0 or base_level < 0:
        raise SurfaceError("refinement must be non-negative")
    z = [0j] + [octagon_vertex(s) for s in range(8)]
    tags = [frozenset()] + [frozenset({(s - 1) % 8, s}) for s in range(8)]
    for s in range(8):
        z.append(geodesic_midpoint(octagon_vertex(s), octagon_vertex(s + 1)))
        tags.append(frozenset({s}))
    tris = []
    for s in range(8):
        tris.append((0, 9 + s, 9 + (s + 1) % 8))
        tris.append((9 + (s - 1) % 8, 1 + s, 9 + s))
    tris = np.array(tris, dtype=int)
    for _ in range(base_level + refinement):
        tris = _subdivide(z, tags, tris)
    z = np.array(z)
    n = len(z)

    # pair boundary vertices
    gens = generator_maps()
    on_side = defaultdict(list)
    for v, tg in enumerate(tags):
        for s in tg:
            on_side[s].append(v)
    links = defaultdict(list)
    for (i, j), G in gens.items():
        targets = np.array(on_side[i])
        for v in on_side[j]:
            w = targets[np.argmin(np.abs(z[targets] - mobius(G, z[v])))]
            if abs(z[w] - mobius(G, z[v])) > 1e-9:
                raise SurfaceError("side pairing does not match boundary vertices")
            links[v].append((w, G))
            links[w].append((v, np.linalg.inv(G)))

    vertex_class = np.full(n, -1)
    words: list = [None] * n
    n_cls = 0
    for v0 in range(n):
        if vertex_class[v0] >= 0:
            continue
        vertex_class[v0] = n_cls
        words[v0] = np.eye(2, dtype=complex)
        stack = [v0]
        while stack:
            a = stack.pop()
            for b, G in links[a]:
                if vertex_class[b] < 0:
                    vertex_class[b] = n_cls
                    words[b] = G @ words[a]
                    stack.append(b)
        n_cls += 1
    reps = np.full(n_cls, -1)
    for v in range(n - 1, -1, -1):
        reps[vertex_class[v]] = v
    transition = np.array([mobius_derivative(words[v], z[reps[vertex_class[v]]]) for v in range(n)])

    mesh = SurfaceMesh(
        vertices=np.stack([z.real, z.imag], axis=1),
        triangles=tris,
        vertex_class=vertex_class,
        transition=transition,
        words=words,
        identifications=[],
        refinement_level=refinement,
        kind="bolza",
        base_level=base_level,
    )
    # boundary edge pairing
    bset = {tuple(e) for e in mesh.boundary_edges}
    idents = []
    for (i, j), G in gens.items():
        for a, b in mesh.boundary_edges:
            if j in (tags[a] & tags[b]):
                ia = [w for w, H in links[a] if np.allclose(H, G)]
                ib = [w for w, H in links[b] if np.allclose(H, G)]
                pa, pb = ia[0], ib[0]
                if tuple(sorted((pa, pb))) not in bset:
                    raise SurfaceError("paired edge is not a boundary edge")
                zm = geodesic_midpoint(z[a], z[b])
                idents.append({
                    "edge": [int(a), int(b)],
                    "partner": [int(pa), int(pb)],
                    "frame_rotation": float(np.angle(mobius_derivative(G, zm))),
                })
    mesh.identifications = idents
    return mesh


def build_disk_patch(radius: float, resolution: int) -> SurfaceMesh:
    """Disk mesh of concentric rings centred at the origin.

    Parameters
    ----------
    radius : float
        Euclidean chart radius in (0, 1).
    resolution : int
        Number of rings; ring ``k`` carries ``6k`` points.
    """
    if not (0.0 < radius < 1.0):
        raise DomainError("radius must lie in (0, 1)")
    if resolution < 1:
        raise SurfaceError("resolution must be at least 1")
    pts = [0j]
    for k in range(1, resolution + 1):
        ang = 2 * np.pi * np.arange(6 * k) / (6 * k) + (0.5 * np.pi / (6 * k)) * (k % 2)
        pts.extend(radius * k / resolution * np.exp(1j * ang))
    z = np.array(pts)
    P = np.stack([z.real, z.imag], axis=1)
    tri = Delaunay(P).simplices.copy()
    e1 = P[tri[:, 1]] - P[tri[:, 0]]
    e2 = P[tri[:, 2]] - P[tri[:, 0]]
    flip = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    n = len(z)
    mesh = SurfaceMesh(
        vertices=P,
        triangles=tri,
        vertex_class=np.arange(n),
        transition=np.ones(n, dtype=complex),
        words=[np.eye(2, dtype=complex)] * n,
        identifications=[],
        refinement_level=resolution,
        kind="disk",
    )
    mesh.boundary_vertices = np.unique(mesh.boundary_edges)
    return mesh


def mesh_from_dict(data: dict) -> SurfaceMesh:
    """Rebuild a mesh from its JSON form (see :meth:`SurfaceMesh.to_dict`)."""
    for key in ("vertices", "triangles", "identifications", "chi"):
        if key not in data:
            raise SurfaceError(f"mesh document missing key '{key}'")
    kind = data.get("kind", "bolza" if data["identifications"] else "disk")
    if kind == "bolza":
        mesh = build_bolza_mesh(int(data.get("refinement", 0)), int(data.get("base_level", 2)))
        if mesh.vertices.shape != np.asarray(data["vertices"]).shape or \
                np.abs(mesh.vertices - np.asarray(data["vertices"])).max() > 1e-12:
            raise SurfaceError("vertices do not match the octagon construction")
    else:
        P = np.asarray(data["vertices"], dtype=float)
        n = len(P)
        mesh = SurfaceMesh(P, np.asarray(data["triangles"], dtype=int), np.arange(n),
                           np.ones(n, dtype=complex), [np.eye(2, dtype=complex)] * n, [],
                           int(data.get("refinement", 0)), "disk")
        mesh.boundary_vertices = np.unique(mesh.boundary_edges)
    if mesh.chi != int(data["chi"]):
        raise SurfaceError("stored Euler characteristic does not match the triangulation")
    return mesh


# ---------------------------------------------------------------------------
# Metrics

@dataclass(eq=False)
class MetricField:
    """Conformal metric ``lam * delta`` on a mesh.

    ``lam`` holds the factor at class representatives.  When the metric is a
    conformal change ``e^{-u} g_ref`` of a reference metric with exactly known
    constant scalar curvature, ``ref_lam`` and ``ref_curvature`` record it so
    the curvature can be evaluated from ``u`` alone.
    """

    mesh: SurfaceMesh
    lam: np.ndarray
    ref_lam: Optional[np.ndarray] = None
    ref_curvature: Optional[float] = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if self.lam.shape != (self.mesh.n_classes,):
            raise MeshMismatchError("conformal factor has the wrong length")
        if not np.all(np.isfinite(self.lam)) or np.any(self.lam <= 0):
            raise SingularMetricError("metric is not positive definite")

    @property
    def log_factor(self) -> np.ndarray:
        """``u`` with ``g = e^{-u} g_ref``."""
        if self.ref_lam is None:
            raise SurfaceError("metric has no reference")
        return np.log(self.ref_lam / self.lam)

    def conformal_change(self, u) -> "MetricField":
        """The metric ``e^{-u} g``."""
        u = np.broadcast_to(np.asarray(u, dtype=float), self.lam.shape)
        return MetricField(self.mesh, self.lam * np.exp(-u), self.ref_lam, self.ref_curvature)

    def scaled(self, c: float) -> "MetricField":
        ref = None if self.ref_lam is None else self.ref_lam * c
        curv = None if self.ref_curvature is None else self.ref_curvature / c
        return MetricField(self.mesh, self.lam * c, ref, curv)

    def components(self) -> np.ndarray:
        """Chart components ``[g11, g12, g22]`` at every chart vertex."""
        lam_c = self.chart_lam
        return np.stack([lam_c, np.zeros_like(lam_c), lam_c], axis=1)

    @cached_property
    def chart_lam(self) -> np.ndarray:
        return self.lam[self.mesh.vertex_class] / np.abs(self.mesh.transition) ** 2

    @cached_property
    def mass(self) -> np.ndarray:
        """Lumped vertex areas (the discrete volume form)."""
        return self.lam * self.mesh.class_chart_area

    @cached_property
    def corner_lam(self) -> np.ndarray:
        return self.chart_lam[self.mesh.triangles]

    @cached_property
    def tri_lam(self) -> np.ndarray:
        return np.exp(np.log(self.corner_lam).mean(axis=1))

    @cached_property
    def tri_area(self) -> np.ndarray:
        return self.tri_lam * self.mesh.tri_geometry[1]

    @cached_property
    def log_lam_derivatives(self) -> np.ndarray:
        """Chart derivatives (x, y, xx, xy, yy) of ``log lam`` at each class."""
        base = np.stack([self.mesh.fit_operator(0, k) @ np.log(self.lam) for k in range(5)], axis=1)
        return base - self.mesh.fit_log_jacobian_derivatives()

    @cached_property
    def frame_connection(self) -> np.ndarray:
        """Levi-Civita coefficients ``Gamma_A = omega^1_2(e_A)`` per class."""
        d = self.log_lam_derivatives
        s = 1.0 / np.sqrt(self.lam)
        return np.stack([0.5 * s * d[:, 1], -0.5 * s * d[:, 0]], axis=1)

    @cached_property
    def tri_frame_connection(self) -> np.ndarray:
        """Per-triangle ``Gamma_A`` from the chart copies of ``log lam``."""
        grad, _ = self.mesh.tri_geometry
        dl = np.einsum("fai,fi->fa", grad, np.log(self.corner_lam))
        s = 1.0 / np.sqrt(self.tri_lam)
        return np.stack([0.5 * s * dl[:, 1], -0.5 * s * dl[:, 0]], axis=1)

    @cached_property
    def fit_laplacian(self) -> sp.csr_matrix:
        """Pointwise-consistent Laplace-Beltrami ``lam^{-1} (f_xx + f_yy)`` from fits."""
        L = self.mesh.fit_operator(0, 2) + self.mesh.fit_operator(0, 4)
        return (sp.diags(1.0 / self.lam) @ L).tocsr()

    def gradient_operator(self, rank: int) -> sp.csr_matrix:
        """Sparse covariant derivative from rank-k to rank-(k+1) frame fields.

        Output index order is ``(d_A T)_{B...}`` with the derivative first.
        """
        cache = self.__dict__.setdefault("_grad_cache", {})
        if rank in cache:
            return cache[rank]
        mesh = self.mesh
        n, dim = mesh.n_classes, 2 ** rank
        s = np.repeat(1.0 / np.sqrt(self.lam), dim)
        Jk = sp.csr_matrix(slot_rotation_generator(rank))
        blocks = []
        for A in range(2):
            D = sp.diags(s) @ mesh.fit_operator(rank, A)
            if rank > 0:
                D = D - sp.kron(sp.diags(self.frame_connection[:, A]), Jk)
            blocks.append(D.tocoo())
        rows, cols, data = [], [], []
        for A, D in enumerate(blocks):
            q, a = np.divmod(D.row, dim)
            rows.append(q * 2 * dim + A * dim + a)
            cols.append(D.col)
            data.append(D.data)
        G = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n * 2 * dim, n * dim))
        cache[rank] = G
        return G


def fuchsian_metric(mesh: SurfaceMesh) -> MetricField:
    """Constant curvature metric ``24 / (1 - |z|^2)^2 |dz|^2`` (r = -1/3)."""
    z = mesh.z[mesh.representatives]
    if np.any(np.abs(mesh.z) >= 1.0):
        raise DomainError("vertex outside the unit disk")
    lam = FUCHSIAN_SCALE / (1.0 - np.abs(z) ** 2) ** 2
    return MetricField(mesh, lam, lam.copy(), FUCHSIAN_CURVATURE)


def flat_metric(mesh: SurfaceMesh) -> MetricField:
    if mesh.is_closed:
        raise SurfaceError("the closed mesh carries no flat conformal metric")
    return MetricField(mesh, np.ones(mesh.n_classes), np.ones(mesh.n_classes), 0.0)


# ---------------------------------------------------------------------------
# Operators

@dataclass(eq=False)
class SparseOperator:
    """Sparse linear operator with weighted domain and range inner products.

    ``matrix`` maps flattened domain fields to flattened range fields.  The
    weights are the diagonal discrete L2 inner products, so the adjoint is
    ``W_dom^{-1} A^H W_ran``.
    """

    matrix: sp.spmatrix
    domain_weight: np.ndarray
    range_weight: np.ndarray
    name: str = "operator"

    def __matmul__(self, x):
        return self.matrix @ x

    def __call__(self, x):
        return self.matrix @ x

    @property
    def shape(self):
        return self.matrix.shape

    def adjoint(self) -> "SparseOperator":
        A = sp.diags(1.0 / self.domain_weight) @ self.matrix.conj().T @ sp.diags(self.range_weight)
        return SparseOperator(A.tocsr(), self.range_weight, self.domain_weight, self.name + "*")

    def symmetric_form(self) -> sp.csr_matrix:
        """``W A`` for a self-adjoint operator (symmetric matrix)."""
        return (sp.diags(self.range_weight) @ self.matrix).tocsr()

    def smallest_eigenvalues(self, k: int = 6, sigma: float = -1e-3) -> np.ndarray:
        """Smallest eigenvalues of a self-adjoint operator (generalized problem)."""
        S = self.symmetric_form()
        S = 0.5 * (S + S.conj().T)
        n = S.shape[0]
        Wm = sp.diags(self.range_weight)
        if n <= 400:
            from scipy.linalg import eigh
            vals = eigh(S.toarray(), Wm.toarray(), eigvals_only=True)
            return np.sort(vals)[:k]
        vals = spla.eigsh(S, k=k, M=Wm, sigma=sigma, which="LM", return_eigenvectors=False)
        return np.sort(vals.real)

    def singular_values(self, k: int = 6) -> np.ndarray:
        """Smallest weighted singular values ``sqrt(eig(A^* A))``."""
        N = self.normal_form()
        n = N.shape[0]
        Wd = sp.diags(self.domain_weight)
        if n <= 600:
            from scipy.linalg import eigh
            vals = eigh(N.toarray(), Wd.toarray(), eigvals_only=True)
        else:
            vals = spla.eigsh(N, k=k, M=Wd, sigma=-1e-8, which="LM", return_eigenvectors=False)
        return np.sqrt(np.clip(np.sort(vals.real), 0.0, None))[:k]

    def normal_form(self) -> sp.csr_matrix:
        A = self.matrix
        N = A.conj().T @ sp.diags(self.range_weight) @ A
        return (0.5 * (N + N.conj().T)).tocsr()

    def kernel_dimension(self, rel_tol: float = 1e-8, k: int = 12) -> int:
        sv = self.singular_values(k)
        big = spla.norm(self.matrix) if sp.issparse(self.matrix) else np.linalg.norm(self.matrix)
        return int(np.sum(sv <= rel_tol * max(big, 1e-300)))


def _check_mesh(field_len: int, metric: MetricField):
    if field_len != metric.mesh.n_classes:
        raise MeshMismatchError("field and metric live on different meshes")


def laplacian(g: MetricField) -> SparseOperator:
    """Discrete Laplace-Beltrami ``d_C d_C`` (non-positive) as ``-M^{-1} K``."""
    K = g.mesh.stiffness
    A = (-sp.diags(1.0 / g.mass) @ K).tocsr()
    return SparseOperator(A, g.mass, g.mass, "laplacian")


def integrate(f, g: MetricField) -> float:
    """Integral of a class scalar field against the lumped volume form."""
    f = np.asarray(f)
    _check_mesh(len(f), g)
    return float(np.sum(np.sort(f * g.mass)))


def scalar_curvature(g: MetricField, method: str = "auto") -> np.ndarray:
    """Scalar curvature ``r = 2K`` at the classes.

    Methods
    -------
    ``conformal``
        ``r = e^u (r_ref + Delta_ref u)`` with the least-squares Laplacian of
        the reference metric; exact for constant ``u``.  Requires a
        reference metric.
    ``fit``
        ``r = -(1/lam) Delta_0 log lam`` with least-squares chart derivatives.
    ``defect``
        Angle defects of the piecewise flat metric with edge lengths measured
        in ``g``, divided by the lumped area.
    """
    if not np.all(g.lam > 0):
        raise SingularMetricError("metric is not positive definite")
    if method == "auto":
        method = "conformal" if g.ref_lam is not None else "fit"
    if method == "conformal":
        u = g.log_factor
        lap_u = (g.mesh.fit_operator(0, 2) @ u + g.mesh.fit_operator(0, 4) @ u) / g.ref_lam
        return np.exp(u) * (g.ref_curvature + lap_u)
    if method == "fit":
        d = g.log_lam_derivatives
        return -(d[:, 2] + d[:, 4]) / g.lam
    if method == "defect":
        mesh = g.mesh
        lam_c = g.chart_lam
        z = mesh.z
        T = mesh.triangles
        L = np.stack([np.abs(z[T[:, (k + 1) % 3]] - z[T[:, (k + 2) % 3]])
                      * np.sqrt(0.5 * (lam_c[T[:, (k + 1) % 3]] + lam_c[T[:, (k + 2) % 3]]))
                      for k in range(3)], axis=1)
        ang = np.empty_like(L)
        for k in range(3):
            a, b, c = L[:, k], L[:, (k + 1) % 3], L[:, (k + 2) % 3]
            ang[:, k] = np.arccos(np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1, 1))
        total = np.bincount(mesh.corner_class.ravel(), ang.ravel(), minlength=mesh.n_classes)
        defect = 2 * np.pi - total
        if not mesh.is_closed and len(mesh.boundary_vertices):
            defect[mesh.boundary_vertices] -= np.pi
        return 2.0 * defect / g.mass
    raise ValueError(f"unknown curvature method '{method}'")


def covariant_derivative(field_values, g: MetricField) -> np.ndarray:
    """Levi-Civita derivative of a class field of frame components.

    A field of shape ``(n,) + (2,)*k`` is mapped to shape ``(n, 2) + (2,)*k``
    with ``out[q, A, ...] = d_A T_{...}``.  Complex fields are allowed.
    """
    T = np.asarray(field_values)
    _check_mesh(T.shape[0], g)
    rank = T.ndim - 1
    G = g.gradient_operator(rank)
    out = G @ T.reshape(T.shape[0], -1).reshape(-1)
    return out.reshape((T.shape[0], 2) + (2,) * rank)


def write_mesh_json(mesh: SurfaceMesh, path) -> None:
    from .io import dump_json
    dump_json(mesh.to_dict(), path)


def read_mesh_json(path) -> SurfaceMesh:
    with open(path) as fh:
        return mesh_from_dict(json.load(fh))
