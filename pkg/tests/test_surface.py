import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hypgerm.surface import (
    DomainError,
    MeshMismatchError,
    SparseOperator,
    build_bolza_mesh,
    build_disk_patch,
    covariant_derivative,
    flat_metric,
    fuchsian_metric,
    integrate,
    laplacian,
    mesh_from_dict,
    orbit_maps,
    scalar_curvature,
    side_pairing,
    smooth_fields,
)


@pytest.fixture(scope="module")
def bolza1():
    return build_bolza_mesh(1)


@pytest.mark.parametrize("level", [0, 1, 2])
def test_bolza_euler_characteristic(level):
    mesh = build_bolza_mesh(level)
    # count cells after gluing: edges as unordered pairs of vertex classes
    cls = mesh.vertex_class[mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)]
    n_edges = len(np.unique(np.sort(cls, axis=1), axis=0))
    assert mesh.n_classes - n_edges + len(mesh.triangles) == -2
    assert mesh.chi == -2
    assert mesh.is_closed


def test_identifications_pair_each_boundary_edge_once(bolza1):
    seen = {}
    for ident in bolza1.identifications:
        for key in (tuple(sorted(ident["edge"])), tuple(sorted(ident["partner"]))):
            seen[key] = seen.get(key, 0) + 1
    assert len(seen) == len(bolza1.boundary_edges)
    assert set(seen.values()) == {1}


def test_side_pairings_are_hyperbolic_isometries():
    # each pairing maps the unit circle to itself: |M(e^{it})| = 1
    t = np.linspace(0, 2 * np.pi, 7)
    for i in range(8):
        M = side_pairing(i, (i + 4) % 8)
        z = np.exp(1j * t)
        w = (M[0, 0] * z + M[0, 1]) / (M[1, 0] * z + M[1, 1])
        assert np.allclose(np.abs(w), 1.0, atol=1e-12)


def test_disk_patch_counts_and_bounds():
    mesh = build_disk_patch(0.5, 16)
    assert mesh.chi == 1
    assert not mesh.is_closed
    assert np.abs(build_disk_patch(0.9, 8).z).max() <= 0.9 + 1e-12
    with pytest.raises(ValueError):
        build_disk_patch(0.5, 0)


def test_disk_resolution_halves_edge_length():
    h1 = build_disk_patch(0.5, 8).h_max
    h2 = build_disk_patch(0.5, 16).h_max
    assert 0.4 < h2 / h1 < 0.6


def test_fuchsian_metric_value_at_origin():
    mesh = build_disk_patch(0.5, 4)
    g = fuchsian_metric(mesh)
    k = int(np.argmin(np.abs(mesh.z)))
    assert abs(mesh.z[k]) < 1e-14
    assert g.lam[mesh.vertex_class[k]] == pytest.approx(24.0, rel=1e-14)


def test_fuchsian_metric_rejects_points_outside_disk():
    mesh = build_disk_patch(0.5, 4)
    mesh.vertices[0] = [1.0, 0.0]
    with pytest.raises(DomainError):
        fuchsian_metric(mesh)


def test_fuchsian_curvature_converges_to_minus_one_third():
    errs = []
    for level in (0, 1, 2):
        r = scalar_curvature(fuchsian_metric(build_bolza_mesh(level)), "fit")
        errs.append(np.abs(r + 1.0 / 3.0).max())
    assert errs[2] < 1e-3
    assert errs[2] < errs[1] < errs[0]


def test_curvature_scales_inversely_with_metric(bolza1):
    g = fuchsian_metric(bolza1)
    r = scalar_curvature(g)
    r2 = scalar_curvature(g.scaled(3.0))
    assert np.allclose(r2, r / 3.0, rtol=1e-10)


def test_flat_metric_has_zero_curvature():
    g = flat_metric(build_disk_patch(0.5, 8))
    assert np.abs(scalar_curvature(g)).max() < 1e-10


def test_area_from_gauss_bonnet():
    g = fuchsian_metric(build_bolza_mesh(2))
    area = integrate(np.ones(g.mesh.n_classes), g)
    assert area == pytest.approx(24 * np.pi, rel=5e-3)


def test_angle_defects_satisfy_gauss_bonnet_exactly(bolza1):
    g = fuchsian_metric(bolza1)
    total = integrate(0.5 * scalar_curvature(g, "defect"), g)
    assert total == pytest.approx(-4 * np.pi, rel=1e-12)
    fit_total = integrate(0.5 * scalar_curvature(g, "fit"), g)
    assert fit_total == pytest.approx(-4 * np.pi, rel=2e-2)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_integrate_is_linear(a, b, seed):
    mesh = build_bolza_mesh(0)
    g = fuchsian_metric(mesh)
    rng = np.random.default_rng(seed)
    f, h = rng.standard_normal((2, mesh.n_classes))
    lhs = integrate(a * f + b * h, g)
    rhs = a * integrate(f, g) + b * integrate(h, g)
    assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(lhs)))
    assert integrate(np.zeros(mesh.n_classes), g) == 0.0


def test_derivative_of_constant_vanishes(bolza1):
    g = fuchsian_metric(bolza1)
    d = covariant_derivative(np.full(bolza1.n_classes, 2.5), g)
    assert np.abs(d).max() < 1e-10


def test_hessian_symmetric_on_flat_patch():
    mesh = build_disk_patch(0.5, 12)
    g = flat_metric(mesh)
    z = mesh.z[mesh.representatives]
    f = np.sin(3 * z.real) * np.cos(2 * z.imag)
    hess = covariant_derivative(covariant_derivative(f, g), g)
    inner = np.abs(z) < 0.3  # one-sided fits at the rim are less accurate
    asym = np.abs(hess[inner, 0, 1] - hess[inner, 1, 0]).max()
    assert asym < 1e-2 * np.abs(hess[inner]).max()


def test_covector_commutator_matches_curvature():
    # with Gauss curvature K = r/2: [d_1, d_2] w = K (w_2, -w_1)
    g = fuchsian_metric(build_bolza_mesh(2))
    f = smooth_fields(g.mesh, 1, seed=3)[:, 0]
    w = covariant_derivative(f, g)
    dd = covariant_derivative(covariant_derivative(w, g), g)
    comm = dd[:, 0, 1, :] - dd[:, 1, 0, :]
    r = scalar_curvature(g)
    expected = 0.5 * r[:, None] * np.stack([w[:, 1], -w[:, 0]], axis=1)
    rel = np.linalg.norm(comm - expected) / np.linalg.norm(expected)
    assert rel < 0.1


def test_mesh_mismatch_is_reported(bolza1):
    g = fuchsian_metric(bolza1)
    with pytest.raises(MeshMismatchError):
        covariant_derivative(np.ones(bolza1.n_classes + 1), g)


def _minus_laplacian(g):
    L = laplacian(g)
    return SparseOperator(-L.matrix, L.domain_weight, L.range_weight, "minus_laplacian")


def test_laplacian_kernel_and_constants(bolza1):
    g = fuchsian_metric(bolza1)
    L = laplacian(g)
    assert np.abs(L @ np.ones(bolza1.n_classes)).max() < 1e-10
    vals = np.sort(_minus_laplacian(g).smallest_eigenvalues(3, sigma=-1.0))
    assert abs(vals[0]) < 1e-8
    assert vals[1] > 0.1


def test_second_laplace_eigenvalue_converges():
    lam = [np.sort(_minus_laplacian(fuchsian_metric(build_bolza_mesh(k))).smallest_eigenvalues(2, sigma=-1.0))[1]
           for k in (0, 1, 2)]
    assert abs(lam[2] - lam[1]) < abs(lam[1] - lam[0])
    assert abs(lam[2] - lam[1]) / lam[2] < 0.05


def test_mesh_json_round_trip(bolza1):
    again = mesh_from_dict(bolza1.to_dict())
    assert np.array_equal(again.triangles, bolza1.triangles)
    assert np.allclose(again.vertices, bolza1.vertices, rtol=0, atol=0)
    assert again.n_classes == bolza1.n_classes


def test_orbit_maps_start_with_identity():
    maps = orbit_maps(6.0)
    assert np.allclose(maps[0], np.eye(2))
    assert len(maps) > 9
    assert len(orbit_maps(1.0)) == 1  # every side pairing moves the centre farther


def test_smooth_fields_are_periodic(bolza1):
    # identified chart copies carry one value per class, so the field is single valued
    f = smooth_fields(bolza1, 3, seed=1)
    assert f.shape == (bolza1.n_classes, 3)
    assert np.all(np.isfinite(f)) and np.abs(f).max() > 0
