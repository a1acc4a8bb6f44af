import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from conftest import cached_fuchsian, cached_solved
from hypgerm.germ import (
    EPSILON,
    ConformalGaussSolver,
    Germ,
    circle_action,
    codazzi_basis,
    codazzi_kernel_dimension,
    codazzi_norm,
    codazzi_residual,
    epsilon_dot,
    gauss_residual,
    germ_from_dict,
    lie_derivative_metric,
    norm_squared,
    pairing,
    project_codazzi,
    random_codazzi,
    random_vector_field,
    solve_conformal_gauss,
    trace_residual,
    traceless_from_components,
)
from hypgerm.io import dumps_json
from hypgerm.surface import SurfaceError, build_bolza_mesh, build_disk_patch, fuchsian_metric


@pytest.fixture(scope="module")
def g1():
    return fuchsian_metric(build_bolza_mesh(1))


def test_epsilon_is_the_quarter_turn():
    assert np.array_equal(EPSILON, np.array([[0.0, 1.0], [-1.0, 0.0]]))


def test_zero_tensor_has_zero_residuals(g1):
    m = np.zeros((g1.mesh.n_classes, 2, 2))
    assert np.abs(codazzi_residual(g1, m)).max() == 0.0
    assert np.abs(trace_residual(g1, m)).max() == 0.0


def _dz2_on_disk(resolution):
    mesh = build_disk_patch(0.5, resolution)
    g = fuchsian_metric(mesh)
    # Re(dz^2) = dx^2 - dy^2 has frame components diag(1, -1) / lam
    return g, traceless_from_components(1.0 / g.lam, 0.0), np.abs(mesh.z[mesh.representatives])


def test_holomorphic_quadratic_differential_is_codazzi():
    errs = []
    for res in (8, 16):
        g, m, r = _dz2_on_disk(res)
        inner = r < 0.3
        errs.append(codazzi_norm(g, m)[inner].max() / np.sqrt(norm_squared(m)).max())
    assert errs[1] < errs[0]
    assert errs[1] < 1e-3


def test_non_constant_multiple_breaks_codazzi():
    g, m, r = _dz2_on_disk(16)
    z = g.mesh.z[g.mesh.representatives]
    f = 1.0 + z.real
    res = codazzi_norm(g, f[:, None, None] * m)
    inner = r < 0.3
    # product rule: the defect is of size |df| |m| = |m| / sqrt(lam)
    expected = np.sqrt(norm_squared(m)) / np.sqrt(g.lam)
    ratio = res[inner] / expected[inner]
    assert 0.5 < ratio.min() and ratio.max() < 2.0


def test_gauss_residual_of_fuchsian_germ(g1):
    m = np.zeros((g1.mesh.n_classes, 2, 2))
    assert np.abs(gauss_residual(g1, m)).max() < 1e-12


@pytest.mark.parametrize("c", [0.01, 0.1, 0.25])
def test_gauss_residual_of_constant_norm_tensor(g1, c):
    # |m|^2 = 2 a^2 = c with r = -1/3 gives residual c
    a = np.sqrt(c / 2.0)
    m = traceless_from_components(np.full(g1.mesh.n_classes, a), 0.0)
    assert np.allclose(gauss_residual(g1, m), c, atol=1e-12)


def test_trace_residual_cases(g1):
    n = g1.mesh.n_classes
    rng = np.random.default_rng(1)
    m = traceless_from_components(rng.standard_normal(n), rng.standard_normal(n))
    assert np.abs(trace_residual(g1, m)).max() < 1e-15
    assert np.allclose(trace_residual(g1, np.broadcast_to(np.eye(2), (n, 2, 2))), 2.0)
    assert np.abs(trace_residual(g1, epsilon_dot(m))).max() < 1e-15


def test_codazzi_space_has_dimension_six(g1):
    assert codazzi_kernel_dimension(g1) == 6
    assert codazzi_kernel_dimension(fuchsian_metric(build_bolza_mesh(2))) == 6


def test_projection_is_idempotent_and_linear(g1):
    m = random_codazzi(g1, 3, 0.1)
    assert np.allclose(project_codazzi(g1, m), m, atol=1e-12)
    zero = np.zeros_like(m)
    assert np.abs(project_codazzi(g1, zero)).max() == 0.0
    with pytest.raises(SurfaceError):
        project_codazzi(g1, np.broadcast_to(np.eye(2), m.shape))


def test_codazzi_basis_is_orthonormal(g1):
    basis, sv = codazzi_basis(g1)
    gram = np.einsum("q,iqab,jqab->ij", g1.mass, basis, basis)
    assert np.allclose(gram, np.eye(len(basis)), atol=1e-10)
    assert sv.max() < 0.1


def test_constant_conformal_shift_is_recovered(g1):
    c = -0.42
    u, germ = solve_conformal_gauss(g1.conformal_change(c), np.zeros((g1.mesh.n_classes, 2, 2)), tol=1e-13)
    assert np.abs(u + c).max() < 1e-10
    u0, _ = solve_conformal_gauss(g1, np.zeros((g1.mesh.n_classes, 2, 2)))
    assert np.abs(u0).max() < 1e-12


def test_small_codazzi_data_lands_in_trapping_set(g1):
    _, germ = solve_conformal_gauss(g1, random_codazzi(g1, 11, 0.05))
    assert germ.accepted
    assert norm_squared(germ.m).max() < 1.0 / 3.0


def test_solver_estimator_interface(g1):
    est = ConformalGaussSolver(tol=1e-11)
    assert clone(est).get_params() == {"tol": 1e-11, "max_iter": 20}
    est.fit(g1, random_codazzi(g1, 2, 0.05))
    assert est.n_iter_ <= 8
    g = est.transform(g1)
    assert np.allclose(g.lam, est.germ_.g.lam)


def test_solve_germ_hits_target_amplitude():
    germ = cached_solved(1)
    assert germ.m_norm_squared.max() == pytest.approx(0.1, rel=1e-3)
    assert germ.accepted


def test_circle_action_identity_and_period():
    germ = cached_solved(1)
    assert np.array_equal(circle_action(germ, 0.0).m, germ.m)
    assert np.abs(circle_action(germ, 2 * np.pi).m - germ.m).max() < 1e-15


@settings(max_examples=25, deadline=None)
@given(tau=st.floats(-10, 10), sigma=st.floats(-10, 10))
def test_circle_action_preserves_norm_and_composes(tau, sigma):
    germ = cached_solved(1)
    out = circle_action(germ, tau)
    assert np.allclose(out.m_norm_squared, germ.m_norm_squared, rtol=1e-12, atol=1e-16)
    both = circle_action(circle_action(germ, tau), sigma)
    assert np.abs(both.m - circle_action(germ, tau + sigma).m).max() < 1e-13
    for key in ("codazzi", "gauss"):
        assert out.residuals[key] <= 2 * germ.residuals[key] + 1e-14


def test_pairing_oracles():
    germ = cached_solved(1)
    n = germ.mesh.n_classes
    g = germ.g
    assert abs(pairing(germ, np.broadcast_to(np.eye(2), (n, 2, 2)))) < 1e-13
    assert pairing(germ, germ.m) == pytest.approx(np.sum(g.mass * germ.m_norm_squared), rel=1e-14)
    # Lie derivatives pair to zero up to discretization (divergence-free m)
    rng = np.random.default_rng(5)
    v = random_vector_field(g, rng)
    h = lie_derivative_metric(g, v)
    scale = np.sqrt(np.sum(g.mass * germ.m_norm_squared) * np.sum(g.mass * norm_squared(h)))
    assert abs(pairing(germ, h)) < 0.02 * scale


def test_germ_rejects_bad_input(g1):
    n = g1.mesh.n_classes
    bad = np.zeros((n, 2, 2))
    bad[:, 0, 1] = 1.0
    with pytest.raises(SurfaceError):
        Germ(g1, bad)


def test_germ_json_round_trip():
    germ = cached_solved(1)
    doc = germ.to_dict()
    again = germ_from_dict(eval_json(doc))
    assert np.allclose(again.m, germ.m, atol=1e-14)
    assert np.allclose(again.g.lam, germ.g.lam, rtol=1e-14)
    for key in ("trace", "codazzi", "gauss"):
        assert again.residuals[key] == pytest.approx(germ.residuals[key], rel=1e-6, abs=1e-15)


def test_germ_document_missing_key_is_named():
    doc = eval_json(cached_fuchsian(0).to_dict())
    del doc["m"]
    with pytest.raises(SurfaceError, match="'m'"):
        germ_from_dict(doc)


def test_scaling_m_breaks_gauss():
    germ = cached_solved(1)
    doubled = germ.with_m(2 * germ.m)
    # r = -1/3 - |m|^2 on the germ, so doubling m leaves 3 |m|^2
    assert np.allclose(gauss_residual(germ.g, doubled.m), 3 * germ.m_norm_squared,
                       atol=10 * germ.residuals["gauss"] + 1e-12)
    assert not doubled.accepted


def eval_json(doc):
    import json
    return json.loads(dumps_json(doc))
