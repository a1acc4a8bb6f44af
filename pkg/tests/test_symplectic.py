from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import cached_fuchsian, cached_solved
from hypgerm import symplectic as sym
from hypgerm.connection import build_connection
from hypgerm.germ import circle_action, traceless_from_components
from hypgerm.surface import smooth_fields

SQRT6 = np.sqrt(6.0)


def _random_pair(rng, n):
    h = rng.standard_normal((n, 2, 2))
    h = h + np.swapaxes(h, 1, 2)
    return h, traceless_from_components(*rng.standard_normal((2, n)))


def _random_form(rng, n):
    return rng.standard_normal((n, 2, 3)) + 1j * rng.standard_normal((n, 2, 3))


@pytest.fixture(scope="module")
def germ():
    return cached_solved(1)


@pytest.fixture(scope="module")
def conn(germ):
    return build_connection(germ)


def test_omega_h_antisymmetry_and_sign(germ):
    n = germ.mesh.n_classes
    rng = np.random.default_rng(0)
    p, q = _random_pair(rng, n), _random_pair(rng, n)
    assert sym.omega_H(germ, p, p) == 0.0
    assert sym.omega_H(germ, p, q) == pytest.approx(-sym.omega_H(germ, q, p), abs=1e-14)
    h = p[0]
    value = sym.omega_H(germ, (h, np.zeros_like(h)), (np.zeros_like(h), h))
    assert value == pytest.approx(np.sum(germ.g.mass * np.einsum("qab,qab->q", h, h)), rel=1e-14)
    assert value > 0


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_pairings_are_bilinear(germ, conn, a, b, seed):
    n = germ.mesh.n_classes
    rng = np.random.default_rng(seed)
    p, q, r = (_random_pair(rng, n) for _ in range(3))
    comb = (a * p[0] + b * q[0], a * p[1] + b * q[1])
    lhs = sym.omega_H(germ, comb, r)
    rhs = a * sym.omega_H(germ, p, r) + b * sym.omega_H(germ, q, r)
    assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(a) + abs(b)) * 100)
    u, v, w = (_random_form(rng, n) for _ in range(3))
    lhs = sym.omega_M(conn, a * u + b * v, w)
    rhs = a * sym.omega_M(conn, u, w) + b * sym.omega_M(conn, v, w)
    assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(a) + abs(b)) * 100)


def test_omega_m_vanishes_on_the_diagonal_and_is_antisymmetric(conn):
    n = conn.mesh.n_classes
    rng = np.random.default_rng(1)
    v, w = _random_form(rng, n), _random_form(rng, n)
    assert abs(sym.omega_M(conn, v, v)) < 1e-12
    assert sym.omega_M(conn, v, w) == pytest.approx(-sym.omega_M(conn, w, v), rel=1e-12)


def test_omega_m_against_t_of_v(conn):
    n = conn.mesh.n_classes
    v = _random_form(np.random.default_rng(2), n)
    norm2 = np.sum(conn.g.mass * np.sum(np.abs(v) ** 2, axis=(1, 2)))
    tv = sym.t_involution(v)
    # Tr(v ^ t v) = -i |v|^2 pointwise; the frozen sign convention puts the positive value here
    assert sym.omega_M(conn, v, tv) == pytest.approx(2 * SQRT6 * norm2, rel=1e-12)
    assert sym.omega_M(conn, tv, v) == pytest.approx(-2 * SQRT6 * norm2, rel=1e-12)
    # t is antilinear with t(t(v)) = -v
    assert np.allclose(sym.t_involution(tv), -v, atol=1e-15)


def test_stokes_degeneracy(germ):
    assert sym.stokes_degeneracy(germ, count=2) < 1e-10


def test_moment_residuals_on_germs():
    for level in (1, 2):
        wp, pres = sym.moment_residuals(cached_fuchsian(level))
        assert wp == 0.0 and pres == 0.0
    res = [sym.moment_residuals(cached_solved(level))[0] for level in (1, 2)]
    assert res[1] < res[0]
    assert res[1] < 5e-3


def test_moment_residuals_detect_trace_and_codazzi_defects(germ):
    c = 0.05
    traced = SimpleNamespace(g=germ.g, m=germ.m + c * np.eye(2))
    assert sym.moment_residuals(traced)[1] == pytest.approx(2 * c, rel=1e-12)
    f = smooth_fields(germ.mesh, 1, seed=9)[:, 0]
    bent = SimpleNamespace(g=germ.g, m=(1.0 + 3.0 * f / np.abs(f).max())[:, None, None] * germ.m)
    assert sym.moment_residuals(bent)[0] > 10 * sym.moment_residuals(germ)[0]


def test_zero_tangent_vectors_pair_to_zero(germ):
    n = germ.mesh.n_classes
    zero = (np.zeros((n, 2, 2)), np.zeros((n, 2, 2)))
    rep = sym.pairing_report(germ, zero, zero)
    assert rep.omega_H == 0.0 and rep.omega_M == 0.0


def test_pairings_agree_off_shell(germ, conn):
    n = germ.mesh.n_classes
    rng = np.random.default_rng(4)
    p, q = _random_pair(rng, n), _random_pair(rng, n)
    rep = sym.pairing_report(germ, p, q, conn)
    assert rep.rel_discrepancy < 1e-12
    swapped = sym.pairing_report(germ, q, p, conn)
    assert swapped.omega_H == pytest.approx(-rep.omega_H, rel=1e-12)
    assert swapped.omega_M == pytest.approx(-rep.omega_M, rel=1e-12)


def test_fuchsian_agreement_and_report_schema():
    rep = sym.agreement_check(cached_fuchsian(1), sample_count=4)
    assert set(rep) >= {"samples", "max_rel_discrepancy", "refinement", "tangent_residuals"}
    assert rep["samples"] == 4 and rep["refinement"] == 1
    assert rep["max_rel_discrepancy"] <= 1e-3


def test_agreement_invariant_under_circle_action(germ):
    base = sym.agreement_check(germ, sample_count=4)["max_rel_discrepancy"]
    turned = sym.agreement_check(circle_action(germ, np.pi / 3), sample_count=4)["max_rel_discrepancy"]
    assert turned <= max(2 * base, 2e-3)


def test_too_few_tangent_vectors_is_reported(germ):
    with pytest.raises(sym.TangentProjectionError):
        sym.agreement_check(germ, sample_count=10_000, modes=2)
