import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from r3s2 import spectral as sp
from r3s2.sh_core import assoc_legendre, legendre_table, recurrence_x2


def x_power_operator(m, lmax, power):
    """Matrix of x^power multiplication in the normalized basis by quadrature."""
    x, w = np.polynomial.legendre.leggauss(80)
    P = legendre_table(lmax, x)[m:, m]
    return np.einsum("ix,jx,x->ij", P, P, w * x ** power)


def ode_residual(f, lam, m, rho, x, h, potential):
    """-(d/dx)((1-x^2) f') + m^2/(1-x^2) f + V f - lam f by fourth-order differences."""
    f2m, fm, f0, fp, f2p = (f(x + k * h) for k in (-2, -1, 0, 1, 2))
    d1 = (f2m - 8 * fm + 8 * fp - f2p) / (12 * h)
    d2 = (-f2m + 16 * fm - 30 * f0 + 16 * fp - f2p) / (12 * h * h)
    lhs = -((1 - x * x) * d2 - 2 * x * d1) + m * m / (1 - x * x) * f0 + potential(x) * f0
    return np.abs(lhs - lam * f0).max()


# ---------------------------------------------------------------- operators

def test_m1_small_diagonal():
    A = sp.build_m1(0, 2)
    np.testing.assert_allclose(A.diagonal(), [1 / 3, 3 / 5, recurrence_x2(2, 0)[1]], atol=1e-15)


@pytest.mark.parametrize("m", [0, 1, 3])
def test_m1_matches_quadrature(m):
    A = sp.build_m1(m, 12).matrix
    np.testing.assert_allclose(A, A.T, atol=1e-12)
    # the last row of the truncated operator misses the degree lmax + 2 term only
    ref = x_power_operator(m, 12, 2)
    np.testing.assert_allclose(A, ref, atol=1e-12)


def test_m1_band_structure():
    A = sp.build_m1(2, 10).matrix
    mask = np.abs(np.subtract.outer(np.arange(9), np.arange(9)))
    assert np.all(A[(mask != 0) & (mask != 2)] == 0)


def test_m1_polynomial_identity():
    # x^2 Pbar_0 = a Pbar_0 + b Pbar_2
    A = sp.build_m1(0, 2).matrix
    x = np.linspace(-1, 1, 11)
    rec = A[0, 0] * assoc_legendre(0, 0, x) + A[2, 0] * assoc_legendre(2, 0, x)
    np.testing.assert_allclose(rec, x * x * assoc_legendre(0, 0, x), atol=1e-14)


def test_m2_small():
    A = sp.build_m2(0, 1).matrix
    np.testing.assert_allclose(A, [[0, 1 / math.sqrt(3)], [1 / math.sqrt(3), 0]], atol=1e-15)


@pytest.mark.parametrize("m", [0, 2, 5])
def test_m2_matches_quadrature(m):
    A = sp.build_m2(m, 12).matrix
    assert np.trace(A) == 0 and np.all(np.diagonal(A) == 0)
    np.testing.assert_allclose(A, A.T, atol=1e-12)
    np.testing.assert_allclose(A, x_power_operator(m, 12, 1), atol=1e-12)


def test_lambda_diagonal():
    L = sp.build_lambda(3, 6)
    np.testing.assert_array_equal(L.diagonal(), [12, 20, 30, 42])


def test_lmax_below_m_rejected():
    with pytest.raises(ValueError):
        sp.build_m1(4, 3)


# ---------------------------------------------------------------- SWE

def test_swe_rho_zero():
    es = sp.swe_eigensystem(2, 0.0, 10)
    l = np.arange(2, 11)
    np.testing.assert_allclose(es.eigenvalues, l * (l + 1), atol=1e-12)
    np.testing.assert_allclose(np.abs(es.vectors), np.eye(9), atol=1e-12)


def test_swe_parity_pattern():
    es = sp.swe_eigensystem(1, 3.0, 14)
    for k in range(es.vectors.shape[1]):
        v = es.vectors[:, k]
        assert np.all(v[0::2] == 0) or np.all(v[1::2] == 0)


def test_swe_continuity_small_rho():
    a = sp.swe_eigensystem(0, 0.0, 12).eigenvalues
    b = sp.swe_eigensystem(0, 1e-6, 12).eigenvalues
    assert np.abs(a - b).max() < 1e-4


@given(st.integers(0, 8), st.floats(0, 20))
@settings(max_examples=40, deadline=None)
def test_swe_residual_and_ordering(m, rho):
    es = sp.swe_eigensystem(m, rho, 24)
    A = rho * rho * sp.build_m1(m, 24).matrix + sp.build_lambda(m, 24).matrix
    assert np.abs(A @ es.vectors - es.vectors * es.eigenvalues).max() < 1e-10 * max(1, rho ** 2)
    assert np.all(np.diff(es.eigenvalues) > 0)
    np.testing.assert_allclose(np.linalg.norm(es.vectors, axis=0), 1, atol=1e-12)


def test_swe_rejects_negative_rho():
    with pytest.raises(ValueError):
        sp.swe_eigensystem(0, -1.0, 4)


# ---------------------------------------------------------------- GSWE

def test_gswe_rho_zero():
    es = sp.gswe_eigensystem(0, 0.0, 8)
    l = np.arange(9)
    np.testing.assert_allclose(es.eigenvalues, l * (l + 1), atol=1e-12)
    assert np.all(es.is_real)


def test_gswe_real_below_bound():
    es = sp.gswe_eigensystem(0, 0.5, 24)
    assert np.all(np.abs(es.eigenvalues.imag) < 1e-9)


@given(st.integers(0, 6), st.floats(0, 10))
@settings(max_examples=40, deadline=None)
def test_gswe_trace_conjugation_and_real_part(m, rho):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sp.NearDefectiveWarning)
        es = sp.gswe_eigensystem(m, rho, 24)
    l = np.arange(m, 25)
    assert abs(es.eigenvalues.sum() - (l * (l + 1)).sum()) < 1e-8
    w = np.sort_complex(es.eigenvalues)
    np.testing.assert_allclose(np.sort_complex(np.conj(w)), w, atol=1e-9)
    assert np.all(es.eigenvalues.real >= 0)


def test_gswe_gram_and_residual():
    es = sp.gswe_eigensystem(1, 3.0, 16)
    A = 3j * sp.build_m2(1, 16).matrix + sp.build_lambda(1, 16).matrix
    assert np.abs(A @ es.vectors - es.vectors * es.eigenvalues).max() < 1e-10
    # bi-orthogonality without conjugation
    G = es.vectors.T @ es.vectors
    np.testing.assert_allclose(G - np.diag(np.diag(G)), 0, atol=1e-10)
    np.testing.assert_allclose(np.diag(G), es.gram, atol=1e-12)


def test_gswe_near_defective_warns(monkeypatch):
    rho = sp.detect_branch_points(0, 2.5, 1e-12, 24).points[0]
    far = sp.gswe_eigensystem(0, 0.5, 24)
    near = sp.gswe_eigensystem(0, rho, 24, warn=False)
    # the Gram value of the colliding pair vanishes like the square root of the distance
    assert np.abs(near.gram).min() < 1e-4 * np.abs(far.gram).min()
    monkeypatch.setattr(sp, "GRAM_TOL", 1e-4)
    with pytest.warns(sp.NearDefectiveWarning):
        es = sp.gswe_eigensystem(0, rho, 24)
    assert es.defective
    assert not sp.gswe_eigensystem(0, 0.5, 24).defective


def test_equal_norm_frequencies_same_spectrum():
    w1 = np.array([0.3, -1.2, 0.7])
    w2 = np.linalg.norm(w1) * np.array([0.0, 0.0, 1.0])
    a = sp.gswe_eigensystem(2, np.linalg.norm(w1) / 0.5, 12).eigenvalues
    b = sp.gswe_eigensystem(2, np.linalg.norm(w2) / 0.5, 12).eigenvalues
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- wave functions

def test_spheroidal_wave_rho_zero():
    x = np.linspace(-0.9, 0.9, 7)
    np.testing.assert_allclose(sp.spheroidal_wave(4, 2, 0.0, x), assoc_legendre(4, 2, x), atol=1e-12)
    np.testing.assert_allclose(sp.gen_spheroidal_wave(3, 1, 0.0, x), assoc_legendre(3, 1, x),
                               atol=1e-12)


def test_spheroidal_orthonormal():
    x, w = np.polynomial.legendre.leggauss(80)
    S = np.array([sp.spheroidal_wave(l, 1, 2.5, x) for l in range(1, 8)])
    np.testing.assert_allclose((S * w) @ S.T, np.eye(7), atol=1e-8)


def test_gen_spheroidal_biorthogonal():
    x, w = np.polynomial.legendre.leggauss(80)
    S = np.array([sp.gen_spheroidal_wave(l, 0, 1.5, x) for l in range(0, 6)])
    G = (S * w) @ S.T
    np.testing.assert_allclose(G - np.diag(np.diag(G)), 0, atol=1e-8)


@pytest.mark.parametrize("rho", [0.0, 1.0, 2.5, 5.0])
def test_swe_ode_residual(rho):
    x = np.linspace(-0.95, 0.95, 51)
    for m in range(0, 4):
        for l in range(m, 7):
            lam = sp._converged_system(sp.swe_eigensystem, l, m, rho, l).eigenvalues[l - m]
            f = lambda z: sp.spheroidal_wave(l, m, rho, z, lmax=l)
            assert ode_residual(f, lam, m, rho, x, 1e-3, lambda z: rho * rho * z * z) < 1e-6


@pytest.mark.parametrize("rho", [0.5, 2.0, 5.0])
def test_gswe_ode_residual_and_reflection(rho):
    x = np.linspace(-0.95, 0.95, 51)
    for m in range(0, 4):
        for l in range(m, 7):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sp.NearDefectiveWarning)
                _, lam = sp.gen_spheroidal_wave(l, m, rho, 0.0, lmax=l, return_eigenvalue=True)
                f = lambda z: sp.gen_spheroidal_wave(l, m, rho, z, lmax=l)
                pot = lambda z: 1j * rho * z
                assert ode_residual(f, lam, m, rho, x, 1e-3, pot) < 1e-6
                # conj(f(-x)) solves the equation for conj(lambda)
                g = lambda z: np.conj(f(-z))
                assert ode_residual(g, np.conj(lam), m, rho, x, 1e-3, pot) < 1e-6


# ---------------------------------------------------------------- branch points

def test_branch_points_properties():
    for m in (0, 1):
        bp = sp.detect_branch_points(m, m + 6, 1e-9, 24)
        assert bp.points, "expected at least one collision"
        assert all(p > m + 1 for p in bp.points)
        assert np.all(np.diff(bp.points) > 0)
        # square-root branching: the gap scales like sqrt(resolution)
        for p in bp.points:
            w = sp.gswe_eigensystem(m, p, 24, warn=False).eigenvalues
            d = np.abs(w[:, None] - w[None])
            np.fill_diagonal(d, np.inf)
            assert d.min() < 10 * math.sqrt(bp.scan_resolution)


def test_branch_point_requires_range():
    with pytest.raises(ValueError):
        sp.detect_branch_points(2, 3.0)


def test_eigencurves_real_then_complex_and_csv():
    rhos, vals = sp.eigencurves(0, 4.0, 81, 16)
    assert np.all(np.abs(vals[rhos < 1].imag) < 1e-12)
    assert np.any(np.abs(vals[rhos > 2].imag) > 1e-3)
    rhos, swe = sp.eigencurves(0, 4.0, 81, 16, kind="swe")
    assert np.all(np.diff(swe.real, axis=1) > 0)
    buf = io.StringIO()
    sp.write_eigencurves_csv(buf, 0, rhos[:2], swe[:2, :2])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "m,l_index,rho,re,im"
    assert len(lines) == 5
    assert lines[1].split(",")[:3] == ["0", "0", "0.0"]
