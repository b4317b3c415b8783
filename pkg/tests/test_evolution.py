import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg, special

from r3s2 import evolution as ev
from r3s2.evolution import ProcessParams, ParameterError
from r3s2 import spectral as sp

LMAX = 8


def dense_generator(p, m, lmax, r):
    """Generator matrix assembled from quadrature, independent of the spectral builders."""
    x, w = np.polynomial.legendre.leggauss(60)
    from r3s2.sh_core import legendre_table
    P = legendre_table(lmax, x)[abs(m):, abs(m)]
    ip = lambda f: np.einsum("ix,jx,x->ij", P, P, w * f)
    l = np.arange(abs(m), lmax + 1)
    lam = np.diag(l * (l + 1.0))
    if p.process == "diffusion":
        return p.D33 * r * r * ip(x * x) + p.D44 * lam
    if p.process == "elliptic":
        # D33 r^2 cos^2 + D11 r^2 sin^2 spatial symbol
        return r * r * ip(p.D33 * x * x + p.D11 * (1 - x * x)) + p.D44 * lam
    return p.D44 * lam + 1j * r * ip(x)


def laguerre_average(A, alpha, k=1, nodes=64):
    """Integral of exp(-A t) against the Gamma(k, alpha) density by quadrature."""
    x, w = special.roots_genlaguerre(nodes, k - 1)
    w = w / math.gamma(k)
    return sum(wi * linalg.expm(-A * xi / alpha) for xi, wi in zip(x, w))


def unit_vectors(n):
    return np.eye(n)


# ---------------------------------------------------------------- parameters

def test_params_validation():
    with pytest.raises(ParameterError):
        ProcessParams("diffusion", D44=0, t=1)
    with pytest.raises(ParameterError):
        ProcessParams("diffusion", D33=0, t=1)
    with pytest.raises(ParameterError):
        ProcessParams("elliptic", D33=1, D11=1, t=1)
    with pytest.raises(ParameterError):
        ProcessParams("diffusion", alpha=-1)
    with pytest.raises(ParameterError):
        ProcessParams("diffusion", alpha=1, gamma_k=0)
    with pytest.raises(ParameterError):
        ProcessParams("diffusion")
    with pytest.raises(ParameterError):
        ProcessParams("drift", t=1)
    assert ProcessParams("completion", D33=0, t=1).mode == "evolve"
    assert ProcessParams("completion", alpha=1).mode == "resolvent"
    assert ProcessParams("completion", alpha=1, gamma_k=3).mode == "gamma"


def test_wrong_process_rejected():
    p = ProcessParams("completion", t=1)
    with pytest.raises(ParameterError):
        ev.evolve_diffusion(np.ones(9), 1.0, p, m=0)


def test_generator_matches_quadrature():
    for proc, extra in (("diffusion", {}), ("completion", {}), ("elliptic", {"D11": 0.3})):
        p = ProcessParams(proc, 1.0, 0.1, t=1, **extra)
        for m in (0, 2):
            np.testing.assert_allclose(ev.generator_matrix(p, m, LMAX, 1.7),
                                       dense_generator(p, m, LMAX, 1.7), atol=1e-12)


# ---------------------------------------------------------------- diffusion

def test_diffusion_zero_frequency():
    p = ProcessParams("diffusion", 1.0, 0.1, t=2.0)
    l = np.arange(2, LMAX + 1)
    out = ev.evolve_diffusion(np.ones(l.size), 0.0, p, m=2)
    np.testing.assert_allclose(out, np.exp(-0.1 * l * (l + 1) * 2.0), atol=1e-14)


def test_diffusion_zero_time_identity():
    p = ProcessParams("diffusion", 1.0, 0.1, t=0.0)
    u = np.random.default_rng(1).standard_normal(LMAX + 1)
    np.testing.assert_allclose(ev.evolve_diffusion(u, 3.0, p, m=0), u, atol=1e-13)


@pytest.mark.parametrize("process", ["diffusion", "completion"])
def test_semigroup(process):
    rng = np.random.default_rng(2)
    u = rng.standard_normal(LMAX) + 1j * rng.standard_normal(LMAX)
    base = ProcessParams(process, 1.0, 0.3, t=0.7)
    for r in (0.0, 1.3, 4.0):
        a = ev.apply_process(ev.apply_process(u, r, base.with_(t=0.4), m=1), r, base, m=1)
        b = ev.apply_process(u, r, base.with_(t=1.1), m=1)
        assert np.abs(a - b).max() < 1e-10
        # brute force from the quadrature generator
        A = dense_generator(base, 1, LMAX, r)
        assert np.abs(b - linalg.expm(-1.1 * A) @ u).max() < 1e-10


def test_diffusion_resolvent_zero_frequency():
    p = ProcessParams("diffusion", 1.0, 0.1, alpha=0.5)
    l = np.arange(LMAX + 1)
    out = ev.resolvent_diffusion(np.ones(l.size), 0.0, p, m=0)
    np.testing.assert_allclose(out, 0.5 / (0.5 + 0.1 * l * (l + 1)), atol=1e-14)


def test_resolvent_large_alpha_identity():
    u = np.random.default_rng(3).standard_normal(LMAX + 1)
    errs = []
    for a in (1e2, 1e4):
        p = ProcessParams("diffusion", 1.0, 0.1, alpha=a)
        errs.append(np.abs(ev.resolvent_diffusion(u, 2.0, p, m=0) - u).max())
    assert errs[1] < errs[0] / 50 and errs[1] < 1e-2


@pytest.mark.parametrize("process", ["diffusion", "completion"])
@pytest.mark.parametrize("r", [0.0, 1.0, 4.0])
def test_laplace_identity(process, r):
    alpha = 2.0
    p = ProcessParams(process, 1.0, 0.1, alpha=alpha)
    A = dense_generator(p, 0, LMAX, r)
    Q = laguerre_average(A, alpha)
    R = ev.propagator(p, 0, LMAX, r, cache=False)
    assert np.abs(Q - R).max() < 1e-7


def test_diffusion_propagators_symmetric_contractions():
    p = ProcessParams("diffusion", 1.0, 0.1, t=1.5)
    for r in (0.0, 0.8, 5.0):
        for m in (0, 3):
            P = ev.propagator(p, m, LMAX, r, cache=False)
            np.testing.assert_allclose(P, P.T, atol=1e-13)
            w = np.linalg.eigvalsh(P)
            assert w.min() > -1e-13 and w.max() <= 1 + 1e-13


# ---------------------------------------------------------------- completion

def test_completion_zero_frequency_matches_diffusion():
    u = np.arange(1.0, LMAX + 2)
    pc = ProcessParams("completion", D44=0.2, t=1.3)
    pd = ProcessParams("diffusion", D44=0.2, t=1.3)
    np.testing.assert_allclose(ev.evolve_completion(u, 0.0, pc, m=0),
                               ev.evolve_diffusion(u, 0.0, pd, m=0), atol=1e-13)
    pc, pd = pc.with_(t=None, alpha=0.3), pd.with_(t=None, alpha=0.3)
    np.testing.assert_allclose(ev.resolvent_completion(u, 0.0, pc, m=0),
                               ev.resolvent_diffusion(u, 0.0, pd, m=0), atol=1e-13)


@given(st.floats(0, 10), st.floats(0.01, 3), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_completion_norm_non_increasing(r, t, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(LMAX + 1) + 1j * rng.standard_normal(LMAX + 1)
    p = ProcessParams("completion", D44=0.5, t=t)
    assert np.linalg.norm(ev.evolve_completion(u, r, p, m=0)) <= np.linalg.norm(u) * (1 + 1e-12)


def _away_from_branch(m, rho, lmax, gap=0.05):
    bps = sp.detect_branch_points(m, max(rho, m + 1) + 1.0, 1e-6, lmax).points
    return all(abs(rho - b) > gap for b in bps)


def test_completion_resolvent_two_routes():
    rng = np.random.default_rng(4)
    p = ProcessParams("completion", D44=0.2, alpha=0.25)
    checked = 0
    while checked < 10:
        m = int(rng.integers(0, 4))
        r = float(rng.uniform(0, 2.0))
        if not _away_from_branch(m, r / p.D44, LMAX):
            continue
        a = ev.propagator(p, m, LMAX, r, method="eigen", cache=False)
        b = ev.propagator(p, m, LMAX, r, method="auto", cache=False)
        assert np.abs(a - b).max() < 1e-8
        checked += 1


def test_completion_eigen_route_fails_at_branch_point(monkeypatch):
    rho = sp.detect_branch_points(0, 2.5, 1e-13, LMAX).points[0]
    p = ProcessParams("completion", D44=1.0, alpha=1.0)
    monkeypatch.setattr(sp, "GRAM_TOL", 1e-4)
    with pytest.raises(np.linalg.LinAlgError):
        ev.propagator(p, 0, LMAX, rho, method="eigen", cache=False)
    # the banded solve is well posed there
    assert np.all(np.isfinite(ev.propagator(p, 0, LMAX, rho, cache=False)))


# ---------------------------------------------------------------- elliptic

def test_elliptic_small_d11_recovers_diffusion():
    u = np.random.default_rng(5).standard_normal(LMAX + 1)
    pe = ProcessParams("elliptic", 1.0, 0.1, D11=1e-14, t=1.0)
    pd = ProcessParams("diffusion", 1.0, 0.1, t=1.0)
    for r in (0.0, 1.0, 3.0):
        np.testing.assert_allclose(ev.evolve_elliptic(u, r, pe, m=0),
                                   ev.evolve_diffusion(u, r, pd, m=0), atol=1e-10)


def test_elliptic_matches_dense_exponential():
    p = ProcessParams("elliptic", 1.0, 0.1, D11=0.3, t=0.8)
    u = np.random.default_rng(6).standard_normal(LMAX)
    for r in (0.0, 1.5, 3.0):
        ref = linalg.expm(-p.t * dense_generator(p, 1, LMAX, r)) @ u
        np.testing.assert_allclose(ev.evolve_elliptic(u, r, p, m=1), ref, atol=1e-12)
    # zero frequency equals diffusion
    pd = ProcessParams("diffusion", 1.0, 0.1, t=0.8)
    np.testing.assert_allclose(ev.evolve_elliptic(u, 0.0, p, m=1),
                               ev.evolve_diffusion(u, 0.0, pd, m=1), atol=1e-14)


def test_elliptic_requires_valid_d11():
    with pytest.raises(ParameterError):
        ProcessParams("elliptic", 1.0, 0.1, D11=2.0, t=1)


# ---------------------------------------------------------------- Gamma

def test_gamma_k1_equals_resolvent():
    u = np.arange(LMAX + 1.0)
    p = ProcessParams("completion", D44=0.5, alpha=0.25, gamma_k=1)
    np.testing.assert_allclose(ev.gamma_resolvent(u, 1.2, p, m=0),
                               ev.resolvent_completion(u, 1.2, p, m=0), atol=1e-15)


def test_gamma_k2_zero_frequency():
    p = ProcessParams("diffusion", 1.0, 0.1, alpha=0.5, gamma_k=2)
    l = np.arange(LMAX + 1)
    np.testing.assert_allclose(ev.gamma_resolvent(np.ones(l.size), 0.0, p, m=0),
                               (0.5 / (0.5 + 0.1 * l * (l + 1))) ** 2, atol=1e-14)


@pytest.mark.parametrize("process", ["diffusion", "completion"])
def test_gamma_quadrature(process):
    alpha, k = 2.0, 3
    p = ProcessParams(process, 1.0, 0.1, alpha=alpha, gamma_k=k)
    for r in (0.0, 1.0, 3.0):
        Q = laguerre_average(dense_generator(p, 1, LMAX, r), alpha, k)
        assert np.abs(Q - ev.propagator(p, 1, LMAX, r, cache=False)).max() < 1e-7


# ---------------------------------------------------------------- generic properties

@pytest.mark.parametrize("p", [
    ProcessParams("diffusion", 1.0, 0.1, t=1.0),
    ProcessParams("diffusion", 1.0, 0.1, alpha=0.3, gamma_k=2),
    ProcessParams("completion", D44=0.5, t=1.0),
    ProcessParams("completion", D44=0.5, alpha=0.25, gamma_k=4),
    ProcessParams("elliptic", 1.0, 0.1, D11=0.2, t=1.0),
])
def test_mass_zero_and_linearity(p):
    rng = np.random.default_rng(7)
    u = np.zeros(LMAX + 1)
    u[0] = 1.0
    assert ev.apply_process(u, 0.0, p, m=0)[0] == pytest.approx(1.0, abs=1e-14)
    assert np.all(ev.apply_process(np.zeros(LMAX + 1), 2.0, p, m=0) == 0)
    u1, u2 = rng.standard_normal((2, LMAX + 1))
    lhs = ev.apply_process(2 * u1 - 3 * u2, 2.0, p, m=0)
    rhs = 2 * ev.apply_process(u1, 2.0, p, m=0) - 3 * ev.apply_process(u2, 2.0, p, m=0)
    assert np.abs(lhs - rhs).max() < 1e-13


def test_coefficient_vector_wrapper():
    p = ProcessParams("diffusion", 1.0, 0.1, t=1.0)
    v = ev.SphCoeffVector(2, 6, np.ones(5))
    out = ev.evolve_diffusion(v, 1.0, p)
    assert isinstance(out, ev.SphCoeffVector) and out.values.shape == (5,)
    with pytest.raises(ValueError):
        ev.SphCoeffVector(2, 6, np.ones(4))


def test_propagator_cache_quantizes_r():
    ev.PROPAGATOR_CACHE.clear()
    p = ProcessParams("diffusion", 1.0, 0.1, t=1.0)
    a = ev.propagator(p, 0, 6, 1.0)
    b = ev.propagator(p, 0, 6, 1.0 + 1e-12)
    assert a is b and len(ev.PROPAGATOR_CACHE) == 1
