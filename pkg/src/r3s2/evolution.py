"""Per-frequency propagation of spherical harmonic coefficient blocks.

At spatial frequency omega with r = |omega|, and in the chart whose pole is
omega / r, the generators act on the order-m block of Legendre coefficients
as ``-A`` with

* diffusion:  A = D33 r^2 M1 + D44 Lambda
* completion: A = D44 Lambda + i r M2
* elliptic:   A = (D33 - D11) r^2 M1 + D44 Lambda + D11 r^2 I

Time evolution is ``exp(-A t)``, the resolvent ``alpha (alpha I + A)^-1``
and the Gamma-time integral its k-th power.
"""

from dataclasses import dataclass, asdict
import math
import threading

import numpy as np
from scipy import linalg

from . import spectral

__all__ = [
    "ProcessParams",
    "SphCoeffVector",
    "ParameterError",
    "generator_matrix",
    "propagator_stack",
    "propagator",
    "evolve_diffusion",
    "resolvent_diffusion",
    "evolve_completion",
    "resolvent_completion",
    "evolve_elliptic",
    "gamma_resolvent",
    "apply_process",
    "PROPAGATOR_CACHE",
]

PROCESSES = ("diffusion", "completion", "elliptic")
R_QUANTUM = 1e-9


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ProcessParams:
    """Parameters of a diffusion or convection-diffusion process.

    Exactly one of ``t`` (time evolution) or ``alpha`` (resolvent, with
    Gamma shape ``gamma_k``) is normally used; ``mode`` reports which.
    """

    process: str = "diffusion"
    D33: float = 1.0
    D44: float = 0.1
    D11: float = 0.0
    t: float = None
    alpha: float = None
    gamma_k: int = 1

    def __post_init__(self):
        if self.process not in PROCESSES:
            raise ParameterError(f"unknown process {self.process!r}")
        if not self.D44 > 0:
            raise ParameterError("D44 must be positive")
        if self.process in ("diffusion", "elliptic") and not self.D33 > 0:
            raise ParameterError("D33 must be positive")
        if self.process == "elliptic" and not (0 < self.D11 < self.D33):
            raise ParameterError("elliptic case needs 0 < D11 < D33")
        if self.t is not None and self.t < 0:
            raise ParameterError("t must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise ParameterError("alpha must be positive")
        if int(self.gamma_k) != self.gamma_k or self.gamma_k < 1:
            raise ParameterError("gamma_k must be an integer >= 1")
        if self.t is None and self.alpha is None:
            raise ParameterError("either t or alpha is required")

    @property
    def mode(self):
        if self.alpha is not None:
            return "gamma" if self.gamma_k > 1 else "resolvent"
        return "evolve"

    def key(self):
        return tuple(sorted(asdict(self).items()))

    def with_(self, **kw):
        d = asdict(self)
        d.update(kw)
        return ProcessParams(**d)


@dataclass
class SphCoeffVector:
    """Legendre/SH coefficients of fixed order m for degrees |m| .. lmax."""

    m: int
    lmax: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape[-1] != self.lmax - abs(self.m) + 1:
            raise ValueError("coefficient length must be lmax - |m| + 1")


def _vec(u, m=None, lmax=None):
    if isinstance(u, SphCoeffVector):
        return u.m, u.lmax, u.values
    u = np.asarray(u)
    if m is None:
        raise ValueError("order m is required for plain arrays")
    return m, abs(m) + u.shape[-1] - 1, u


def generator_matrix(p, m, lmax, r):
    """Dense matrix A(r) with the process generator equal to -A."""
    m = abs(m)
    M1 = spectral.build_m1(m, lmax).matrix
    M2 = spectral.build_m2(m, lmax).matrix
    Lam = spectral.build_lambda(m, lmax).matrix
    if p.process == "diffusion":
        return p.D33 * r * r * M1 + p.D44 * Lam
    if p.process == "elliptic":
        return ((p.D33 - p.D11) * r * r * M1 + p.D44 * Lam
                + p.D11 * r * r * np.eye(Lam.shape[0]))
    return p.D44 * Lam + 1j * r * M2


def _scalar_fn(p, mode):
    if mode == "evolve":
        t = p.t
        return lambda mu: np.exp(-mu * t)
    a = p.alpha
    k = 1 if mode == "resolvent" else int(p.gamma_k)
    return lambda mu: (a / (a + mu)) ** k


def _symmetric_stack(p, m, lmax, rs, mode):
    d33 = p.D33 - p.D11 if p.process == "elliptic" else p.D33
    rho = np.sqrt(d33 / p.D44) * rs
    vals, V = spectral.swe_eigensystem_batch(m, rho, lmax)
    mu = p.D44 * vals
    if p.process == "elliptic":
        mu = mu + (p.D11 * rs * rs)[:, None]
    f = _scalar_fn(p, mode)(mu)
    return np.einsum("rij,rj,rkj->rik", V, f, V)


def _completion_direct(p, m, lmax, rs, mode):
    m = abs(m)
    M2 = spectral.build_m2(m, lmax).matrix
    lam = np.diag(spectral.build_lambda(m, lmax).matrix)
    n = lam.size
    if mode == "evolve":
        A = p.D44 * np.diag(lam)[None] + 1j * rs[:, None, None] * M2[None]
        return linalg.expm(-A * p.t)
    a = p.alpha
    out = np.empty((rs.size, n, n), dtype=complex)
    ab = np.zeros((3, n), dtype=complex)
    rhs = a * np.eye(n, dtype=complex)
    off = np.diagonal(M2, 1)
    for i, r in enumerate(rs):
        ab[0, 1:] = 1j * r * off
        ab[1, :] = a + p.D44 * lam
        ab[2, :-1] = 1j * r * off
        out[i] = linalg.solve_banded((1, 1), ab, rhs)
    if mode == "gamma" and p.gamma_k > 1:
        out = np.linalg.matrix_power(out, int(p.gamma_k))
    return out


def _completion_eigen(p, m, lmax, rs, mode):
    f = _scalar_fn(p, mode)
    n = lmax - abs(m) + 1
    out = np.empty((rs.size, n, n), dtype=complex)
    for i, r in enumerate(rs):
        es = spectral.gswe_eigensystem(m, r / p.D44, lmax, warn=False)
        if es.defective:
            raise np.linalg.LinAlgError(
                f"eigen-expansion undefined near a branch point (m={m}, r={r})")
        C = es.vectors
        fv = f(p.D44 * es.eigenvalues) / es.gram
        out[i] = (C * fv) @ C.T
    return out


def _direct_dense(p, m, lmax, rs, mode):
    n = lmax - abs(m) + 1
    out = []
    for r in rs:
        A = generator_matrix(p, m, lmax, r)
        if mode == "evolve":
            P = linalg.expm(-A * p.t)
        else:
            P = p.alpha * linalg.solve(p.alpha * np.eye(n) + A, np.eye(n))
            if mode == "gamma":
                P = np.linalg.matrix_power(P, int(p.gamma_k))
        out.append(P)
    return np.array(out)


def propagator_stack(p, m, lmax, rs, mode=None, method="auto"):
    """Propagator matrices for every r in ``rs``.

    Parameters
    ----------
    p : ProcessParams
    m, lmax : int
    rs : array_like
        Frequency magnitudes.
    mode : {"evolve", "resolvent", "gamma"}, optional
        Defaults to ``p.mode``.
    method : {"auto", "eigen", "direct"}
        ``auto`` uses the symmetric eigendecomposition for diffusion and
        elliptic processes and Pade exponentials / banded solves for
        completion. ``eigen`` forces the spheroidal eigen-expansion and
        ``direct`` the dense exponential or linear solve.
    """
    mode = mode or p.mode
    if mode not in ("evolve", "resolvent", "gamma"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "evolve" and p.t is None:
        raise ParameterError("time evolution requires t")
    if mode != "evolve" and p.alpha is None:
        raise ParameterError("resolvent requires alpha")
    rs = np.asarray(rs, dtype=float).reshape(-1)
    if np.any(rs < 0):
        raise ValueError("frequency magnitudes must be non-negative")
    if method == "direct":
        return _direct_dense(p, m, lmax, rs, mode)
    if p.process == "completion":
        if method == "eigen":
            return _completion_eigen(p, m, lmax, rs, mode)
        return _completion_direct(p, m, lmax, rs, mode)
    return _symmetric_stack(p, m, lmax, rs, mode)


class _PropagatorCache:
    """Propagators keyed by process, block and quantized r.

    Inserts are last-writer-wins; values are deterministic so duplicated
    work under concurrency is harmless.
    """

    def __init__(self, maxsize=20000):
        self._d = {}
        self._lock = threading.Lock()
        self.maxsize = maxsize

    def get(self, p, m, lmax, r, mode, method):
        key = (p.key(), abs(m), lmax, mode, method, int(round(r / R_QUANTUM)))
        hit = self._d.get(key)
        if hit is None:
            hit = propagator_stack(p, m, lmax, [r], mode, method)[0]
            hit.setflags(write=False)
            with self._lock:
                if len(self._d) >= self.maxsize:
                    self._d.clear()
                self._d[key] = hit
        return hit

    def clear(self):
        with self._lock:
            self._d.clear()

    def __len__(self):
        return len(self._d)


PROPAGATOR_CACHE = _PropagatorCache()


def propagator(p, m, lmax, r, mode=None, method="auto", cache=True):
    mode = mode or p.mode
    if cache:
        return PROPAGATOR_CACHE.get(p, m, lmax, r, mode, method)
    return propagator_stack(p, m, lmax, [r], mode, method)[0]


def _apply(u, r, p, mode, m=None, method="auto"):
    m, lmax, vals = _vec(u, m)
    P = propagator(p, m, lmax, float(r), mode, method)
    out = vals @ P.T
    if isinstance(u, SphCoeffVector):
        return SphCoeffVector(m, lmax, out)
    return out


def _need(p, process):
    if p.process != process:
        raise ParameterError(f"expected a {process} process, got {p.process}")


def evolve_diffusion(u, r, p, m=None, method="auto"):
    """exp(-(D33 r^2 M1 + D44 Lambda) t) applied to u."""
    _need(p, "diffusion")
    return _apply(u, r, p, "evolve", m, method)


def resolvent_diffusion(u, r, p, m=None, method="auto"):
    """alpha (alpha I + D33 r^2 M1 + D44 Lambda)^-1 applied to u."""
    _need(p, "diffusion")
    return _apply(u, r, p, "resolvent", m, method)


def evolve_completion(u, r, p, m=None, method="auto"):
    """exp(-(D44 Lambda + i r M2) t) applied to u."""
    _need(p, "completion")
    return _apply(u, r, p, "evolve", m, method)


def resolvent_completion(u, r, p, m=None, method="auto"):
    """Solution of (alpha I + D44 Lambda + i r M2) w = alpha u."""
    _need(p, "completion")
    return _apply(u, r, p, "resolvent", m, method)


def evolve_elliptic(u, r, p, m=None, method="auto"):
    """Elliptic heat propagator via the rescaled diffusion propagator."""
    _need(p, "elliptic")
    if method != "auto":
        return _apply(u, r, p, "evolve", m, method)
    m_, lmax, vals = _vec(u, m)
    scaled = math.sqrt((p.D33 - p.D11) / p.D33) * float(r)
    pd = p.with_(process="diffusion", D11=0.0)
    P = propagator(pd, m_, lmax, scaled, "evolve") * math.exp(-r * r * p.D11 * p.t)
    out = vals @ P.T
    return SphCoeffVector(m_, lmax, out) if isinstance(u, SphCoeffVector) else out


def gamma_resolvent(u, r, p, m=None, method="auto"):
    """[alpha (alpha I + A)^-1]^k applied to u for Gamma(k, alpha) time."""
    return _apply(u, r, p, "gamma", m, method)


def apply_process(u, r, p, m=None, method="auto"):
    """Dispatch on ``p.mode`` for any process."""
    return _apply(u, r, p, p.mode, m, method)
