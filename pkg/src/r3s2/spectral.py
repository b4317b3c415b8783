"""Operator matrices and (generalized) spheroidal eigenproblems.

For a fixed order m the coefficient space is spanned by the normalized
Legendre functions Pbar_l^m, l = |m| .. lmax. In that basis

* ``M1`` is multiplication by x^2 (diagonals 0 and +-2, symmetric),
* ``M2`` is multiplication by x (diagonals +-1, symmetric, zero diagonal),
* ``Lambda`` is diag(l (l + 1)).

The spheroidal problem is ``(rho^2 M1 + Lambda) d = lam d`` and the
generalized one is ``(i rho M2 + Lambda) c = lam c``.
"""

from dataclasses import dataclass, field
import csv
import warnings

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from .sh_core import legendre_table, recurrence_x, recurrence_x2, norm_factor

__all__ = [
    "TriDiagOperator",
    "SpheroidalEigensystem",
    "BranchPointList",
    "NearDefectiveWarning",
    "EigenSolveError",
    "build_m1",
    "build_m2",
    "build_lambda",
    "swe_eigensystem",
    "swe_eigensystem_batch",
    "gswe_eigensystem",
    "spheroidal_wave",
    "gen_spheroidal_wave",
    "detect_branch_points",
    "eigencurves",
    "write_eigencurves_csv",
]

RESIDUAL_TOL = 1e-10
GRAM_TOL = 1e-8
EXTRA_DEGREES = 8


class NearDefectiveWarning(RuntimeWarning):
    pass


class EigenSolveError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TriDiagOperator:
    m: int
    lmax: int
    kind: str
    matrix: np.ndarray

    @property
    def degrees(self):
        return np.arange(abs(self.m), self.lmax + 1)

    def diagonal(self, k=0):
        return np.diagonal(self.matrix, k)


def _check(m, lmax):
    if lmax < abs(m):
        raise ValueError(f"lmax={lmax} must be >= |m|={abs(m)}")


def build_m1(m, lmax):
    """x^2 multiplication in the normalized Legendre basis of order m."""
    _check(m, lmax)
    m = abs(m)
    n = lmax - m + 1
    A = np.zeros((n, n))
    for j in range(n):
        l = m + j
        zeta, eta, _ = recurrence_x2(l, m)
        A[j, j] = eta
        if j + 2 < n:
            A[j + 2, j] = A[j, j + 2] = zeta * norm_factor(l, m) / norm_factor(l + 2, m)
    return TriDiagOperator(m, lmax, "M1", A)


def build_m2(m, lmax):
    """x multiplication in the normalized Legendre basis of order m."""
    _check(m, lmax)
    m = abs(m)
    n = lmax - m + 1
    A = np.zeros((n, n))
    for j in range(n - 1):
        xi, _ = recurrence_x(m + j, m, normalized=True)
        A[j + 1, j] = A[j, j + 1] = xi
    return TriDiagOperator(m, lmax, "M2", A)


def build_lambda(m, lmax):
    _check(m, lmax)
    l = np.arange(abs(m), lmax + 1)
    return TriDiagOperator(abs(m), lmax, "Lambda", np.diag((l * (l + 1)).astype(float)))


@dataclass
class SpheroidalEigensystem:
    """Eigenpairs for one order m and spectral parameter rho.

    ``vectors[:, k]`` holds the Legendre coefficients of the k-th eigenfunction.
    For the generalized problem ``gram[k] = c_k^T c_k`` (no conjugation).
    """

    m: int
    rho: float
    lmax: int
    kind: str
    eigenvalues: np.ndarray
    vectors: np.ndarray
    is_real: np.ndarray
    residual: float
    gram: np.ndarray = field(default=None)
    defective: bool = False

    @property
    def degrees(self):
        return np.arange(abs(self.m), self.lmax + 1)


def _fix_sign(V, tol=1e-14):
    """Scale each column so its first non-negligible entry is real-positive."""
    V = V.copy()
    for k in range(V.shape[1]):
        col = V[:, k]
        idx = np.flatnonzero(np.abs(col) > tol * np.abs(col).max())
        if idx.size:
            z = col[idx[0]]
            V[:, k] = col * (np.abs(z) / z)
    return V


def swe_eigensystem(m, rho, lmax):
    """Spheroidal eigenpairs of rho^2 M1 + Lambda (real, ascending).

    Even and odd Legendre offsets decouple, so each parity block is solved
    separately and the eigenvectors have exact zeros in the other parity.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    m = abs(m)
    A = rho * rho * build_m1(m, lmax).matrix + build_lambda(m, lmax).matrix
    n = A.shape[0]
    vals = np.empty(n)
    V = np.zeros((n, n))
    col = 0
    for par in (0, 1):
        idx = np.arange(par, n, 2)
        if idx.size == 0:
            continue
        w, v = linalg.eigh(A[np.ix_(idx, idx)])
        vals[col:col + idx.size] = w
        V[idx, col:col + idx.size] = v
        col += idx.size
    order = np.argsort(vals, kind="stable")
    vals, V = vals[order], V[:, order]
    V = _fix_sign(V)
    res = np.abs(A @ V - V * vals).max()
    if not np.isfinite(res) or res > RESIDUAL_TOL * max(1.0, np.abs(vals).max() / 100):
        raise EigenSolveError(f"spheroidal eigensolve residual {res:.3g}")
    return SpheroidalEigensystem(m, float(rho), lmax, "swe", vals, V,
                                 np.ones(n, dtype=bool), float(res))


def swe_eigensystem_batch(m, rhos, lmax):
    """Spheroidal eigenpairs for many rho values at once.

    Returns ``(vals, V)`` with shapes (n_rho, n) and (n_rho, n, n); the
    ordering within each parity block is ascending and the blocks are merged
    by eigenvalue. No sign fixing is applied (propagators do not need it).
    """
    m = abs(m)
    rhos = np.asarray(rhos, dtype=float).reshape(-1)
    M1 = build_m1(m, lmax).matrix
    lam = np.diag(build_lambda(m, lmax).matrix)
    n = lam.size
    vals = np.empty((rhos.size, n))
    V = np.zeros((rhos.size, n, n))
    col = 0
    for par in (0, 1):
        idx = np.arange(par, n, 2)
        if idx.size == 0:
            continue
        blk = (rhos[:, None, None] ** 2) * M1[np.ix_(idx, idx)] + np.diag(lam[idx])
        w, v = np.linalg.eigh(blk)
        vals[:, col:col + idx.size] = w
        V[:, idx, col:col + idx.size] = v
        col += idx.size
    order = np.argsort(vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return vals, V


def _gswe_real_form(m, rho, lmax):
    """Real tridiagonal matrix similar to i rho M2 + Lambda.

    Conjugating by S = diag(i^j) turns the imaginary off-diagonals into a
    real skew pair, so LAPACK returns exactly real eigenvalues or exact
    conjugate pairs.
    """
    M2 = build_m2(m, lmax).matrix
    T = build_lambda(m, lmax).matrix + rho * (np.tril(M2, -1) - np.triu(M2, 1))
    return T, M2


def gswe_eigensystem(m, rho, lmax, warn=True):
    """Generalized spheroidal eigenpairs of i rho M2 + Lambda.

    Eigenvalues are sorted by real part, a conjugate pair with positive
    imaginary part first. Eigenvectors have unit 2-norm and a real-positive
    leading coefficient.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    m = abs(m)
    T, M2 = _gswe_real_form(m, rho, lmax)
    n = T.shape[0]
    w, v = linalg.eig(T)
    S = np.array([1, 1j, -1, -1j])[np.arange(n) % 4]
    C = v * S[:, None]
    C = C / np.linalg.norm(C, axis=0)
    order = np.lexsort((-w.imag, w.real))
    w, C = w[order], C[:, order]
    is_real = w.imag == 0.0
    w = np.where(is_real, w.real + 0j, w)
    C = _fix_sign(C)
    A = 1j * rho * M2 + np.diag(np.arange(m, lmax + 1) * np.arange(m + 1, lmax + 2.0))
    res = np.abs(A @ C - C * w).max()
    gram = np.einsum("ik,ik->k", C, C)
    defective = bool(np.min(np.abs(gram)) < GRAM_TOL)
    if defective and warn:
        warnings.warn(f"generalized eigenbasis nearly defective at m={m}, rho={rho}: "
                      f"min |c^T c| = {np.min(np.abs(gram)):.3g}", NearDefectiveWarning)
    if not np.isfinite(res) or res > RESIDUAL_TOL * max(1.0, np.abs(w).max() / 100):
        if not defective:
            raise EigenSolveError(f"generalized eigensolve residual {res:.3g}")
    return SpheroidalEigensystem(m, float(rho), lmax, "gswe", w, C, is_real,
                                 float(res), gram, defective)


def _synth(vectors_col, m, x):
    x = np.asarray(x, dtype=float)
    n = vectors_col.shape[0]
    lmax = abs(m) + n - 1
    P = legendre_table(lmax, x)[abs(m):, abs(m)]
    return np.tensordot(vectors_col, P, axes=(0, 0))


def _converged_system(solve, l, m, rho, lmax, tail_tol=1e-15, max_lmax=400):
    """Eigensystem whose column for degree l has a negligible tail.

    Starts at ``max(l, lmax) + EXTRA_DEGREES`` and adds degrees until the
    last two Legendre coefficients of that column fall below ``tail_tol``.
    """
    L = max(l, lmax if lmax is not None else l) + EXTRA_DEGREES
    while True:
        es = solve(m, rho, L)
        col = es.vectors[:, l - abs(m)]
        if np.abs(col[-2:]).max() < tail_tol or L >= max_lmax:
            return es
        L += EXTRA_DEGREES


def spheroidal_wave(l, m, rho, x, lmax=None):
    """S^{l,m}_rho(x), unit L2 norm on [-1, 1]."""
    if abs(m) > l:
        raise ValueError("need |m| <= l")
    es = _converged_system(swe_eigensystem, l, m, rho, lmax)
    val = _synth(es.vectors[:, l - abs(m)], m, x)
    return float(val) if np.ndim(val) == 0 else val


def gen_spheroidal_wave(l, m, rho, x, lmax=None, return_eigenvalue=False):
    """GS^{l,m}_rho(x) with the Legendre coefficients of unit 2-norm."""
    if abs(m) > l:
        raise ValueError("need |m| <= l")
    es = _converged_system(gswe_eigensystem, l, m, rho, lmax)
    k = l - abs(m)
    val = _synth(es.vectors[:, k], m, x)
    val = complex(val) if np.ndim(val) == 0 else val
    if return_eigenvalue:
        return val, es.eigenvalues[k]
    return val


@dataclass
class BranchPointList:
    m: int
    points: list
    scan_resolution: float
    lmax: int


def _complex_count(m, rho, lmax):
    T, _ = _gswe_real_form(m, rho, lmax)
    w = linalg.eigvals(T)
    return int(np.count_nonzero(w.imag != 0.0))


def detect_branch_points(m, rho_max, resolution=1e-9, lmax=24, scan_step=0.01):
    """Locate rho values where generalized eigenvalues collide.

    The rho axis is scanned from 0 in steps of ``scan_step``; every change
    in the number of non-real eigenvalues is bracketed and refined by
    bisection until the bracket is narrower than ``resolution``. The
    reported point is the midpoint of the final bracket.
    """
    m = abs(m)
    if rho_max <= m + 1:
        raise ValueError("rho_max must exceed |m| + 1")
    grid = np.arange(0.0, rho_max + scan_step / 2, scan_step)
    counts = [_complex_count(m, r, lmax) for r in grid]
    points = []
    for i in range(1, len(grid)):
        if counts[i] == counts[i - 1]:
            continue
        lo, hi = grid[i - 1], grid[i]
        c_lo = counts[i - 1]
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            if _complex_count(m, mid, lmax) == c_lo:
                lo = mid
            else:
                hi = mid
        points.append(0.5 * (lo + hi))
    return BranchPointList(m, points, resolution, lmax)


def eigencurves(m, rho_max, n_rho=401, lmax=24, kind="gswe"):
    """Eigenvalue curves over a rho grid with continuity-based labels.

    Returns ``(rhos, values)`` where ``values[i, k]`` follows curve k, which
    starts at l = |m| + k for rho = 0. Consecutive samples are matched by a
    minimum-distance assignment.
    """
    m = abs(m)
    rhos = np.linspace(0.0, rho_max, n_rho)
    solve = gswe_eigensystem if kind == "gswe" else swe_eigensystem
    n = lmax - m + 1
    vals = np.empty((n_rho, n), dtype=complex)
    prev = None
    for i, r in enumerate(rhos):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NearDefectiveWarning)
            w = np.asarray(solve(m, r, lmax).eigenvalues, dtype=complex)
        if prev is not None:
            cost = np.abs(prev[:, None] - w[None, :])
            _, cols = linear_sum_assignment(cost)
            w = w[cols]
        vals[i] = w
        prev = w
    return rhos, vals


def write_eigencurves_csv(path_or_file, m, rhos, values):
    """Rows of (m, l_index, rho, re, im)."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        wr = csv.writer(fh)
        wr.writerow(["m", "l_index", "rho", "re", "im"])
        for k in range(values.shape[1]):
            for r, v in zip(rhos, values[:, k]):
                wr.writerow([m, k, repr(float(r)), repr(float(v.real)), repr(float(v.imag))])
    finally:
        if own:
            fh.close()
