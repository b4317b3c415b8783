"""Normalized associated Legendre functions, spherical harmonics and rotations.

Conventions
-----------
Legendre functions are normalized on [-1, 1] and carry no Condon-Shortley
phase::

    Pbar_l^m(x) = N_lm (1 - x^2)^{|m|/2} d^{|m|} P_l / dx^{|m|}
    N_lm = sqrt((2l + 1) (l - |m|)! / (2 (l + |m|)!))

so that ``Pbar_l^m == Pbar_l^{-m}``. Spherical harmonics put the phase in a
separate sign factor::

    Y_lm(beta, gamma) = eps_m / sqrt(2 pi) * Pbar_l^m(cos beta) * exp(i m gamma)
    eps_m = (-1)^m for m >= 0, 1 for m < 0

which coincides with the usual Condon-Shortley complex harmonics. Coefficient
stacks over all (l, m) with l <= lmax use the flat index ``k = l^2 + l + m``.
"""

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np
from scipy.spatial import SphericalVoronoi

__all__ = [
    "sh_index",
    "sh_count",
    "sh_lm",
    "legendre_table",
    "assoc_legendre",
    "spherical_harmonic",
    "sh_matrix",
    "recurrence_x",
    "recurrence_x2",
    "norm_factor",
    "OrientationSampling",
    "icosahedral_sampling",
    "forward_transform",
    "inverse_transform",
    "euler_zyz",
    "rotation_from_euler",
    "rotation_about",
    "check_rotation",
    "wigner_small_d",
    "wigner_matrices",
    "wigner_rotate",
    "SHDomainError",
    "ConditioningError",
    "RotationError",
]


class SHDomainError(ValueError):
    pass


class ConditioningError(np.linalg.LinAlgError):
    pass


class RotationError(ValueError):
    pass


def sh_index(l, m):
    return l * l + l + m


def sh_count(lmax):
    return (lmax + 1) ** 2


@lru_cache(maxsize=None)
def sh_lm(lmax):
    """Degree and order arrays for the flat coefficient index."""
    ls = np.concatenate([np.full(2 * l + 1, l) for l in range(lmax + 1)])
    ms = np.concatenate([np.arange(-l, l + 1) for l in range(lmax + 1)])
    ls.setflags(write=False)
    ms.setflags(write=False)
    return ls, ms


def norm_factor(l, m):
    """N_lm computed through log-gamma so large degrees do not overflow."""
    m = abs(m)
    return math.exp(0.5 * (math.log((2 * l + 1) / 2.0)
                           + math.lgamma(l - m + 1) - math.lgamma(l + m + 1)))


def legendre_table(lmax, x):
    """Normalized associated Legendre functions for 0 <= m <= l <= lmax.

    Parameters
    ----------
    lmax : int
    x : array_like
        Points in [-1, 1].

    Returns
    -------
    ndarray, shape (lmax + 1, lmax + 1) + x.shape
        ``P[l, m]`` holds Pbar_l^m(x); entries with m > l are zero.
    """
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-14):
        raise SHDomainError("Legendre argument outside [-1, 1]")
    x = np.clip(x, -1.0, 1.0)
    s = np.sqrt(np.maximum(0.0, (1.0 - x) * (1.0 + x)))
    P = np.zeros((lmax + 1, lmax + 1) + x.shape)
    diag = np.full(x.shape, math.sqrt(0.5))
    for m in range(lmax + 1):
        if m > 0:
            diag = diag * math.sqrt((2 * m + 1) / (2.0 * m)) * s
        P[m, m] = diag
        if m + 1 <= lmax:
            P[m + 1, m] = math.sqrt(2 * m + 3) * x * diag
        for l in range(m + 2, lmax + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) * (2 * l + 1)
                          / ((2 * l - 3.0) * (l * l - m * m)))
            P[l, m] = a * x * P[l - 1, m] - b * P[l - 2, m]
    return P


def assoc_legendre(l, m, x):
    """Pbar_l^m(x) for a single degree and order (m may be negative)."""
    if l < 0 or abs(m) > l:
        raise SHDomainError(f"need |m| <= l, got l={l}, m={m}")
    x_arr = np.asarray(x, dtype=float)
    if np.any(np.abs(x_arr) > 1.0):
        raise SHDomainError("Legendre argument outside [-1, 1]")
    val = legendre_table(l, x_arr)[l, abs(m)]
    return float(val) if val.ndim == 0 else val


def _eps(m):
    return np.where(np.asarray(m) >= 0, (-1.0) ** np.abs(m), 1.0)


def spherical_harmonic(l, m, beta, gamma):
    """Y_lm at polar angle ``beta`` and azimuth ``gamma``."""
    if l < 0 or abs(m) > l:
        raise SHDomainError(f"need |m| <= l, got l={l}, m={m}")
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    p = legendre_table(l, np.cos(beta))[l, abs(m)]
    val = _eps(m) / math.sqrt(2 * math.pi) * p * np.exp(1j * m * gamma)
    return complex(val) if np.ndim(val) == 0 else val


def _angles(directions):
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    z = np.clip(d[:, 2] / np.linalg.norm(d, axis=1), -1.0, 1.0)
    return z, np.arctan2(d[:, 1], d[:, 0])


def sh_matrix(lmax, directions):
    """Design matrix ``Y[i, k] = Y_{l m}(n_i)`` over the flat index k."""
    cosb, gamma = _angles(directions)
    P = legendre_table(lmax, cosb)
    ls, ms = sh_lm(lmax)
    am = np.abs(ms)
    eps = _eps(ms)
    leg = P[ls, am]  # (K, n)
    phase = np.exp(1j * np.outer(gamma, ms))
    return (leg.T * (eps / math.sqrt(2 * math.pi))) * phase


def recurrence_x(l, m, normalized=False):
    """Coefficients of x P_l^m = xi P_{l+1}^m + nu P_{l-1}^m.

    With ``normalized=True`` the coefficients refer to the normalized basis,
    i.e. they are multiplied by N_lm / N_{l+1,m} and N_lm / N_{l-1,m}.
    """
    if l < 0 or abs(m) > l:
        raise SHDomainError(f"need |m| <= l, got l={l}, m={m}")
    m = abs(m)
    xi = (l - m + 1) / (2 * l + 1)
    nu = (l + m) / (2 * l + 1)
    if normalized:
        xi *= norm_factor(l, m) / norm_factor(l + 1, m)
        nu = nu * norm_factor(l, m) / norm_factor(l - 1, m) if l - 1 >= m else 0.0
    return xi, nu


def recurrence_x2(l, m, normalized=False):
    """Coefficients of x^2 P_l^m = zeta P_{l+2}^m + eta P_l^m + alpha P_{l-2}^m."""
    if l < 0 or abs(m) > l:
        raise SHDomainError(f"need |m| <= l, got l={l}, m={m}")
    m = abs(m)
    zeta = (l - m + 1) * (l - m + 2) / ((2 * l + 3) * (2 * l + 1))
    eta = (2 * l * (l + 1) - 2 * m * m - 1) / (4 * l * (l + 1) - 3)
    alpha = (l + m - 1) * (l + m) / ((2 * l - 1) * (2 * l + 1))
    if normalized:
        zeta *= norm_factor(l, m) / norm_factor(l + 2, m)
        alpha = alpha * norm_factor(l, m) / norm_factor(l - 2, m) if l - 2 >= m else 0.0
    return zeta, eta, alpha


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True, eq=False)
class OrientationSampling:
    """Unit directions with solid-angle quadrature weights."""

    directions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.directions, dtype=float).reshape(-1, 3)
        w = np.ascontiguousarray(self.weights, dtype=float).reshape(-1)
        if d.shape[0] != w.shape[0]:
            raise ValueError("directions and weights differ in length")
        if np.max(np.abs(np.linalg.norm(d, axis=1) - 1.0), initial=0.0) > 1e-12:
            raise ValueError("orientation directions must have unit norm")
        d.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.directions.shape[0]

    def same_as(self, other, tol=1e-12):
        return (len(self) == len(other)
                and np.allclose(self.directions, other.directions, atol=tol, rtol=0)
                and np.allclose(self.weights, other.weights, atol=tol, rtol=0))

    @classmethod
    def from_directions(cls, directions):
        """Voronoi solid-angle weights for an arbitrary direction set."""
        d = np.asarray(directions, dtype=float)
        unit = d / np.linalg.norm(d, axis=1, keepdims=True)
        sv = SphericalVoronoi(unit, radius=1.0, center=np.zeros(3))
        return cls(d, sv.calculate_areas())


def _icosahedron():
    p = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                  [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                  [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], dtype=float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # put a vertex on the north pole so e_z is always a sample
    a = v[5]
    axis = np.cross(a, [0.0, 0.0, 1.0])
    ang = math.acos(np.clip(a[2], -1, 1))
    R = rotation_about(axis, ang)
    v = v @ R.T
    v[5] = [0.0, 0.0, 1.0]
    v[np.argmin(v[:, 2])] = [0.0, 0.0, -1.0]
    return v, f


def _refine(v, f):
    verts = [tuple(x) for x in v]
    index = {}
    faces = []

    def mid(i, j):
        key = (min(i, j), max(i, j))
        if key not in index:
            p = np.add(verts[i], verts[j])
            p = p / np.linalg.norm(p)
            index[key] = len(verts)
            verts.append(tuple(p))
        return index[key]

    for a, b, c in f:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts), np.array(faces)


@lru_cache(maxsize=8)
def icosahedral_mesh(refinements=3):
    """Vertices and triangles of a refined icosahedron (12, 42, 162, 642, ...)."""
    v, f = _icosahedron()
    for _ in range(refinements):
        v, f = _refine(v, f)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    v.setflags(write=False)
    f.setflags(write=False)
    return v, f


@lru_cache(maxsize=8)
def icosahedral_sampling(refinements=3):
    """Refined icosahedral vertices with Voronoi solid-angle weights.

    The default of three refinements gives 642 directions.
    """
    v, _ = icosahedral_mesh(refinements)
    return OrientationSampling.from_directions(v)


# ---------------------------------------------------------------- transforms

_PINV_CACHE = {}


def _weighted_pinv(sampling, lmax):
    key = (id(sampling), lmax)
    hit = _PINV_CACHE.get(key)
    if hit is not None and hit[0] is sampling:
        return hit[1]
    Y = sh_matrix(lmax, sampling.directions)
    sw = np.sqrt(sampling.weights)
    A = Y * sw[:, None]
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    if A.shape[0] < A.shape[1] or s[-1] < 1e-10 * s[0]:
        raise ConditioningError(
            f"{len(sampling)} directions do not resolve degree {lmax} "
            f"(condition {s[0] / max(s[-1], 1e-300):.3g})")
    pinv = (Vh.conj().T / s) @ U.conj().T * sw[None, :]
    if len(_PINV_CACHE) > 16:
        _PINV_CACHE.clear()
    _PINV_CACHE[key] = (sampling, pinv)
    return pinv


def forward_transform(samples, sampling, lmax):
    """Weighted least-squares spherical harmonic coefficients.

    ``samples`` has the orientation axis last; the result replaces it with
    (lmax + 1)^2 complex coefficients.
    """
    pinv = _weighted_pinv(sampling, lmax)
    samples = np.asarray(samples)
    if samples.shape[-1] != len(sampling):
        raise ValueError("last axis must match the sampling size")
    return samples @ pinv.T


def inverse_transform(coeffs, directions, real=False):
    """Synthesize ``sum_k c_k Y_k(n)`` at the given directions (last axis)."""
    coeffs = np.asarray(coeffs)
    lmax = int(round(math.sqrt(coeffs.shape[-1]))) - 1
    if sh_count(lmax) != coeffs.shape[-1]:
        raise ValueError("coefficient axis is not a full (lmax + 1)^2 stack")
    dirs = directions.directions if isinstance(directions, OrientationSampling) else directions
    Y = sh_matrix(lmax, dirs)
    if real:
        return coeffs.real @ Y.real.T - coeffs.imag @ Y.imag.T
    return coeffs @ Y.T


# ---------------------------------------------------------------- rotations

def rotation_about(axis, angle):
    """Right-handed rotation matrix about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.eye(3)
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rotation_from_euler(alpha, beta, gamma):
    """R = R_z(alpha) R_y(beta) R_z(gamma), broadcasting over the angles."""
    alpha, beta, gamma = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                               for a in (alpha, beta, gamma)))
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    R = np.empty(alpha.shape + (3, 3))
    R[..., 0, 0] = ca * cb * cg - sa * sg
    R[..., 0, 1] = -ca * cb * sg - sa * cg
    R[..., 0, 2] = ca * sb
    R[..., 1, 0] = sa * cb * cg + ca * sg
    R[..., 1, 1] = -sa * cb * sg + ca * cg
    R[..., 1, 2] = sa * sb
    R[..., 2, 0] = -sb * cg
    R[..., 2, 1] = sb * sg
    R[..., 2, 2] = cb
    return R


def check_rotation(R, tol=1e-12):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise RotationError("rotation must be 3x3")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if err > tol or np.any(np.abs(np.linalg.det(R) - 1.0) > tol):
        raise RotationError(f"not a proper rotation (orthogonality error {err:.3g})")
    return R


def euler_zyz(R):
    """ZYZ Euler angles (alpha, beta, gamma) with R = Rz(a) Ry(b) Rz(c)."""
    R = np.asarray(R, dtype=float)
    beta = np.arccos(np.clip(R[..., 2, 2], -1.0, 1.0))
    sb = np.hypot(R[..., 0, 2], R[..., 1, 2])
    regular = sb > 1e-12
    alpha = np.where(regular, np.arctan2(R[..., 1, 2], R[..., 0, 2]),
                     np.where(R[..., 2, 2] > 0, np.arctan2(R[..., 1, 0], R[..., 0, 0]),
                              np.arctan2(-R[..., 1, 0], R[..., 1, 1])))
    gamma = np.where(regular, np.arctan2(R[..., 2, 1], -R[..., 2, 0]), 0.0)
    beta = np.where(regular, beta, np.where(R[..., 2, 2] > 0, 0.0, np.pi))
    return alpha, beta, gamma


@lru_cache(maxsize=None)
def _seed_tables(lmax):
    L = lmax
    mp, mm = np.meshgrid(np.arange(-L, L + 1), np.arange(-L, L + 1), indexing="ij")
    l0 = np.maximum(np.abs(mp), np.abs(mm))
    coef = np.zeros(mp.shape)
    pc = np.zeros(mp.shape, dtype=int)
    ps = np.zeros(mp.shape, dtype=int)
    # closed forms for d^j_{m'm} when one index equals +-j, applied so that
    # later cases overwrite earlier ones where they coincide
    for i in range(2 * L + 1):
        for k in range(2 * L + 1):
            a, b, j = mp[i, k], mm[i, k], l0[i, k]
            if b == -j:
                coef[i, k] = (-1) ** ((j + a) % 2) * math.sqrt(math.comb(2 * j, j + a))
                pc[i, k], ps[i, k] = j - a, j + a
            if b == j:
                coef[i, k] = math.sqrt(math.comb(2 * j, j - a))
                pc[i, k], ps[i, k] = j + a, j - a
            if a == -j:
                coef[i, k] = math.sqrt(math.comb(2 * j, j + b))
                pc[i, k], ps[i, k] = j - b, j + b
            if a == j:
                coef[i, k] = (-1) ** ((j - b) % 2) * math.sqrt(math.comb(2 * j, j - b))
                pc[i, k], ps[i, k] = j + b, j - b
    return mp, mm, l0, coef, pc, ps


def wigner_small_d(lmax, beta):
    """Wigner small-d matrices d^l_{m'm}(beta) for l = 0..lmax.

    Uses the three-term recursion in l, seeded at l = max(|m'|, |m|).

    Returns
    -------
    list of ndarray
        Entry l has shape ``beta.shape + (2l + 1, 2l + 1)`` and is indexed
        ``[m' + l, m + l]``.
    """
    beta = np.asarray(beta, dtype=float)
    L = lmax
    mp, mm, l0, coef, pc, ps = _seed_tables(L)
    c = np.cos(beta / 2.0)[..., None, None]
    s = np.sin(beta / 2.0)[..., None, None]
    cb = np.cos(beta)[..., None, None]
    seed = coef * c ** pc * s ** ps
    prev = np.zeros(beta.shape + mp.shape)
    cur = np.where(l0 == 0, seed, 0.0)
    out = [cur[..., L:L + 1, L:L + 1].copy()]
    mpf = mp.astype(float)
    mmf = mm.astype(float)
    for l in range(0, L):
        lp = l + 1
        with np.errstate(divide="ignore", invalid="ignore"):
            pre = lp * (2 * l + 1) / np.sqrt((lp * lp - mmf ** 2) * (lp * lp - mpf ** 2))
            if l > 0:
                t1 = cb - mmf * mpf / (l * (l + 1))
                t2 = np.sqrt((l * l - mmf ** 2) * (l * l - mpf ** 2)) / (l * (2 * l + 1))
            else:
                t1 = cb + 0.0 * mmf
                t2 = np.zeros_like(mmf)
            rec = pre * (t1 * cur - t2 * prev)
        nxt = np.where(l0 <= l, rec, np.where(l0 == lp, seed, 0.0))
        prev, cur = cur, nxt
        out.append(cur[..., L - lp:L + lp + 1, L - lp:L + lp + 1].copy())
    return out


def wigner_matrices(lmax, R):
    """Per-degree rotation matrices for coefficient vectors.

    ``D[l] @ f_l`` gives the degree-l coefficients of ``n -> f(R^T n)``.
    """
    R = np.asarray(R, dtype=float)
    a, b, g = euler_zyz(R)
    return wigner_from_euler(lmax, a, b, g)


def wigner_from_euler(lmax, alpha, beta, gamma):
    alpha, beta, gamma = np.broadcast_arrays(np.asarray(alpha, float),
                                             np.asarray(beta, float),
                                             np.asarray(gamma, float))
    d = wigner_small_d(lmax, beta)
    D = []
    for l in range(lmax + 1):
        m = np.arange(-l, l + 1)
        ea = np.exp(-1j * alpha[..., None] * m)
        eg = np.exp(-1j * gamma[..., None] * m)
        D.append(ea[..., :, None] * d[l] * eg[..., None, :])
    return D


def wigner_rotate(coeffs, R):
    """Coefficients of ``n -> f(R^T n)`` given coefficients of f.

    ``coeffs`` holds the flat (l, m) index on its last axis.
    """
    R = check_rotation(R)
    coeffs = np.asarray(coeffs, dtype=complex)
    lmax = int(round(math.sqrt(coeffs.shape[-1]))) - 1
    if sh_count(lmax) != coeffs.shape[-1]:
        raise ValueError("coefficient axis is not a full (lmax + 1)^2 stack")
    D = wigner_matrices(lmax, R)
    out = np.empty_like(coeffs)
    for l in range(lmax + 1):
        sl = slice(l * l, (l + 1) ** 2)
        out[..., sl] = coeffs[..., sl] @ D[l].T
    return out
