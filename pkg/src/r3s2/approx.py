"""Gaussian approximation of the diffusion kernel through the SE(3) logarithm.

Group elements are pairs (x, R). The Lie algebra coordinates are
c = (c1, c2, c3, c4, c5, c6) with (c1, c2, c3) spatial and (c4, c5, c6) the
rotation vector. The approximate kernel on positions and orientations
evaluates the Gaussian on the group at the section
R_z(gamma) R_y(beta) R_z(-gamma), which makes c6 vanish and keeps the
kernel invariant under inversion.
"""

from dataclasses import dataclass
import math

import numpy as np

__all__ = [
    "ApproxParams",
    "LieCoeffs",
    "BranchError",
    "ChartError",
    "se3_log",
    "se3_exp",
    "weighted_modulus",
    "section_rotation",
    "log_approx_kernel",
    "log_approx_field",
]


class BranchError(ValueError):
    """Rotation angle at pi, where the principal logarithm is not unique."""


class ChartError(ValueError):
    pass


@dataclass(frozen=True)
class ApproxParams:
    D33: float = 1.0
    D44: float = 0.1
    t: float = 1.0
    xi_commutator: float = 16.0
    time_scale: float = 1.0

    def __post_init__(self):
        for name in ("D33", "D44", "t", "xi_commutator"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.time_scale >= 1:
            raise ValueError("time_scale must be >= 1")


@dataclass
class LieCoeffs:
    """Logarithm coordinates, shape (..., 6), and rotation angle q."""

    c: np.ndarray
    q: np.ndarray

    @property
    def spatial(self):
        return self.c[..., :3]

    @property
    def rotational(self):
        return self.c[..., 3:]


def _hat(w):
    w = np.asarray(w, dtype=float)
    O = np.zeros(w.shape[:-1] + (3, 3))
    O[..., 0, 1] = -w[..., 2]
    O[..., 0, 2] = w[..., 1]
    O[..., 1, 0] = w[..., 2]
    O[..., 1, 2] = -w[..., 0]
    O[..., 2, 0] = -w[..., 1]
    O[..., 2, 1] = w[..., 0]
    return O


def _so3_log(R, branch_tol=1e-10):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    cos_q = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    q = np.arccos(cos_q)
    if np.any(q > math.pi - branch_tol):
        raise BranchError("rotation angle pi has no unique principal logarithm")
    skew = np.stack([R[..., 2, 1] - R[..., 1, 2],
                     R[..., 0, 2] - R[..., 2, 0],
                     R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    # q / (2 sin q), with its limit 1/2 (plus q^2/12) near the identity
    small = q < 1e-6
    qs = np.where(small, 1.0, q)
    f = np.where(small, 0.5 + q * q / 12.0, qs / (2.0 * np.sin(qs)))
    return skew * f[..., None], q


def _vinv_coeff(q):
    """(1 - (q/2) cot(q/2)) / q^2, which tends to 1/12 at q = 0."""
    small = q < 1e-4
    qs = np.where(small, 1.0, q)
    h = 0.5 * qs
    exact = (1.0 - h * np.cos(h) / np.sin(h)) / (qs * qs)
    series = 1.0 / 12.0 + q * q / 720.0
    return np.where(small, series, exact)


def se3_log(x, R):
    """Logarithm coordinates of (x, R) on the principal branch.

    Parameters
    ----------
    x : array_like, shape (..., 3)
    R : array_like, shape (..., 3, 3)

    Returns
    -------
    LieCoeffs
    """
    x = np.asarray(x, dtype=float)
    w, q = _so3_log(R)
    O = _hat(w)
    O2 = O @ O
    V = (np.eye(3) - 0.5 * O + _vinv_coeff(q)[..., None, None] * O2)
    c1 = np.einsum("...ij,...j->...i", V, x)
    return LieCoeffs(np.concatenate([c1, w], axis=-1), q)


def se3_exp(c):
    """Group element (x, R) for logarithm coordinates c (closed form)."""
    c = np.asarray(c, dtype=float)
    v, w = c[..., :3], c[..., 3:]
    q = np.linalg.norm(w, axis=-1)
    O = _hat(w)
    O2 = O @ O
    small = q < 1e-6
    qs = np.where(small, 1.0, q)
    a = np.where(small, 1.0 - q * q / 6.0, np.sin(qs) / qs)
    b = np.where(small, 0.5 - q * q / 24.0, (1.0 - np.cos(qs)) / qs ** 2)
    d = np.where(small, 1.0 / 6.0 - q * q / 120.0, (qs - np.sin(qs)) / qs ** 3)
    eye = np.eye(3)
    R = eye + a[..., None, None] * O + b[..., None, None] * O2
    V = eye + b[..., None, None] * O + d[..., None, None] * O2
    return np.einsum("...ij,...j->...i", V, v), R


def weighted_modulus(c, p):
    """Smoothed weighted modulus of logarithm coordinates.

    Fourth root of (c1^2 + c2^2) / (xi D33 D44) + c6^2 / D44
    + (c3^2 / D33 + (c4^2 + c5^2) / D44)^2.
    """
    c = c.c if isinstance(c, LieCoeffs) else np.asarray(c, dtype=float)
    lateral = (c[..., 0] ** 2 + c[..., 1] ** 2) / (p.xi_commutator * p.D33 * p.D44)
    twist = c[..., 5] ** 2 / p.D44
    main = c[..., 2] ** 2 / p.D33 + (c[..., 3] ** 2 + c[..., 4] ** 2) / p.D44
    return (lateral + twist + main * main) ** 0.25


def section_rotation(n, pole_tol=1e-12):
    """R_z(gamma) R_y(beta) R_z(-gamma) for orientations n(beta, gamma).

    Equals the rotation by beta about (-sin gamma, cos gamma, 0), i.e. the
    minimal rotation taking e_z to n. Raises ChartError at n = -e_z.
    """
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(n[..., 2] < -1 + pole_tol):
        raise ChartError("the section is undefined at n = -e_z")
    beta = np.arccos(np.clip(n[..., 2], -1, 1))
    gamma = np.arctan2(n[..., 1], n[..., 0])
    cg, sg, cb, sb = np.cos(gamma), np.sin(gamma), np.cos(beta), np.sin(beta)
    R = np.empty(n.shape[:-1] + (3, 3))
    R[..., 0, 0] = cg * cg * cb + sg * sg
    R[..., 0, 1] = cg * sg * (cb - 1)
    R[..., 0, 2] = cg * sb
    R[..., 1, 0] = cg * sg * (cb - 1)
    R[..., 1, 1] = sg * sg * cb + cg * cg
    R[..., 1, 2] = sg * sb
    R[..., 2, 0] = -cg * sb
    R[..., 2, 1] = -sg * sb
    R[..., 2, 2] = cb
    return R


def log_approx_kernel(y, n, p, pole_tol=1e-9, strict=False):
    """Gaussian approximation of the diffusion kernel at (y, n).

    Returns (4 pi s^2 D33 D44)^-2 exp(-|log g|^2 / (4 s)) with s = c t the
    rescaled time, |.| the weighted modulus and
    g = (y, R_z(gamma) R_y(beta) R_z(-gamma)). Points with beta within
    ``pole_tol`` of pi get the value 0, or raise ChartError when ``strict``.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    y, n = np.broadcast_arrays(y, n)
    s = p.time_scale * p.t
    pole = np.arccos(np.clip(n[..., 2], -1.0, 1.0)) > math.pi - pole_tol
    if strict and np.any(pole):
        raise ChartError("the section is undefined at n = -e_z")
    n_safe = np.where(pole[..., None], np.array([0.0, 0.0, 1.0]), n)
    lc = se3_log(y, section_rotation(n_safe))
    mod = weighted_modulus(lc, p)
    val = np.exp(-mod ** 2 / (4.0 * s)) / (4.0 * math.pi * s * s * p.D33 * p.D44) ** 2
    return np.where(pole, 0.0, val)


def log_approx_field(n_half, voxel_size, p, sampling=None, chunk=512):
    """Approximate kernel sampled on a centered (2 n_half + 1)^3 grid.

    Returns an R3S2Field with orientation-sample storage.
    """
    from .fields import R3S2Field
    from .sh_core import icosahedral_sampling

    sampling = sampling or icosahedral_sampling()
    ax = voxel_size * np.arange(-n_half, n_half + 1)
    pos = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    dirs = sampling.directions
    out = np.empty((pos.shape[0], len(dirs)))
    for s in range(0, pos.shape[0], chunk):
        out[s:s + chunk] = log_approx_kernel(pos[s:s + chunk, None, :], dirs[None], p)
    S = ax.size
    return R3S2Field(out.reshape(S, S, S, -1), voxel_size, sampling=sampling,
                     meta={"approx": p})
