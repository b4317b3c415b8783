"""Kernel assembly on a frequency grid and transformation to space.

For every frequency omega the evolution is carried out in the chart whose
pole is omega / |omega|, where the generator splits into independent blocks
of fixed order m. Coefficients are rotated into that chart and back with
Wigner matrices, so the stored kernels always use the fixed SH basis.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math
import os

import numpy as np
from scipy import ndimage

from . import evolution, spectral
from .evolution import ProcessParams, R_QUANTUM
from .fields import R3S2Field
from .sh_core import (sh_count, sh_lm, sh_matrix, wigner_from_euler, rotation_from_euler,
                      rotation_about, wigner_rotate, icosahedral_sampling)

__all__ = [
    "FrequencyGrid",
    "make_grid",
    "ReorientationEntry",
    "reorientation",
    "reorientation_euler",
    "delta_coefficients",
    "compute_kernel",
    "propagate_coefficients",
    "kernel_at_frequency",
    "kernel_series_at_frequency",
    "hermitian_violation",
    "enforce_hermitian",
    "inverse_spatial_fft",
    "forward_spatial_fft",
    "spatial_kernel",
    "gamma_kernel",
    "apply_process_to_field",
    "SymmetryReport",
    "verify_symmetries",
    "HermitianSymmetryError",
]


class HermitianSymmetryError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyGrid:
    """Centered cubic frequency grid with samples i * eta * pi / n_half."""

    n_half: int
    eta: float

    @property
    def size(self):
        return 2 * self.n_half + 1

    @property
    def spacing(self):
        return self.eta * math.pi / self.n_half

    @property
    def axis(self):
        return self.spacing * np.arange(-self.n_half, self.n_half + 1)

    @property
    def voxel_size(self):
        return 2.0 * self.n_half / (self.eta * (2 * self.n_half + 1))

    def omegas(self):
        a = self.axis
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)

    @classmethod
    def from_spatial(cls, n, voxel_size):
        """Grid dual to n odd samples per axis at the given voxel size."""
        if n % 2 != 1:
            raise ValueError("spatial grids must have an odd number of samples per axis")
        n_half = (n - 1) // 2
        if n_half < 1:
            raise ValueError("grid needs at least 3 samples per axis")
        return cls(n_half, 2.0 * n_half / (voxel_size * n))


def make_grid(n_half, eta):
    if int(n_half) != n_half or n_half < 1:
        raise ValueError("n_half must be an integer >= 1")
    if int(eta) != eta or eta < 1:
        raise ValueError("eta must be an integer >= 1")
    return FrequencyGrid(int(n_half), int(eta))


# ---------------------------------------------------------------- charts

def reorientation_euler(omega, tol=1e-12):
    """ZYZ Euler angles of the chart rotation for each frequency vector.

    The chart rotation maps e_z to omega / |omega|; its columns are
    ((omega x e_z) x omega), (omega x e_z), omega, each normalized, which
    equals R_z(phi) R_y(theta) R_z(pi) in spherical angles of omega. On the
    axis the cross product vanishes: omega along +e_z (and omega = 0) use
    the identity and omega along -e_z uses the half turn about e_x.
    """
    w = np.asarray(omega, dtype=float)
    r = np.linalg.norm(w, axis=-1)
    rho = np.hypot(w[..., 0], w[..., 1])
    on_axis = rho <= tol * np.maximum(r, 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arccos(np.clip(np.where(r > 0, w[..., 2] / np.where(r > 0, r, 1.0), 1.0), -1, 1))
    phi = np.arctan2(w[..., 1], w[..., 0])
    psi = np.full(r.shape, math.pi)
    up = on_axis & (w[..., 2] >= 0)
    down = on_axis & (w[..., 2] < 0)
    phi = np.where(on_axis, 0.0, phi)
    theta = np.where(up, 0.0, np.where(down, math.pi, theta))
    psi = np.where(up, 0.0, psi)
    return phi, theta, psi


@dataclass
class ReorientationEntry:
    omega: np.ndarray
    R: np.ndarray
    euler: tuple

    def chart(self, n):
        """Polar and azimuthal angles of directions n in this chart."""
        u = np.asarray(n, dtype=float) @ self.R
        return np.arccos(np.clip(u[..., 2], -1, 1)), np.arctan2(u[..., 1], u[..., 0])


def reorientation(omega):
    """Chart rotation for one frequency vector, built from its columns."""
    w = np.asarray(omega, dtype=float)
    r = np.linalg.norm(w)
    ez = np.array([0.0, 0.0, 1.0])
    b = np.cross(w, ez)
    nb = np.linalg.norm(b)
    if r == 0 or nb <= 1e-12 * r:
        # half turn about e_x for the south pole, identity otherwise
        R = np.diag([1.0, -1.0, -1.0]) if (r > 0 and w[2] < 0) else np.eye(3)
    else:
        a = np.cross(b, w)
        R = np.column_stack([a / np.linalg.norm(a), b / nb, w / r])
    return ReorientationEntry(w, R, reorientation_euler(w))


# ---------------------------------------------------------------- synthesis

def delta_coefficients(lmax, direction=(0.0, 0.0, 1.0)):
    """Band-limited delta at ``direction``: coefficients conj(Y_lm(n0))."""
    return np.conj(sh_matrix(lmax, np.atleast_2d(direction))[0])


def _unique_r(r):
    key = np.round(r / R_QUANTUM).astype(np.int64)
    _, first, inv = np.unique(key, return_index=True, return_inverse=True)
    return r.reshape(-1)[first], inv.reshape(-1)


def _block_index(lmax):
    ls, ms = sh_lm(lmax)
    idx = {}
    for m in range(-lmax, lmax + 1):
        idx[m] = np.array([l * l + l + m for l in range(abs(m), lmax + 1)])
    return idx


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("KERNELS_THREADS", "1") or 1)
    return max(1, int(threads))


def propagate_coefficients(omegas, coeffs, p, lmax, mode=None, method="auto",
                           chunk=2048, out=None, threads=None):
    """Apply the process to per-frequency SH coefficient vectors.

    Parameters
    ----------
    omegas : ndarray, shape (n, 3)
    coeffs : ndarray, shape (K,) or (n, K)
        Fixed-basis coefficients; a single vector is shared by all
        frequencies.
    p : ProcessParams
    lmax : int
    threads : int, optional
        Worker count for frequency chunks (default: ``KERNELS_THREADS`` or
        1). Each chunk writes its own slots, so results do not depend on it.

    Returns
    -------
    ndarray, shape (n, K), complex
    """
    omegas = np.asarray(omegas, dtype=float).reshape(-1, 3)
    n = omegas.shape[0]
    K = sh_count(lmax)
    coeffs = np.asarray(coeffs)
    shared = coeffs.ndim == 1
    if coeffs.shape[-1] != K:
        raise ValueError("coefficient axis does not match lmax")
    r = np.linalg.norm(omegas, axis=1)
    r_u, inv = _unique_r(r)
    mode = mode or p.mode
    props = {m: evolution.propagator_stack(p, m, lmax, r_u, mode, method)
             for m in range(lmax + 1)}
    phi, theta, psi = reorientation_euler(omegas)
    blocks = _block_index(lmax)
    if out is None:
        out = np.empty((n, K), dtype=complex)

    def work(s):
        e = min(n, s + chunk)
        D = wigner_from_euler(lmax, phi[s:e], theta[s:e], psi[s:e])
        u = np.broadcast_to(coeffs, (e - s, K)) if shared else coeffs[s:e]
        a = np.empty((e - s, K), dtype=complex)
        for l in range(lmax + 1):
            sl = slice(l * l, (l + 1) ** 2)
            a[:, sl] = np.einsum("bji,bj->bi", D[l].conj(), u[:, sl])
        w = np.empty_like(a)
        ri = inv[s:e]
        for m, idx in blocks.items():
            P = props[abs(m)][ri]
            w[:, idx] = np.einsum("bij,bj->bi", P, a[:, idx])
        for l in range(lmax + 1):
            sl = slice(l * l, (l + 1) ** 2)
            out[s:e, sl] = np.einsum("bij,bj->bi", D[l], w[:, sl])

    starts = range(0, n, chunk)
    nt = _threads(threads)
    if nt > 1 and n > chunk:
        with ThreadPoolExecutor(nt) as ex:
            list(ex.map(work, starts))
    else:
        for s in starts:
            work(s)
    return out


def compute_kernel(grid, p, lmax=12, initial=None, method="auto", chunk=2048, threads=None):
    """Frequency-domain kernel in the fixed SH basis.

    Returns an ``R3S2Field`` with ``domain="frequency"`` and SH storage whose
    spatial axes index the frequency grid.
    """
    if initial is None:
        initial = delta_coefficients(lmax)
    om = grid.omegas().reshape(-1, 3)
    vals = propagate_coefficients(om, initial, p, lmax, method=method, chunk=chunk,
                                  threads=threads)
    S = grid.size
    return R3S2Field(vals.reshape(S, S, S, -1), grid.voxel_size, lmax=lmax,
                     domain="frequency", grid=grid, meta={"params": p})


def kernel_at_frequency(omega, p, lmax, method="auto", initial=None):
    """Fixed-basis kernel coefficients at a single frequency."""
    if initial is None:
        initial = delta_coefficients(lmax)
    return propagate_coefficients(np.atleast_2d(omega), initial, p, lmax, method=method)[0]


def kernel_series_at_frequency(omega, directions, p, lmax):
    """Kernel at one frequency via the spheroidal eigenfunction expansion.

    Evaluates sum over m and eigenpairs j of
    f(mu_j) GS_j(cos b) GS_j(cos b0) exp(i m (g - g0)) / (2 pi c_j^T c_j),
    with (b, g) the chart angles of n and (b0, g0) those of e_z.
    """
    entry = reorientation(omega)
    r = float(np.linalg.norm(omega))
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    b, g = entry.chart(dirs)
    b0, g0 = entry.chart(np.array([[0.0, 0.0, 1.0]]))
    from .sh_core import legendre_table
    P = legendre_table(lmax, np.cos(b))
    P0 = legendre_table(lmax, np.cos(b0))
    mode = p.mode
    f = evolution._scalar_fn(p, mode)
    total = np.zeros(dirs.shape[0], dtype=complex)
    for m in range(-lmax, lmax + 1):
        am = abs(m)
        if p.process == "completion":
            es = spectral.gswe_eigensystem(am, r / p.D44, lmax, warn=False)
            mu = p.D44 * es.eigenvalues
            gram = es.gram
        else:
            d33 = p.D33 - p.D11 if p.process == "elliptic" else p.D33
            es = spectral.swe_eigensystem(am, math.sqrt(d33 / p.D44) * r, lmax)
            mu = p.D44 * es.eigenvalues
            if p.process == "elliptic":
                mu = mu + p.D11 * r * r
            gram = np.ones(mu.shape)
        V = es.vectors
        S = V.T @ P[am:, am]  # (n_eig, n_dirs)
        S0 = V.T @ P0[am:, am]
        coef = f(mu) / gram
        total += np.exp(1j * m * (g - g0)) * (coef[:, None] * S * S0).sum(axis=0)
    return total / (2 * math.pi)


# ---------------------------------------------------------------- Hermitian symmetry

def _conj_partner(vals, storage, lmax):
    """H(F)(omega) for every slot: the value implied by F at -omega."""
    flipped = vals[::-1, ::-1, ::-1]
    if storage == "samples":
        return np.conj(flipped)
    ls, ms = sh_lm(lmax)
    partner = np.array([l * l + l - m for l, m in zip(ls, ms)])
    sign = np.where(ms % 2 == 0, 1.0, -1.0)
    return np.conj(flipped[..., partner]) * sign


def hermitian_violation(vals, storage="sh", lmax=None):
    """Max |F - H(F)| relative to max |F|, processed coefficient by coefficient."""
    scale = np.abs(vals).max()
    if scale == 0:
        return 0.0
    worst = 0.0
    if storage == "samples":
        for o in range(vals.shape[3]):
            v = vals[..., o]
            worst = max(worst, np.abs(v - np.conj(v[::-1, ::-1, ::-1])).max())
        return worst / scale
    ls, ms = sh_lm(lmax)
    for k, (l, m) in enumerate(zip(ls, ms)):
        kp = l * l + l - m
        h = np.conj(vals[::-1, ::-1, ::-1, kp]) * (1.0 if m % 2 == 0 else -1.0)
        worst = max(worst, np.abs(vals[..., k] - h).max())
    return worst / scale


def enforce_hermitian(vals, storage="sh", lmax=None):
    """Average F with its Hermitian partner in place."""
    if storage == "samples":
        for o in range(vals.shape[3]):
            v = vals[..., o]
            vals[..., o] = 0.5 * (v + np.conj(v[::-1, ::-1, ::-1]))
        return vals
    ls, ms = sh_lm(lmax)
    for l in range(lmax + 1):
        for m in range(0, l + 1):
            kp, kn = l * l + l + m, l * l + l - m
            sgn = 1.0 if m % 2 == 0 else -1.0
            a = vals[..., kp].copy()
            b = vals[..., kn].copy()
            vals[..., kp] = 0.5 * (a + sgn * np.conj(b[::-1, ::-1, ::-1]))
            if m != 0:
                vals[..., kn] = 0.5 * (b + sgn * np.conj(a[::-1, ::-1, ::-1]))
    return vals


def _real_projection_sh(vals, lmax):
    """Project spatial SH coefficients onto those of a real function."""
    for l in range(lmax + 1):
        for m in range(0, l + 1):
            kp, kn = l * l + l + m, l * l + l - m
            sgn = 1.0 if m % 2 == 0 else -1.0
            if m == 0:
                vals[..., kp] = vals[..., kp].real
            else:
                a = vals[..., kp].copy()
                b = vals[..., kn].copy()
                vals[..., kp] = 0.5 * (a + sgn * np.conj(b))
                vals[..., kn] = 0.5 * (b + sgn * np.conj(a))
    return vals


# ---------------------------------------------------------------- FFT

def _fft_scale(grid, norm):
    n3 = grid.size ** 3
    if norm == "density":
        return (grid.spacing / (2 * math.pi)) ** 3 * n3
    if norm == "unitary":
        return math.sqrt(n3)
    raise ValueError("norm must be 'density' or 'unitary'")


def inverse_spatial_fft(freq_field, norm="density", tol=1e-6, copy=True):
    """Centered inverse DFT over the three spatial axes.

    With ``norm="density"`` the result approximates the continuous inverse
    Fourier transform, (2 pi)^-3 * integral F(omega) exp(i omega.y), so a
    kernel integrates to its omega = 0 value. ``norm="unitary"`` uses the
    orthonormal DFT. The input is checked for Hermitian symmetry, then
    symmetrized, and the output is projected onto real functions.
    """
    if freq_field.domain != "frequency":
        raise ValueError("expected a frequency-domain field")
    grid = freq_field.grid
    vals = freq_field.values.copy() if copy else freq_field.values
    storage = freq_field.storage
    viol = hermitian_violation(vals, storage, freq_field.lmax)
    if viol > tol:
        raise HermitianSymmetryError(f"Hermitian symmetry violated by {viol:.3g} (> {tol})")
    enforce_hermitian(vals, storage, freq_field.lmax)
    scale = _fft_scale(grid, norm)
    for k in range(vals.shape[3]):
        v = np.fft.ifftn(np.fft.ifftshift(vals[..., k]))
        vals[..., k] = np.fft.fftshift(v) * scale
    meta = dict(freq_field.meta, hermitian_violation=viol, fft_norm=norm)
    if storage == "samples":
        out = np.ascontiguousarray(vals.real)
        return R3S2Field(out, grid.voxel_size, sampling=freq_field.sampling,
                         grid=grid, meta=meta)
    _real_projection_sh(vals, freq_field.lmax)
    return R3S2Field(vals, grid.voxel_size, lmax=freq_field.lmax, grid=grid, meta=meta)


def forward_spatial_fft(field, norm="density"):
    """Inverse of ``inverse_spatial_fft`` for odd cubic spatial grids."""
    n = field.dims[0]
    if field.dims != (n, n, n):
        raise ValueError("only cubic grids are supported")
    grid = field.grid if field.grid is not None else FrequencyGrid.from_spatial(n, field.voxel_size)
    scale = _fft_scale(grid, norm)
    vals = field.values.astype(complex)
    for k in range(vals.shape[3]):
        v = np.fft.fftn(np.fft.ifftshift(vals[..., k]))
        vals[..., k] = np.fft.fftshift(v) / scale
    return R3S2Field(vals, field.voxel_size, sampling=field.sampling, lmax=field.lmax,
                     domain="frequency", grid=grid, meta=dict(field.meta))


def spatial_kernel(grid, p, lmax=12, method="auto", chunk=2048, threads=None):
    """compute_kernel followed by the inverse DFT (SH storage, density scaling)."""
    F = compute_kernel(grid, p, lmax, method=method, chunk=chunk, threads=threads)
    return inverse_spatial_fft(F, copy=False)


def gamma_kernel(grid, p, lmax=12, chunk=2048, threads=None):
    """Kernel for Gamma(k, alpha) distributed travel time."""
    if p.alpha is None:
        raise evolution.ParameterError("gamma_kernel requires alpha")
    return spatial_kernel(grid, p, lmax, chunk=chunk, threads=threads)


def apply_process_to_field(field, p, lmax, chunk=2048):
    """Evolve an arbitrary spatial field with the process in frequency space.

    This equals the shift-twist convolution of the field with the process
    kernel, evaluated without resampling rotated kernels.
    """
    sh = field.to_sh(lmax) if field.storage == "samples" else field
    F = forward_spatial_fft(sh)
    grid = F.grid
    om = grid.omegas().reshape(-1, 3)
    K = sh_count(lmax)
    out = propagate_coefficients(om, F.values.reshape(-1, K), p, lmax, chunk=chunk)
    G = R3S2Field(out.reshape(F.values.shape), field.voxel_size, lmax=lmax,
                  domain="frequency", grid=grid, meta=dict(field.meta))
    res = inverse_spatial_fft(G, copy=False)
    if field.storage == "samples":
        return res.to_samples(field.sampling)
    return res


# ---------------------------------------------------------------- symmetry checks

@dataclass
class SymmetryReport:
    alpha_violation: float
    inversion_violation: float
    alpha_angles: tuple
    per_angle: dict

    def as_dict(self):
        return {"alpha_violation": self.alpha_violation,
                "inversion_violation": self.inversion_violation,
                "alpha_angles": list(self.alpha_angles),
                "per_angle": {str(k): v for k, v in self.per_angle.items()}}


def _interp(vol, pts, order):
    """Values of a real or complex volume at fractional index coordinates."""
    coords = np.moveaxis(pts, -1, 0)
    kw = dict(order=order, mode="constant", cval=0.0, prefilter=order > 1)
    if np.iscomplexobj(vol):
        return (ndimage.map_coordinates(vol.real, coords, **kw)
                + 1j * ndimage.map_coordinates(vol.imag, coords, **kw))
    return ndimage.map_coordinates(vol, coords, **kw)


def _index_coords(field, points):
    c = np.array(field.center, dtype=float)
    return points / field.voxel_size + c


def _inside(field, idx):
    return np.all((idx >= 0) & (idx <= np.array(field.dims) - 1), axis=-1)


def verify_symmetries(field, lmax=None, alphas=(math.pi / 2, math.pi, 2 * math.pi / 5, 1.0),
                      inversion=True, orientations=None, order=3):
    """Relative l2 violations of the kernel symmetries.

    (a) K(y, n) = K(R_z(a) y, R_z(a) n) for each angle in ``alphas``;
    (b) K(y, n) = K(-R_n^T y, R_n^T e_z) with R_n = R_z(gamma) R_y(beta).

    Off-grid positions use spline interpolation of the given ``order``;
    orientation rotations are exact through Wigner matrices. Only grid
    points whose transformed position lies inside the grid are compared.
    """
    if field.domain != "spatial":
        raise ValueError("expected a spatial field")
    if field.storage == "samples":
        lmax = lmax if lmax is not None else 8
        sh = field.to_sh(lmax)
    else:
        sh = field
        lmax = sh.lmax
    C = sh.values
    K = C.shape[3]
    pos = field.positions()
    per = {}
    for a in alphas:
        R = rotation_about([0.0, 0.0, 1.0], a)
        steps = a / (math.pi / 2)
        if abs(steps - round(steps)) < 1e-12:
            q = int(round(steps)) % 4
            # R_z(a) y lands on a grid point: the rotated field is a permutation
            moved = np.rot90(C, k=-q, axes=(0, 1)) if q else C
            inside = np.ones(C.shape[:3], dtype=bool)
        else:
            idx = _index_coords(field, pos @ R.T)
            inside = _inside(field, idx)
            moved = np.empty_like(C)
            for k in range(K):
                moved[..., k] = _interp(C[..., k], idx, order)
        # coefficients of n -> f(R n) are those of f rotated by R^T
        rot = wigner_rotate(moved.reshape(-1, K), R.T).reshape(C.shape)
        num = float(np.sum(np.abs(rot - C)[inside] ** 2))
        per[a] = math.sqrt(num / float(np.sum(np.abs(C[inside]) ** 2)))
    inv = float("nan")
    if inversion:
        samp = orientations if orientations is not None else icosahedral_sampling(2)
        dirs = samp.directions
        Y = sh_matrix(lmax, dirs)
        num = den = 0.0
        for i, n in enumerate(dirs):
            beta = math.acos(max(-1.0, min(1.0, n[2])))
            gamma = math.atan2(n[1], n[0])
            Rn = rotation_from_euler(gamma, beta, 0.0)
            v = Rn.T @ np.array([0.0, 0.0, 1.0])
            base = (C @ Y[i]).real
            yv = sh_matrix(lmax, v[None])[0]
            other_vol = (C @ yv).real
            idx = _index_coords(field, -(pos @ Rn))
            inside = _inside(field, idx)
            other = _interp(other_vol, idx, order)
            num += float(np.sum((other - base)[inside] ** 2))
            den += float(np.sum(base[inside] ** 2))
        inv = math.sqrt(num / den)
    return SymmetryReport(max(per.values()) if per else 0.0, inv, tuple(alphas), per)
