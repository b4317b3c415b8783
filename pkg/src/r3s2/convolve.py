"""Shift-twist convolution of orientation fields with kernels.

out(y, n) = sum over (y', n') of K(R_n'^T (y - y'), R_n'^T n) U(y', n') w(n') dx^3

with R_n' = R_z(gamma') R_y(beta') mapping e_z to n'. For every input
orientation the kernel is rotated once; the spatial sum is a linear
convolution done by zero-padded FFTs and accumulated in Fourier space.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import fft as sfft
from scipy import ndimage
from scipy.spatial import cKDTree

from .fields import (R3S2Field, load_field, save_field, read_header, FieldFormatError,
                     TruncatedFileError, UnsupportedVersionError)
from .sh_core import (forward_transform, sh_matrix, wigner_rotate, rotation_from_euler,
                      sh_count)

__all__ = [
    "ConvolutionPlan",
    "SamplingMismatchError",
    "shift_twist_convolve",
    "section",
    "load_field",
    "save_field",
    "read_header",
    "header_text",
    "FieldFormatError",
    "TruncatedFileError",
    "UnsupportedVersionError",
]


class SamplingMismatchError(ValueError):
    pass


def section(n):
    """R_z(gamma) R_y(beta) for n with polar angle beta and azimuth gamma."""
    n = np.asarray(n, dtype=float)
    beta = math.acos(max(-1.0, min(1.0, n[2])))
    gamma = math.atan2(n[1], n[0]) if math.hypot(n[0], n[1]) > 1e-12 else 0.0
    return rotation_from_euler(gamma, beta, 0.0)


def _rotated_index_coords(shape, R):
    """Kernel index coordinates of R^T z for every kernel grid point z."""
    c = np.array([s // 2 for s in shape], dtype=float)
    idx = np.stack(np.meshgrid(*[np.arange(s) - s // 2 for s in shape], indexing="ij"), axis=-1)
    # positions in voxel units; the voxel size cancels
    coords = idx.astype(float) @ R + c
    # snap rounding noise so exact lattice rotations keep their boundary voxels
    near = np.rint(coords)
    return np.where(np.abs(coords - near) < 1e-9, near, coords)


def _interp_channels(vol, coords, order):
    """Resample each channel of vol (..., C) at fractional coordinates."""
    pts = np.moveaxis(coords, -1, 0)
    out = np.empty(coords.shape[:-1] + (vol.shape[3],), dtype=vol.dtype)
    kw = dict(order=order, mode="constant", cval=0.0, prefilter=False)
    for c in range(vol.shape[3]):
        v = vol[..., c]
        if np.iscomplexobj(v):
            out[..., c] = (ndimage.map_coordinates(v.real, pts, **kw)
                           + 1j * ndimage.map_coordinates(v.imag, pts, **kw))
        else:
            out[..., c] = ndimage.map_coordinates(v, pts, **kw)
    return out


@dataclass
class ConvolutionPlan:
    """Rotated kernels for one kernel, input grid and orientation sampling.

    ``interpolation="linear"`` rotates the spatial part trilinearly and the
    orientation part exactly through Wigner matrices on the kernel's SH
    expansion up to ``lmax``. ``interpolation="nearest"`` uses the nearest
    voxel and the nearest orientation sample, rescaling by the ratio of
    orientation cell areas so that mass moves cell to cell.
    ``cache="precompute"`` keeps every rotated kernel spectrum, ``"none"``
    recomputes them per call.
    """

    kernel: R3S2Field
    input_dims: tuple
    sampling: object
    interpolation: str = "linear"
    lmax: int = None
    cache: str = "none"

    def __post_init__(self):
        k = self.kernel
        if k.domain != "spatial":
            raise ValueError("kernel must be a spatial-domain field")
        if self.interpolation not in ("linear", "nearest"):
            raise ValueError("interpolation must be 'linear' or 'nearest'")
        if k.storage == "samples" and not k.sampling.same_as(self.sampling):
            raise SamplingMismatchError("kernel and input use different orientation samplings")
        if any(kd > idim for kd, idim in zip(k.dims, self.input_dims)):
            raise ValueError("kernel support exceeds the input grid")
        if any(d % 2 == 0 for d in k.dims):
            raise ValueError("kernel grids must have odd sizes")
        if self.interpolation == "linear":
            if k.storage == "sh":
                self.lmax = k.lmax if self.lmax is None else self.lmax
                if self.lmax != k.lmax:
                    raise ValueError("lmax must match the kernel's SH storage")
                self._coeffs = k.values
            else:
                self.lmax = 8 if self.lmax is None else self.lmax
                self._coeffs = forward_transform(k.values, self.sampling, self.lmax)
            self._Y = sh_matrix(self.lmax, self.sampling.directions)
        else:
            self._samples = k.to_samples(self.sampling).values
            self._tree = cKDTree(self.sampling.directions)
        half = [kd // 2 for kd in k.dims]
        self.pad = tuple(sfft.next_fast_len(n + h) for n, h in zip(self.input_dims, half))
        self._spectra = {}

    @property
    def channels(self):
        return sh_count(self.lmax) if self.interpolation == "linear" else len(self.sampling)

    def rotated_kernel(self, j):
        """Kernel K(R_j^T z, R_j^T n) on the kernel grid, per output channel."""
        R = section(self.sampling.directions[j])
        k = self.kernel
        coords = _rotated_index_coords(k.dims, R)
        if self.interpolation == "linear":
            moved = _interp_channels(self._coeffs, coords, 1)
            shp = moved.shape
            return wigner_rotate(moved.reshape(-1, shp[3]), R).reshape(shp)
        idx = np.rint(coords).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(k.dims)), axis=-1)
        idx = np.where(inside[..., None], idx, 0)
        dirs = self.sampling.directions
        _, src = self._tree.query(dirs @ R)  # nearest sample to R^T n_i
        w = self.sampling.weights
        vals = self._samples[idx[..., 0], idx[..., 1], idx[..., 2]][..., src] * (w[src] / w)
        return np.where(inside[..., None], vals, 0.0)

    def _spectrum(self, j):
        if j in self._spectra:
            return self._spectra[j]
        Kj = self.rotated_kernel(j)
        P = self.pad
        buf = np.zeros(P + (Kj.shape[3],), dtype=Kj.dtype)
        h = [d // 2 for d in Kj.shape[:3]]
        # kernel center at index 0, negative offsets wrapped to the end
        ix = [np.arange(-hh, hh + 1) % p for hh, p in zip(h, P)]
        buf[np.ix_(*ix)] = Kj
        if self.interpolation == "linear":
            spec = sfft.fftn(buf, axes=(0, 1, 2))
        else:
            spec = sfft.rfftn(buf, axes=(0, 1, 2))
        if self.cache == "precompute":
            self._spectra[j] = spec
        return spec

    def execute(self, inp, output="samples"):
        if inp.storage != "samples":
            raise ValueError("input must use orientation-sample storage")
        if not inp.sampling.same_as(self.sampling):
            raise SamplingMismatchError("input sampling differs from the plan's sampling")
        if tuple(inp.dims) != tuple(self.input_dims):
            raise ValueError("input grid differs from the plan's grid")
        if not math.isclose(inp.voxel_size, self.kernel.voxel_size, rel_tol=1e-9):
            raise ValueError("kernel and input voxel sizes differ")
        U = inp.values
        P = self.pad
        n = inp.dims
        dv = inp.voxel_size ** 3
        w = self.sampling.weights
        acc = None
        for j in range(U.shape[3]):
            Uj = U[..., j]
            if not np.any(Uj):
                continue
            ubuf = np.zeros(P)
            ubuf[:n[0], :n[1], :n[2]] = Uj
            spec = self._spectrum(j)
            uspec = sfft.fftn(ubuf) if self.interpolation == "linear" else sfft.rfftn(ubuf)
            term = spec * (uspec * (w[j] * dv))[..., None]
            acc = term if acc is None else acc + term
        if acc is None:
            vals = np.zeros(tuple(n) + (self.channels,))
        elif self.interpolation == "linear":
            vals = sfft.ifftn(acc, axes=(0, 1, 2))[:n[0], :n[1], :n[2]]
        else:
            vals = sfft.irfftn(acc, s=P, axes=(0, 1, 2))[:n[0], :n[1], :n[2]]
        if self.interpolation == "linear":
            if output == "sh":
                return R3S2Field(vals, inp.voxel_size, lmax=self.lmax, meta=dict(inp.meta))
            samples = (vals.reshape(-1, vals.shape[3]) @ self._Y.T).real.reshape(tuple(n) + (-1,))
            return R3S2Field(samples, inp.voxel_size, sampling=self.sampling, meta=dict(inp.meta))
        if output == "sh":
            raise ValueError("SH output requires linear interpolation")
        return R3S2Field(np.ascontiguousarray(vals), inp.voxel_size, sampling=self.sampling,
                         meta=dict(inp.meta))


def shift_twist_convolve(kernel, inp, interpolation="linear", lmax=None, output="samples"):
    """Convolve an orientation field with a kernel on positions and orientations.

    Parameters
    ----------
    kernel : R3S2Field
        Spatial kernel, odd grid sizes, centered; SH or sample storage.
    inp : R3S2Field
        Input with orientation-sample storage and the kernel's voxel size.
    interpolation : {"linear", "nearest"}
    lmax : int, optional
        Degree of the kernel's SH expansion for ``"linear"``.
    output : {"samples", "sh"}

    Returns
    -------
    R3S2Field on the input grid and sampling.
    """
    if inp.storage != "samples":
        raise ValueError("input must use orientation-sample storage")
    plan = ConvolutionPlan(kernel, tuple(inp.dims), inp.sampling, interpolation, lmax)
    return plan.execute(inp, output)


def header_text(path):
    """Readable header summary of a ``.r3s2`` file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    hdr, off = read_header(buf)
    lines = [f"version      {hdr['version']}",
             f"dims         {hdr['dims'][0]} x {hdr['dims'][1]} x {hdr['dims'][2]}",
             f"voxel_size   {hdr['voxel_size']!r}",
             f"n_orient     {hdr['n_orient']}",
             f"storage      {'sh' if hdr['storage'] == 1 else 'samples'}",
             f"payload at   {off}",
             f"file size    {len(buf)}"]
    if "lmax" in hdr:
        lines.insert(5, f"lmax         {hdr['lmax']}")
    return "\n".join(lines)
