"""Field container on a cubic grid times orientations, and its file format.

File layout (little-endian)::

    offset  size  content
    0       4     magic b"R3S2"
    4       4     u32 version (1)
    8       12    u32 nx, ny, nz
    20      8     f64 voxel size
    28      4     u32 n_orient
    32      1     u8 storage (0 = orientation samples, 1 = SH coefficients)
    33      4     u32 lmax                     (storage 1 only)
    33      24*n  f64 orientation table (x,y,z) (storage 0 only)
    ...           payload: f64 values (storage 0) or interleaved f64 re/im
                  (storage 1), x fastest, then y, z, orientation

Orientation weights are not stored; they are recomputed from the directions
as Voronoi solid angles on load.
"""

from dataclasses import dataclass, field
import math
import os
import struct
import tempfile

import numpy as np

from .sh_core import (OrientationSampling, forward_transform, inverse_transform,
                      icosahedral_sampling, sh_count)

__all__ = [
    "R3S2Field",
    "FieldFormatError",
    "TruncatedFileError",
    "UnsupportedVersionError",
    "save_field",
    "load_field",
    "read_header",
    "atomic_write",
]

MAGIC = b"R3S2"
VERSION = 1
_HEAD = struct.Struct("<4sIIIIdIB")


class FieldFormatError(ValueError):
    pass


class TruncatedFileError(FieldFormatError):
    pass


class UnsupportedVersionError(FieldFormatError):
    pass


@dataclass
class R3S2Field:
    """Scalar field on an (nx, ny, nz) grid times an orientation axis.

    ``values`` has shape (nx, ny, nz, n_orient). With ``sampling`` set the
    last axis indexes orientation samples; with ``lmax`` set it indexes
    spherical harmonic coefficients (flat l, m index).
    """

    values: np.ndarray
    voxel_size: float = 1.0
    sampling: OrientationSampling = None
    lmax: int = None
    domain: str = "spatial"
    grid: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ValueError("field values must be 4-dimensional")
        if (self.sampling is None) == (self.lmax is None):
            raise ValueError("exactly one of sampling or lmax must be given")
        n = self.values.shape[3]
        if self.sampling is not None and n != len(self.sampling):
            raise ValueError("orientation axis does not match the sampling")
        if self.lmax is not None and n != sh_count(self.lmax):
            raise ValueError("coefficient axis does not match lmax")
        if self.domain not in ("spatial", "frequency"):
            raise ValueError("domain must be spatial or frequency")

    @property
    def storage(self):
        return "samples" if self.sampling is not None else "sh"

    @property
    def dims(self):
        return self.values.shape[:3]

    @property
    def center(self):
        return tuple(d // 2 for d in self.dims)

    def axis(self, k):
        n = self.dims[k]
        return (np.arange(n) - n // 2) * self.voxel_size

    def positions(self):
        ax = [self.axis(k) for k in range(3)]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def to_samples(self, sampling=None, chunk=32768):
        """Synthesize SH storage at orientation samples (real part)."""
        if self.storage == "samples":
            return self
        if self.domain != "spatial":
            raise ValueError("sampling a frequency-domain field is not supported")
        sampling = sampling or icosahedral_sampling()
        flat = self.values.reshape(-1, self.values.shape[3])
        out = np.empty((flat.shape[0], len(sampling)))
        for s in range(0, flat.shape[0], chunk):
            out[s:s + chunk] = inverse_transform(flat[s:s + chunk], sampling, real=True)
        return R3S2Field(out.reshape(self.dims + (len(sampling),)), self.voxel_size,
                         sampling=sampling, domain=self.domain, grid=self.grid,
                         meta=dict(self.meta))

    def to_sh(self, lmax):
        if self.storage == "sh":
            if lmax != self.lmax:
                raise ValueError("changing lmax of SH storage is not supported")
            return self
        c = forward_transform(self.values, self.sampling, lmax)
        return R3S2Field(c, self.voxel_size, lmax=lmax, domain=self.domain,
                         grid=self.grid, meta=dict(self.meta))

    def total_mass(self):
        """Integral over space and orientations (spatial domain)."""
        v3 = self.voxel_size ** 3
        if self.storage == "samples":
            return float(np.tensordot(self.values.sum(axis=(0, 1, 2)), self.sampling.weights, 1) * v3)
        # only the l = 0 coefficient integrates to a nonzero value
        return float(self.values[..., 0].real.sum() * math.sqrt(4 * math.pi) * v3)


def read_header(buf):
    """Parse the header, returning a dict and the payload offset."""
    size = len(buf)
    if size < 4:
        raise TruncatedFileError(f"truncated header: magic needs 4 bytes at offset 0, "
                                 f"file has {size}")
    if bytes(buf[:4]) != MAGIC:
        raise FieldFormatError(f"bad magic {bytes(buf[:4])!r} at offset 0")
    if size < 8:
        raise TruncatedFileError(f"truncated header: version needs 4 bytes at offset 4, "
                                 f"{size - 4} available")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} at offset 4 "
                                      f"(supported: {VERSION})")
    if size < _HEAD.size:
        raise TruncatedFileError(f"truncated header: needs {_HEAD.size} bytes, "
                                 f"file has {size} (missing {_HEAD.size - size} bytes "
                                 f"from offset {size})")
    _, _, nx, ny, nz, vox, n_orient, storage = _HEAD.unpack_from(buf, 0)
    off = _HEAD.size
    hdr = dict(version=version, dims=(nx, ny, nz), voxel_size=vox,
               n_orient=n_orient, storage=storage)
    if storage == 1:
        if size < off + 4:
            raise TruncatedFileError(f"truncated header: lmax needs 4 bytes at offset {off}, "
                                     f"{size - off} available")
        lmax = struct.unpack_from("<I", buf, off)[0]
        off += 4
        if sh_count(lmax) != n_orient:
            raise FieldFormatError(f"lmax {lmax} inconsistent with {n_orient} coefficients "
                                   f"(offset {off - 4})")
        hdr["lmax"] = lmax
    elif storage == 0:
        need = 24 * n_orient
        if size < off + need:
            raise TruncatedFileError(f"truncated orientation table: needs {need} bytes at "
                                     f"offset {off}, {size - off} available "
                                     f"(missing {off + need - size} bytes)")
        hdr["directions"] = np.frombuffer(buf, dtype="<f8", count=3 * n_orient,
                                          offset=off).reshape(n_orient, 3).copy()
        off += need
    else:
        raise FieldFormatError(f"unknown storage code {storage} at offset 32")
    return hdr, off


def atomic_write(path, data):
    """Write bytes to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            if isinstance(data, (bytes, bytearray, memoryview)):
                fh.write(data)
            else:
                for part in data:
                    fh.write(part)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _payload_parts(f):
    vals = f.values
    if f.storage == "samples":
        if np.iscomplexobj(vals):
            raise FieldFormatError("sample storage holds real values only")
        arr = vals.astype("<f8", copy=False)
    else:
        arr = vals.astype("<c16", copy=False)
    # x fastest: Fortran order over (x, y, z, orientation)
    for o in range(arr.shape[3]):
        yield np.asfortranarray(arr[..., o]).tobytes(order="F")


def save_field(f, path):
    if f.domain != "spatial":
        raise FieldFormatError("only spatial-domain fields can be saved")
    nx, ny, nz, n = f.values.shape
    storage = 0 if f.storage == "samples" else 1
    head = _HEAD.pack(MAGIC, VERSION, nx, ny, nz, float(f.voxel_size), n, storage)
    if storage == 1:
        head += struct.pack("<I", f.lmax)
    else:
        head += f.sampling.directions.astype("<f8").tobytes()
    atomic_write(path, [head, *_payload_parts(f)])


def load_field(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    hdr, off = read_header(buf)
    nx, ny, nz = hdr["dims"]
    n = hdr["n_orient"]
    if hdr["storage"] == 0:
        itemsize, dtype = 8, "<f8"
    else:
        itemsize, dtype = 16, "<c16"
    count = nx * ny * nz * n
    need = count * itemsize
    if len(buf) < off + need:
        raise TruncatedFileError(f"truncated payload: needs {need} bytes at offset {off}, "
                                 f"{len(buf) - off} available (missing {off + need - len(buf)} bytes)")
    if len(buf) > off + need:
        raise FieldFormatError(f"{len(buf) - off - need} trailing bytes after payload "
                               f"at offset {off + need}")
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    vals = flat.reshape((nx, ny, nz, n), order="F").astype(dtype[1:], copy=True)
    if hdr["storage"] == 0:
        dirs = hdr["directions"]
        ref = icosahedral_sampling()
        if dirs.shape == ref.directions.shape and np.array_equal(dirs, ref.directions):
            sampling = ref
        else:
            sampling = OrientationSampling.from_directions(dirs)
        return R3S2Field(vals, hdr["voxel_size"], sampling=sampling)
    return R3S2Field(vals, hdr["voxel_size"], lmax=hdr["lmax"])
