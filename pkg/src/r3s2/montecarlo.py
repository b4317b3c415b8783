"""Random walks whose endpoint distributions approximate the kernels.

Each walk starts at (0, e_z). A step moves the position along the current
orientation N_k (a Gaussian step for diffusion, a fixed forward step for
the direction process) and then tilts the orientation by an angle
beta * sqrt(4 t D44 / N) in the direction gamma of the tangent plane at N_k.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
import json
import math
import os

import numpy as np
from scipy.spatial import cKDTree

from .fields import R3S2Field, atomic_write
from .sh_core import icosahedral_sampling, sh_matrix

__all__ = [
    "WalkConfig",
    "RandomWalkBatch",
    "SpatialBins",
    "HistogramField",
    "simulate",
    "simulate_resolvent",
    "bin",
    "bin_endpoints",
    "save_batch",
    "load_batch",
    "kernel_bin_probabilities",
    "total_variation",
    "BLOCK",
]

BLOCK = 1 << 15  # walks per RNG stream; fixed so results do not depend on threading


@dataclass(frozen=True)
class WalkConfig:
    """Parameters of a batch of random walks.

    ``t`` is the travel time; with ``alpha`` set the travel time of each
    walk is drawn from Gamma(gamma_k, rate alpha) instead.
    ``printed_step`` switches the direction process to the forward step
    sqrt(t / N) in place of t / N. ``printed_tilt`` uses the tilt scale
    sqrt(2 t D44 / N); the default sqrt(4 t D44 / N) gives each tangent axis
    the variance 2 D44 t / N required by the generator D44 times the
    Laplace-Beltrami operator, since a tilt along a uniform direction splits
    its variance over two axes.
    """

    process: str = "diffusion"
    M: int = 10000
    N: int = 200
    t: float = 1.0
    D33: float = 1.0
    D44: float = 0.1
    seed: int = 0
    alpha: float = None
    gamma_k: int = 1
    printed_step: bool = False
    printed_tilt: bool = False

    def __post_init__(self):
        if self.process not in ("diffusion", "completion"):
            raise ValueError(f"unknown process {self.process!r}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError("M must be an integer >= 1")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be an integer >= 1")
        if self.D33 < 0 or self.D44 < 0:
            raise ValueError("diffusivities must be non-negative")
        if self.alpha is None and not self.t >= 0:
            raise ValueError("t must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if int(self.gamma_k) != self.gamma_k or self.gamma_k < 1:
            raise ValueError("gamma_k must be an integer >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    def as_dict(self):
        return asdict(self)


@dataclass
class RandomWalkBatch:
    """Endpoints of simulated walks: positions y (M, 3), orientations n (M, 3)."""

    y: np.ndarray
    n: np.ndarray
    config: WalkConfig
    times: np.ndarray = None

    @property
    def endpoints(self):
        return np.concatenate([self.y, self.n], axis=1)

    def __len__(self):
        return self.y.shape[0]


def _tangent_frame(n):
    """Columns e1, e2 completing n to a right-handed frame (R_n e_x, R_n e_y)."""
    theta = np.arccos(np.clip(n[:, 2], -1.0, 1.0))
    phi = np.arctan2(n[:, 1], n[:, 0])
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    e1 = np.stack([ct * cp, ct * sp, -st], axis=1)
    e2 = np.stack([-sp, cp, np.zeros_like(sp)], axis=1)
    return e1, e2


def _block_rng(seed, block):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def _run_block(cfg, block, size, random_time):
    rng = _block_rng(cfg.seed, block)
    if random_time:
        T = rng.gamma(cfg.gamma_k, 1.0 / cfg.alpha, size=size)
    else:
        T = np.full(size, float(cfg.t))
    y = np.zeros((size, 3))
    n = np.zeros((size, 3))
    n[:, 2] = 1.0
    N = cfg.N
    tilt = np.sqrt((2.0 if cfg.printed_tilt else 4.0) * T * cfg.D44 / N)
    if cfg.process == "diffusion":
        step = np.sqrt(2.0 * T * cfg.D33 / N)
    elif cfg.printed_step:
        step = np.sqrt(T / N)
    else:
        step = T / N
    for _ in range(N):
        if cfg.process == "diffusion":
            eps = rng.standard_normal(size)
            y += (eps * step)[:, None] * n
        else:
            y += step[:, None] * n
        gamma = rng.uniform(0.0, math.pi, size)
        a = rng.standard_normal(size) * tilt
        e1, e2 = _tangent_frame(n)
        sa = np.sin(a)
        n = (np.cos(a)[:, None] * n
             + (sa * np.cos(gamma))[:, None] * e1
             + (sa * np.sin(gamma))[:, None] * e2)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
    return y, n, T


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("KERNELS_THREADS", "1") or 1)
    return max(1, int(threads))


def _simulate(cfg, random_time, threads):
    M = int(cfg.M)
    blocks = [(b, min(BLOCK, M - b * BLOCK)) for b in range((M + BLOCK - 1) // BLOCK)]
    work = lambda bs: _run_block(cfg, bs[0], bs[1], random_time)
    nt = _threads(threads)
    if nt > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(nt) as ex:
            parts = list(ex.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    y = np.concatenate([p[0] for p in parts])
    n = np.concatenate([p[1] for p in parts])
    T = np.concatenate([p[2] for p in parts])
    return RandomWalkBatch(y, n, cfg, T)


def simulate(cfg, threads=None):
    """Walks with fixed travel time ``cfg.t``.

    Output depends only on the configuration: walks are grouped into blocks
    of ``BLOCK`` with independent Philox streams keyed by (seed, block).
    """
    if cfg.alpha is not None:
        raise ValueError("use simulate_resolvent for random travel times")
    return _simulate(cfg, False, threads)


def simulate_resolvent(cfg, threads=None):
    """Walks with travel time T ~ Gamma(gamma_k, rate alpha) drawn per walk."""
    if cfg.alpha is None:
        raise ValueError("simulate_resolvent requires alpha")
    return _simulate(cfg, True, threads)


# ---------------------------------------------------------------- binning

@dataclass(frozen=True)
class SpatialBins:
    """Cubic bins of side ``pitch`` centered on the origin, ``n`` per axis."""

    n: int
    pitch: float

    def index(self, y):
        half = self.n // 2
        idx = np.floor(y / self.pitch + 0.5).astype(np.int64) + half
        inside = np.all((idx >= 0) & (idx < self.n), axis=1)
        return idx, inside


@dataclass
class HistogramField:
    counts: np.ndarray
    density: np.ndarray
    bins: SpatialBins
    sampling: object
    n_total: int
    n_outside: int

    def to_field(self):
        return R3S2Field(self.density, self.bins.pitch, sampling=self.sampling,
                         meta={"n_total": self.n_total, "n_outside": self.n_outside})

    def probabilities(self):
        return self.counts / max(1, self.counts.sum())

    def mass(self):
        return float(np.tensordot(self.density.sum(axis=(0, 1, 2)), self.sampling.weights, 1)
                     * self.bins.pitch ** 3)


def bin_endpoints(y, n, spatial, sampling):
    """Integer counts per (spatial bin, orientation cell) and the outside count."""
    idx, inside = spatial.index(np.asarray(y))
    tree = cKDTree(sampling.directions)
    _, cell = tree.query(np.asarray(n)[inside])
    i = idx[inside]
    s = spatial.n
    flat = ((i[:, 0] * s + i[:, 1]) * s + i[:, 2]) * len(sampling) + cell
    counts = np.bincount(flat, minlength=s ** 3 * len(sampling))
    return counts.reshape(s, s, s, len(sampling)), int((~inside).sum())


def bin(batch, spatial_spec, sphere_refinement=3):
    """Density estimate from walk endpoints.

    Orientation cells are the Voronoi cells of the refined icosahedron, so
    each count is divided by its cell's solid angle. The density integrates
    to one over the binned region; walks outside are counted in
    ``n_outside``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    sampling = icosahedral_sampling(sphere_refinement)
    counts, outside = bin_endpoints(batch.y, batch.n, spatial_spec, sampling)
    total_in = counts.sum()
    vol = spatial_spec.pitch ** 3
    density = counts / (max(total_in, 1) * vol * sampling.weights)
    return HistogramField(counts, density, spatial_spec, sampling, len(batch), outside)


def kernel_bin_probabilities(freq_kernel, block, sphere_refinement=3, fine_refinement=5):
    """Kernel mass in the bins used by ``bin``.

    Spatial bins are cubes of ``block`` voxels per axis. Their integrals
    come from the trigonometric interpolant of the frequency samples: a box
    filter (product of sincs) applied before the inverse DFT, then sampled
    at block centers. Orientation cells are integrated by summing a finer
    icosahedral sampling over its nearest coarse vertices.

    Returns
    -------
    probs : ndarray, shape (nb, nb, nb, n_cells)
    bins : SpatialBins
    """
    from . import kernel_synthesis as ks

    grid = freq_kernel.grid
    size = grid.size
    if size % block or block % 2 == 0:
        raise ValueError("block must be odd and divide the grid size")
    h = grid.voxel_size
    w = block * h
    ax = grid.axis
    box = np.sinc(ax * w / (2 * math.pi))
    vals = freq_kernel.values * (box[:, None, None, None] * box[None, :, None, None]
                                 * box[None, None, :, None])
    F = R3S2Field(vals, h, lmax=freq_kernel.lmax, domain="frequency", grid=grid)
    avg = ks.inverse_spatial_fft(F, copy=False).values
    centers = np.arange(block // 2, size, block)
    coarse = avg[np.ix_(centers, centers, centers)] * w ** 3  # SH coefficients of bin masses
    cs = icosahedral_sampling(sphere_refinement)
    fs = icosahedral_sampling(fine_refinement)
    _, cell = cKDTree(cs.directions).query(fs.directions)
    Y = sh_matrix(freq_kernel.lmax, fs.directions)
    nb = coarse.shape[0]
    vals = (coarse.reshape(-1, coarse.shape[3]) @ Y.T).real * fs.weights
    probs = np.zeros((vals.shape[0], len(cs)))
    np.add.at(probs.T, cell, vals.T)
    return probs.reshape(nb, nb, nb, len(cs)), SpatialBins(nb, w)


def total_variation(p, q):
    """Half the l1 distance between two bin probability arrays."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------- dumps

def save_batch(batch, path):
    """Endpoints as little-endian f64 records (y, n) plus a JSON sidecar."""
    data = np.ascontiguousarray(batch.endpoints, dtype="<f8").tobytes()
    atomic_write(path, data)
    side = {"format": "f64x6 (y1, y2, y3, n1, n2, n3) per endpoint, little-endian",
            "count": len(batch), "config": batch.config.as_dict(), "block": BLOCK}
    atomic_write(str(path) + ".json", json.dumps(side, indent=2, sort_keys=True).encode())


def load_batch(path):
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != 6 * side["count"]:
        raise ValueError(f"expected {side['count']} records, found {raw.size / 6:g}")
    e = raw.reshape(-1, 6)
    return RandomWalkBatch(e[:, :3].copy(), e[:, 3:].copy(), WalkConfig(**side["config"]))
