"""Matplotlib figures for command-line reports (written to files only)."""

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["eigencurve_figure", "kernel_projection_figure", "histogram_comparison_figure",
           "save_figure"]


def save_figure(fig, path):
    """Render to PNG bytes and write atomically."""
    from .fields import atomic_write

    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def eigencurve_figure(m, rhos, values, branch_points=(), swe=None):
    """Real and imaginary parts of the eigenvalue curves against rho."""
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(10, 4))
    for k in range(values.shape[1]):
        a0.plot(rhos, values[:, k].real, lw=1.0, color="C0")
        a1.plot(rhos, values[:, k].imag, lw=1.0, color="C0")
    if swe is not None:
        for k in range(swe.shape[1]):
            a0.plot(rhos, swe[:, k].real, lw=0.8, ls="--", color="C1")
    for p in branch_points:
        for a in (a0, a1):
            a.axvline(p, color="C3", lw=0.6, ls=":")
    a0.set_xlabel("rho")
    a0.set_ylabel("Re eigenvalue")
    a1.set_xlabel("rho")
    a1.set_ylabel("Im eigenvalue")
    a0.set_title(f"m = {m}")
    top = np.nanmax(values[:, : min(6, values.shape[1])].real)
    a0.set_ylim(bottom=min(0.0, np.nanmin(values.real)), top=1.1 * top + 1)
    fig.tight_layout()
    return fig


def kernel_projection_figure(field, title=""):
    """Orientation-integrated kernel projected onto the xz, yz and xy planes."""
    if field.storage == "samples":
        dens = np.tensordot(field.values, field.sampling.weights, axes=([3], [0]))
    else:
        dens = field.values[..., 0].real * np.sqrt(4 * np.pi)
    ext = field.axis(0)[[0, -1]]
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    panels = [(dens.sum(axis=1), "x", "z"), (dens.sum(axis=0), "y", "z"), (dens.sum(axis=2), "x", "y")]
    for a, (img, h, v) in zip(axes, panels):
        a.imshow(img.T, origin="lower", extent=[ext[0], ext[1], ext[0], ext[1]], cmap="viridis")
        a.set_xlabel(h)
        a.set_ylabel(v)
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def histogram_comparison_figure(hist_z, kernel_z, centers):
    """Marginal density along z of a histogram and a reference kernel."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(centers, hist_z, where="mid", label="random walks")
    if kernel_z is not None:
        ax.plot(centers, kernel_z, "o-", ms=3, label="spectral kernel")
    ax.set_xlabel("z")
    ax.set_ylabel("probability per bin")
    ax.legend()
    fig.tight_layout()
    return fig
