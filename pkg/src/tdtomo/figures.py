"""Figure rendering: measurement traces, sinograms, and recovered images.

Everything draws through the non-interactive Agg backend and writes PNG
files next to the delimited outputs; nothing here ever opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def trace_figure(ms, path, det_indices=None, src_pos: int = 0) -> Path:
    """Per-order time traces for a few detectors of one source."""
    if det_indices is None:
        si = int(np.asarray(ms.src_indices)[src_pos])
        nd = len(ms.det_points)
        det_indices = sorted({(si + nd // 4) % nd, (si + nd // 2) % nd,
                              (si + (3 * nd) // 4) % nd})
    fig, axes = plt.subplots(1, len(det_indices), figsize=(4 * len(det_indices), 3.2),
                             sharey=True, squeeze=False)
    for ax, d in zip(axes[0], det_indices):
        for order in ms.orders_present():
            ts, vals, errs = ms.trace(d, src_pos, order=order)
            if ts.size == 0:
                continue
            if ms.method == "mc":
                ax.errorbar(ts, vals, yerr=errs, lw=0.8, elinewidth=0.4,
                            label=f"order {order}")
            else:
                ax.plot(ts, vals, lw=1.0, label=f"order {order}")
        t0 = ms.ballistic_t0[d, src_pos]
        if t0 > 0:
            ax.axvline(t0, color="k", lw=0.6, ls=":")
        ax.set_xlabel("t")
        ax.set_title(f"detector {d}", fontsize=9)
        ax.set_yscale("symlog", linthresh=1e-6)
    axes[0][0].set_ylabel("boundary signal")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def image_figure(image, path, title: str = "", truth=None) -> Path:
    """Recovered image (optionally side by side with the ground truth)."""
    panels = 2 if truth is not None else 1
    fig, axes = plt.subplots(1, panels, figsize=(4.4 * panels, 4.0), squeeze=False)
    vals = image.values
    vmax = float(np.nanmax(np.abs(vals))) or 1.0
    for ax, (data, label) in zip(
            axes[0],
            [(vals, title)] + ([(truth, "truth")] if truth is not None else [])):
        im = ax.imshow(data.T, origin="lower", extent=(-1, 1, -1, 1),
                       vmin=-vmax, vmax=vmax, cmap="RdBu_r")
        ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, color="k", lw=0.7))
        ax.set_title(label, fontsize=10)
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def sinogram_figure(sino, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    im = ax.imshow(sino.values, aspect="auto", origin="lower",
                   extent=(sino.qs[0], sino.qs[-1],
                           float(sino.angles[0]), float(sino.angles[-1])),
                   cmap="viridis")
    ax.set_xlabel("offset q")
    ax.set_ylabel("angle")
    ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, shrink=0.9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def reconstruction_figures(result, out_dir, truth_sigma=None, truth_k0=None) -> list:
    """Render the standard report panel set; returns the written paths."""
    out_dir = Path(out_dir)
    xs = result.sigma.centers()
    X, Y = np.meshgrid(xs, xs, indexing="ij")

    def sampled(field):
        if field is None:
            return None
        vals = np.asarray(field(np.stack([X, Y], axis=-1)))
        vals[X * X + Y * Y > 1.0] = 0.0
        return vals

    paths = [
        image_figure(result.sigma, out_dir / "image_sigma.png",
                     "recovered absorption", truth=sampled(truth_sigma)),
        image_figure(result.k0, out_dir / "image_k0.png",
                     "recovered scattering factor", truth=sampled(truth_k0)),
        sinogram_figure(result.sigma_sinogram, out_dir / "sinogram_sigma.png",
                        "absorption line transform"),
        sinogram_figure(result.k0_sinogram, out_dir / "sinogram_k0.png",
                        "weighted scattering line transform"),
    ]
    return paths
