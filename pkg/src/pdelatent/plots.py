"""Optional figures (needs the ``plots`` extra). CSV results stay the source of truth."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import radial_psd


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise ImportError("plotting needs matplotlib; install with `pip install -e .[plots]`") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_radial_psd(truth, estimates: dict, path):
    """Log-scale radial PSD of the truth and each named estimate, averaged over instances."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    curves = {"truth": truth, **estimates}
    for name, fields_ in curves.items():
        psds = [radial_psd(f) for f in np.asarray(fields_)]
        ax.semilogy(psds[0].k, np.mean([p.power for p in psds], axis=0), label=name,
                    lw=2 if name == "truth" else 1)
    ax.set_xlabel("wavenumber k")
    ax.set_ylabel("radial PSD")
    ax.legend(frameon=False)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_maps(truth, estimates: dict, path, index: int = 0):
    """Truth and absolute-error heatmaps for one instance."""
    plt = _pyplot()
    n = len(estimates) + 1
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.6))
    t = np.asarray(truth)[index]
    axes[0].imshow(t, cmap="RdBu_r")
    axes[0].set_title("truth")
    vmax = max(np.abs(np.asarray(f)[index] - t).max() for f in estimates.values())
    for ax, (name, f) in zip(axes[1:], estimates.items()):
        im = ax.imshow(np.abs(np.asarray(f)[index] - t), cmap="magma", vmin=0, vmax=vmax)
        ax.set_title(name)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[1:].tolist(), shrink=0.8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
