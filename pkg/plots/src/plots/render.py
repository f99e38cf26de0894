"""Figure renderers, one per kind, deterministic by construction.

Determinism notes: the Agg backend is forced before pyplot loads, series
and panels are iterated in sorted order, and savefig writes a fixed
Software tag so the png carries no library version string.  Re-rendering
the same inputs must produce byte-identical files.
"""
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .figspec import (
    FigureSpec,
    PlotInputError,
    density_panels,
    load_critical_points,
    load_report,
    read_table,
    report_series,
)

DPI = 130
_SAVE_META = {"Software": "plots"}


def _finish(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=DPI, metadata=_SAVE_META)
    plt.close(fig)
    return out


def _bands_input(spec: FigureSpec):
    path = spec.path / "bands.csv" if spec.path.is_dir() else spec.path
    cols = read_table(path, "bands")
    crit = load_critical_points(path.parent / "critical.json")
    return cols, crit


def render_bands(spec: FigureSpec) -> Path:
    cols, crit = _bands_input(spec)
    bands = np.unique(cols["band"]).astype(int)
    if "xi_2" in cols:
        fig, axes = plt.subplots(
            1, len(bands), figsize=(3.6 * len(bands), 3.4),
            constrained_layout=True, squeeze=False)
        for ax, b in zip(axes[0], bands):
            m = cols["band"] == b
            x1 = np.unique(cols["xi_1"][m])
            x2 = np.unique(cols["xi_2"][m])
            grid = np.full((x1.size, x2.size), np.nan)
            i = np.searchsorted(x1, cols["xi_1"][m])
            j = np.searchsorted(x2, cols["xi_2"][m])
            grid[i, j] = cols["energy"][m]
            pc = ax.pcolormesh(x1, x2, grid.T, shading="nearest",
                               cmap="viridis")
            fig.colorbar(pc, ax=ax, shrink=0.85)
            for xs, _ in crit:
                ax.plot(xs[0], xs[1], "x", color="crimson", ms=8, mew=2)
            ax.set_title(f"band {b}")
            ax.set_xlabel("quasi-momentum 1")
            ax.set_ylabel("quasi-momentum 2")
    else:
        fig, ax = plt.subplots(figsize=(6.0, 4.0), constrained_layout=True)
        for b in bands:
            m = cols["band"] == b
            order = np.argsort(cols["xi_1"][m], kind="stable")
            ax.plot(cols["xi_1"][m][order], cols["energy"][m][order],
                    lw=1.6, label=f"band {b}")
        for xs, e in crit:
            ax.plot(xs[0], e, "o", mfc="none", mec="crimson", ms=9, mew=1.8)
        ax.set_xlabel("quasi-momentum")
        ax.set_ylabel("energy")
        ax.legend(loc="upper right", fontsize=9)
        ax.set_title(spec.styled("title", "band structure"
                                 + (" with critical points" if crit else "")))
    return _finish(fig, spec.out)


def render_wigner(spec: FigureSpec) -> Path:
    cols = read_table(spec.path, "wigner")
    x = np.unique(cols["x"])
    xi = np.unique(cols["xi"])
    grid = np.full((x.size, xi.size), np.nan)
    i = np.searchsorted(x, cols["x"])
    j = np.searchsorted(xi, cols["xi"])
    grid[i, j] = cols["W"]
    vmax = float(np.nanmax(np.abs(grid)))
    if vmax == 0.0:
        vmax = 1.0
    fig, ax = plt.subplots(figsize=(6.0, 4.2), constrained_layout=True)
    pc = ax.pcolormesh(x, xi, grid.T, shading="nearest", cmap="RdBu_r",
                       vmin=-vmax, vmax=vmax)
    fig.colorbar(pc, ax=ax, label="W")
    ax.set_xlabel("position")
    ax.set_ylabel("momentum")
    ax.set_title(spec.styled("title", "Wigner transform"))
    return _finish(fig, spec.out)


def render_convergence(spec: FigureSpec) -> Path:
    rep = load_report(spec.path)
    series = report_series(rep)
    fits = rep.get("fits", {})
    fig, ax = plt.subplots(figsize=(6.0, 4.2), constrained_layout=True)
    for name in sorted(series):
        eps, vals = series[name]
        # same 10% slack the harness grants its own monotonicity checks,
        # so a figure never contradicts a passing report over floor noise
        if np.any(vals[1:] > vals[:-1] * 1.10):
            warnings.warn(
                f"convergence series '{name}' is not monotone over the sweep",
                RuntimeWarning, stacklevel=2)
        fit = fits.get(name) if isinstance(fits.get(name), dict) else None
        label = name
        if fit and "slope" in fit:
            label = f"{name} (slope {fit['slope']:.2f})"
            guide = np.exp(fit["intercept"]) * eps ** fit["slope"]
            ax.loglog(eps, guide, "--", color="0.55", lw=1.0, zorder=1)
        ax.loglog(eps, vals, "o-", lw=1.4, ms=5, label=label, zorder=2)
    ax.invert_xaxis()
    ax.set_xlabel("eps")
    ax.set_ylabel("metric")
    ax.grid(True, which="both", alpha=0.25)
    ax.legend(fontsize=8)
    ax.set_title(spec.styled("title", rep["experiment"] + " convergence"))
    return _finish(fig, spec.out)


def render_density(spec: FigureSpec) -> Path:
    panels = density_panels(spec)
    fig, axes = plt.subplots(
        1, len(panels), figsize=(4.6 * len(panels), 3.6),
        constrained_layout=True, squeeze=False)
    for ax, (label, cols) in zip(axes[0], panels):
        ax.plot(cols["x"], cols["measured"], lw=1.5, label="measured")
        ax.plot(cols["x"], cols["predicted"], "--", lw=1.5, label="predicted")
        ax.set_xlabel("position")
        ax.set_ylabel("density")
        ax.set_title(label, fontsize=10)
        ax.legend(fontsize=8)
    return _finish(fig, spec.out)


_RENDERERS = {
    "bands": render_bands,
    "wigner": render_wigner,
    "convergence": render_convergence,
    "density": render_density,
}


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the written png path."""
    return _RENDERERS[spec.kind](spec)
