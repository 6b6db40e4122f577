"""Render figures from a finished run's output directory.

Reads diagnostics.csv, config.txt, and the snapshot CSVs written by
``run_simulation`` and drops PNG files next to them.  matplotlib is
imported lazily so the solver stack never depends on a display toolkit.
"""

from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .coupled import decay_fit
from .errors import ConfigError, InvalidStateError

FIGURE_DPI = 130

# H* values at or below this are indistinguishable from converged noise
# on a log axis and are masked out of the decay figure.
LOG_FLOOR = 1e-18


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def load_run(out_dir) -> tuple[RunConfig, np.ndarray, list[Path]]:
    """Load config, diagnostics table, and sorted snapshot paths."""
    out = Path(out_dir)
    config_path = out / "config.txt"
    diag_path = out / "diagnostics.csv"
    if not config_path.is_file() or not diag_path.is_file():
        raise ConfigError(f"{out} is not a run output directory "
                          "(missing config.txt or diagnostics.csv)")
    config = parse_config(config_path.read_text())
    diag = np.genfromtxt(diag_path, delimiter=",", names=True)
    diag = np.atleast_1d(diag)
    snapshots = sorted(out.glob("snap_????????.csv"))
    return config, diag, snapshots


def _mass_columns(diag: np.ndarray, n_species: int) -> np.ndarray:
    cols = [diag[f"mass_{i + 1}"] for i in range(n_species)]
    return np.stack(cols, axis=-1)


def _plot_entropy(plt, out: Path, diag: np.ndarray) -> Path:
    t = diag["time"]
    hstar = diag["H_star"]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    visible = hstar > LOG_FLOOR
    if visible.any():
        ax.semilogy(t[visible], hstar[visible], "o-", ms=3,
                    label="relative entropy")
    else:
        ax.plot(t, np.zeros_like(t), "o-", ms=3, label="relative entropy")
    try:
        fit = decay_fit(t, hstar)
    except InvalidStateError:
        fit = None
    if fit is not None and np.isfinite(fit.lambda_hat):
        t0, t1 = fit.window
        mask = (t >= t0) & (t <= t1) & visible
        if mask.any():
            anchor = float(hstar[mask][0])
            tw = t[mask]
            ax.semilogy(tw, anchor * np.exp(-fit.lambda_hat * (tw - tw[0])),
                        "k--", lw=1,
                        label=f"fit: rate {fit.lambda_hat:.4g}, "
                              f"r2 {fit.r2:.5f}")
    ax.set_xlabel("time")
    ax.set_ylabel("relative entropy")
    ax.legend(loc="best")
    fig.tight_layout()
    path = out / "entropy_decay.png"
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def _plot_conservation(plt, out: Path, diag: np.ndarray,
                       n_species: int) -> Path:
    t = diag["time"]
    masses = _mass_columns(diag, n_species)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9.0, 4.0))
    for i in range(n_species):
        drift = np.abs(masses[:, i] - masses[0, i])
        ax0.semilogy(t, np.maximum(drift, LOG_FLOOR),
                     label=f"species {i + 1}")
    c_drift = np.abs(diag["c_mass"] - diag["c_mass"][0])
    ax0.semilogy(t, np.maximum(c_drift, LOG_FLOOR), "k:",
                 label="total concentration")
    ax0.set_xlabel("time")
    ax0.set_ylabel("mass drift from initial")
    ax0.legend(loc="best", fontsize=8)
    ax1.semilogy(t, np.maximum(diag["max_div"], LOG_FLOOR),
                 label="max divergence")
    ax1.plot(t, diag["kinetic_energy"], label="kinetic energy")
    ax1.set_yscale("log")
    ax1.set_xlabel("time")
    ax1.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = out / "conservation.png"
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def _plot_final_state(plt, out: Path, config: RunConfig,
                      snapshot: Path) -> Path:
    grid = config.make_grid()
    n = config.n_species
    table = np.genfromtxt(snapshot, delimiter=",", names=True)
    table = np.atleast_1d(table)
    if grid.dim == 1:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        z = table["z"]
        for i in range(n):
            ax.plot(z, table[f"rho_{i + 1}"], label=f"species {i + 1}")
        ax.set_xlabel("z")
        ax.set_ylabel("partial density")
        ax.legend(loc="best")
    else:
        fig, axes = plt.subplots(1, n, figsize=(4.0 * n, 3.6),
                                 squeeze=False)
        extent = (0.0, grid.extents[0], 0.0, grid.extents[1])
        for i, ax in enumerate(axes[0]):
            field = table[f"rho_{i + 1}"].reshape(grid.shape)
            im = ax.imshow(field, origin="lower", extent=extent,
                           aspect="auto")
            fig.colorbar(im, ax=ax, shrink=0.85)
            ax.set_title(f"species {i + 1}")
            ax.set_xlabel("z")
            ax.set_ylabel("y")
    fig.tight_layout()
    path = out / "final_state.png"
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def _plot_velocity(plt, out: Path, config: RunConfig,
                   snapshot: Path) -> Path:
    grid = config.make_grid()
    table = np.genfromtxt(snapshot, delimiter=",", names=True)
    zz = table["z"].reshape(grid.shape)
    yy = table["y"].reshape(grid.shape)
    u = table["u"].reshape(grid.shape)
    v = table["v"].reshape(grid.shape)
    p = table["p"].reshape(grid.shape)
    fig, ax = plt.subplots(figsize=(5.4, 4.6))
    extent = (0.0, grid.extents[0], 0.0, grid.extents[1])
    im = ax.imshow(p, origin="lower", extent=extent, aspect="auto",
                   cmap="coolwarm")
    fig.colorbar(im, ax=ax, label="pressure")
    # thin the quiver so arrows stay readable on fine grids
    step = max(1, min(grid.shape) // 16)
    sl = (slice(None, None, step), slice(None, None, step))
    ax.quiver(zz[sl], yy[sl], u[sl], v[sl], color="black", scale_units="xy")
    ax.set_xlabel("z")
    ax.set_ylabel("y")
    fig.tight_layout()
    path = out / "velocity.png"
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def render_report(out_dir) -> list[Path]:
    """Write the figure set for one run; returns the created paths."""
    plt = _pyplot()
    out = Path(out_dir)
    config, diag, snapshots = load_run(out)
    written = [
        _plot_entropy(plt, out, diag),
        _plot_conservation(plt, out, diag, config.n_species),
    ]
    if snapshots:
        written.append(_plot_final_state(plt, out, config, snapshots[-1]))
        uvp = snapshots[-1].with_name(snapshots[-1].stem + "_uvp.csv")
        if config.dimension == 2 and uvp.is_file():
            written.append(_plot_velocity(plt, out, config, uvp))
    return written
