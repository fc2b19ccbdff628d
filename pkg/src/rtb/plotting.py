"""Sample figures (scatter + hexbin per method) and their histogram tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .checkpoint import write_rows
from .evaluate import mode_histogram, tv_distance
from .targets import GmmTarget

LIMIT = 14.0


def _deterministic():
    plt.rcParams["svg.hashsalt"] = "rtb"
    plt.rcParams["svg.fonttype"] = "none"


def plot_panels(panels: dict, g: GmmTarget, path, reference=None):
    """One column per method: scatter on top, hexbin density below.

    ``panels`` maps a method name to an (n, 2) sample array. Writes an SVG
    to ``path`` and returns it.
    """
    if not panels:
        raise ValueError("nothing to plot")
    _deterministic()
    names = list(panels)
    fig, axes = plt.subplots(2, len(names), figsize=(3.2 * len(names), 6.4), squeeze=False)
    for j, name in enumerate(names):
        x = np.atleast_2d(panels[name])
        top, bottom = axes[0, j], axes[1, j]
        top.scatter(x[:, 0], x[:, 1], s=2, alpha=0.4, color="tab:blue", rasterized=False)
        top.scatter(g.means[:, 0], g.means[:, 1], s=12, marker="x", color="k")
        title = name
        if reference is not None:
            title += f"\nTV {tv_distance(mode_histogram(x, g), reference):.3f}"
        top.set_title(title, fontsize=9)
        bottom.hexbin(x[:, 0], x[:, 1], gridsize=40, extent=(-LIMIT, LIMIT, -LIMIT, LIMIT), cmap="viridis", mincnt=1)
        for ax in (top, bottom):
            ax.set_xlim(-LIMIT, LIMIT)
            ax.set_ylim(-LIMIT, LIMIT)
            ax.set_aspect("equal")
            ax.tick_params(labelsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_panel_table(path, panels: dict, g: GmmTarget, reference=None):
    """Long-format CSV: method, mode index, mode center, frequency, reference weight."""
    rows = []
    for name, x in panels.items():
        freqs = mode_histogram(np.atleast_2d(x), g).freqs
        for i, (m, f) in enumerate(zip(g.means, freqs)):
            row = {"method": name, "mode": i, "mu_1": float(m[0]), "mu_2": float(m[1]), "freq": float(f)}
            if reference is not None:
                row["reference"] = float(reference[i])
            rows.append(row)
    write_rows(path, rows, ["method", "mode", "mu_1", "mu_2", "freq", "reference"])
    return path
