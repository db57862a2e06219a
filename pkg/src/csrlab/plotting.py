"""Byte-deterministic SVG charts via matplotlib."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "csrlab",
    "svg.fonttype": "none",
    "path.simplify": False,
    "figure.figsize": (6.0, 4.0),
}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def line_chart(path, series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               logx: bool = False) -> None:
    """``series`` maps a legend label to an (x, y) pair."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for name, (x, y) in series.items():
            ax.plot(np.asarray(x), np.asarray(y), marker="o", markersize=3, label=str(name))
        if logx:
            ax.set_xscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        if series:
            ax.legend()
        fig.tight_layout()
        _save(fig, path)


def heatmap(path, grid: np.ndarray, title: str = "", extent=None) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        im = ax.imshow(np.asarray(grid), origin="lower", cmap="viridis", extent=extent)
        fig.colorbar(im, ax=ax)
        ax.set_title(title)
        ax.set_xlabel("v")
        ax.set_ylabel("u")
        fig.tight_layout()
        _save(fig, path)
