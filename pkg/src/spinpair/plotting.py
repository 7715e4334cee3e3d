"""Small SVG plots of sweep results.

Plots are a convenience; the CSV files are the record. The SVG writer is
given a fixed hash salt and no date so the same data give the same bytes.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "spinpair",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def line_plot(path, series, xlabel, ylabel, title="", logx=False, logy=False):
    """Write an SVG with one line or marker set per ``series`` entry.

    Each entry is ``(x, y, label, style)`` where style is a matplotlib
    format string such as ``"o"`` or ``"-"``.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for x, y, label, style in series:
            ax.plot(np.asarray(x, float), np.asarray(y, float), style, label=label, markersize=3)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        if title:
            ax.set_title(title)
        if any(s[2] for s in series):
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def plot_record(path, record, column="population", fit=None, title=""):
    """One sweep column against its x axis, with an optional fitted curve."""
    y = record.population if column == "population" else record.columns[column]
    series = [(record.x, y, "data", "o")]
    if fit is not None:
        xs = np.linspace(record.x.min(), record.x.max(), 400)
        series.append((xs, fit(xs), "fit", "-"))
    line_plot(path, series, record.x_label, column, title or record.name)


def bar_matrix(path, rho, title=""):
    """Real and imaginary parts of a 4x4 density matrix as grouped bars."""
    rho = np.asarray(getattr(rho, "rho", rho))
    labels = ["uu", "ud", "du", "dd"]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.0), sharey=True)
        for ax, part, name in zip(axes, (rho.real, rho.imag), ("Re", "Im")):
            w = 0.2
            for j in range(4):
                ax.bar(np.arange(4) + (j - 1.5) * w, part[:, j], w, label=labels[j])
            ax.set_xticks(range(4), labels)
            ax.set_title(f"{name} rho {title}".strip())
            ax.axhline(0, color="0.5", linewidth=0.6)
        axes[0].legend(frameon=False, fontsize=7, title="column")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
