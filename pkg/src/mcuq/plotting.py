"""Figures written next to the CSV reports.

Rendering uses the Agg backend with PNG metadata stripped so identical data
produce identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def zscore_histogram(edges, counts, path, title=None):
    """Histogram of standardised errors with the N(0, 1) bin masses overlaid."""
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        widths = np.diff(edges)
        dens = counts / (total * widths) if total else counts
        ax.bar(edges[:-1], dens, width=widths, align="edge", color="0.7", edgecolor="0.3", lw=0.5,
               label="empirical")
        x = np.linspace(edges[0], edges[-1], 400)
        ax.plot(x, np.exp(-x * x / 2) / np.sqrt(2 * np.pi), color="C3", lw=1.2, label="N(0, 1)")
        ax.set_xlabel("(M^d - M*) / s")
        ax.set_ylabel("density")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def coverage_by_trial(coverage, path, level=0.95, title=None):
    cov = np.asarray(coverage, dtype=float)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(cov.size), cov, "o", ms=3, color="C0", label="trial coverage")
        ax.axhline(level, color="C3", lw=1.0, ls="--", label=f"nominal {level:g}")
        if cov.size:
            ax.axhline(cov.mean(), color="0.3", lw=1.0, label=f"mean {cov.mean():.3f}")
        ax.set_xlabel("trial")
        ax.set_ylabel("coverage rate")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def coverage_vs_budget(budgets, curves: dict, path, title=None):
    """One line per variance model: realised coverage against total budget."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for k, (name, vals) in enumerate(curves.items()):
            ax.plot(budgets, vals, marker="o", ms=3, color=f"C{k}", label=name)
        ax.set_xlabel("total interval length budget")
        ax.set_ylabel("coverage rate")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)

