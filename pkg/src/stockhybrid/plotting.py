"""Figures written next to the tabular outputs (PNG, Agg backend, no timestamps)."""

from __future__ import annotations

import io
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from stockhybrid.datafiles import atomic_write  # noqa: E402

_PNG_META = {"Software": None}  # keeps files byte-identical across matplotlib builds


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def plot_retrospective(retro, path, title: str = "") -> None:
    """Recruitment and SSB series from every model year, one line per model."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, kind, label in ((axes[0], "recruitment", "Recruitment"), (axes[1], "ssb", "SSB")):
        rows = retro.series(kind)
        years = sorted(rows)
        cmap = plt.get_cmap("viridis")
        for i, y in enumerate(years):
            s = rows[y]
            if s is None:
                continue
            xs = s.years
            ax.plot(xs, [s[x] for x in xs], color=cmap(i / max(1, len(years) - 1)), lw=0.8)
        ax.set_xlabel("year")
        ax.set_ylabel(label)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_backtest(reports: Sequence, path) -> None:
    """Label, baseline and corrected series for each report."""
    n = len(reports)
    fig, axes = plt.subplots(n, 1, figsize=(8, 2.6 * n), squeeze=False)
    for ax, rep in zip(axes[:, 0], reports):
        yrs = [r.target_year for r in rep.rows]
        ax.plot(yrs, [r.label for r in rep.rows], "k-o", ms=3, label="label")
        ax.plot(yrs, [r.baseline for r in rep.rows], "-s", ms=3, label="assessment")
        ax.plot(yrs, [r.hybrid for r in rep.rows], "-^", ms=3, label="hybrid")
        ax.set_title(f"{rep.stock}: {rep.spec.name}", fontsize=9)
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_shap(records: Mapping[str, Sequence[tuple[float, float]]], order: Sequence[str], path,
              title: str = "", max_features: int = 12) -> None:
    """Beeswarm-style summary: one row per feature, phi on x, colour by scaled feature value."""
    names = list(order)[:max_features]
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(names) + 1.5))
    rng = np.random.default_rng(0)  # vertical jitter only
    for row, name in enumerate(reversed(names)):
        pts = np.array(records[name], dtype=float).reshape(-1, 2)
        vals, phi = pts[:, 0], pts[:, 1]
        finite = np.isfinite(vals)
        colour = np.full(vals.shape, 0.5)
        if finite.any() and np.ptp(vals[finite]) > 0:
            lo, hi = np.min(vals[finite]), np.max(vals[finite])
            colour[finite] = (vals[finite] - lo) / (hi - lo)
        ax.scatter(phi, row + rng.uniform(-0.2, 0.2, phi.size), c=colour, cmap="coolwarm",
                   vmin=0, vmax=1, s=12)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(list(reversed(names)), fontsize=8)
    ax.axvline(0, color="grey", lw=0.5)
    ax.set_xlabel("SHAP value")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)
