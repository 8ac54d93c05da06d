"""Static figures for forecasts, training curves and backtests."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp, so reruns write byte-identical SVGs
plt.rcParams.update({
    "svg.hashsalt": "vta",
    "figure.figsize": (7.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
})


def save(fig, path, formats: Sequence[str] | None = None) -> list[Path]:
    """Write ``fig`` to ``path`` (suffix picks the format) or to each of ``formats``."""
    path = Path(path)
    targets = [path] if formats is None else [path.with_suffix("." + f) for f in formats]
    for t in targets:
        meta = {"Date": None} if t.suffix == ".svg" else {}
        fig.savefig(t, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    return targets


def plot_forecast(history, y_uncond, y_final, path, y_cond=None, truth=None, title: str = ""):
    history = np.asarray(history, dtype=float)
    T = history.size
    ahead = np.arange(T, T + len(y_final))
    fig, ax = plt.subplots()
    ax.plot(np.arange(T), history, color="black", label="history")
    ax.plot(ahead, y_uncond, "--", color="tab:blue", label="unconditional")
    if y_cond is not None:
        ax.plot(ahead, y_cond, ":", color="tab:orange", label="conditional")
    ax.plot(ahead, y_final, color="tab:red", label="guided")
    if truth is not None:
        ax.plot(ahead, truth, color="gray", alpha=0.6, label="realised")
    ax.axvline(T - 0.5, color="gray", lw=0.8)
    ax.set_xlabel("day")
    ax.set_ylabel("price")
    ax.set_title(title)
    ax.legend(frameon=False)
    return save(fig, path)


def plot_equity(dates, equity, path, benchmark=None, title: str = "Equity"):
    x = np.asarray(dates, dtype="datetime64[D]")
    fig, ax = plt.subplots()
    ax.plot(x, equity, color="tab:blue", label="portfolio")
    if benchmark is not None:
        ax.plot(x, benchmark, color="gray", label="equal weight")
    ax.set_ylabel("equity")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.autofmt_xdate()
    return save(fig, path)


def plot_curves(curves: Mapping[str, tuple[Sequence, Sequence]], path, ylabel: str, title: str = "",
                logy: bool = False, formats=None):
    fig, ax = plt.subplots()
    for name, (x, y) in curves.items():
        ax.plot(x, y, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(frameon=False)
    return save(fig, path, formats)


def plot_bars(values: Mapping[str, float], path, ylabel: str, title: str = "", formats=None):
    fig, ax = plt.subplots()
    names = list(values)
    ax.bar(names, [values[n] for n in names], color="tab:blue")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return save(fig, path, formats)
