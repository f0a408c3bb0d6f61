"""Figures for experiment reports, rendered to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _slot_means(report):
    tc = np.array([s.slots.mean_tc for s in report.samples])
    nbr = np.array([s.slots.mean_nbr for s in report.samples])
    with np.errstate(all="ignore"):
        return tc.mean(axis=0), np.nanmean(nbr, axis=0) if np.isfinite(nbr).any() else None


def plot_slots(reports, path: Path) -> None:
    """Average TC (and non-best-response count) per slot, one line per scheme."""
    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(6, 5))
    for r in reports:
        tc, nbr = _slot_means(r)
        axes[0].plot(np.arange(tc.size), tc, label=r.scheme)
        if nbr is not None:
            axes[1].plot(np.arange(nbr.size), nbr, label=r.scheme)
    axes[0].set_ylabel("mean total cost [s]")
    axes[1].set_ylabel("users off best response")
    axes[1].set_xlabel("slot")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_best_tc(reports, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in reports:
        ax.hist([s.best_tc for s in r.samples], bins=30, alpha=0.6, label=r.scheme)
    ax.set_xlabel("best total cost in sample [s]")
    ax.set_ylabel("samples")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_mean_std(reports, path: Path) -> None:
    """Per-sample mean against std of total cost."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in reports:
        ax.scatter([s.mean_tc for s in r.samples], [s.std_tc for s in r.samples], s=10, label=r.scheme)
    ax.set_xlabel("mean total cost [s]")
    ax.set_ylabel("std of total cost [s]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(reports, out: Path) -> list[Path]:
    out = Path(out)
    paths = [out / "slots.png", out / "best_tc.png", out / "mean_std.png"]
    plot_slots(reports, paths[0])
    plot_best_tc(reports, paths[1])
    plot_mean_std(reports, paths[2])
    return paths
