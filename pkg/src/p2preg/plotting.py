"""Optional report figures; matplotlib is imported only when a figure is drawn."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .evaluation import BinRow


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise ImportError("figures need matplotlib: pip install 'p2preg[plot]'") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path) -> Path:
    path = Path(path)
    # no software/date stamps, so reruns write identical files
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    return path


def plot_success(curves: dict[str, list[tuple[float, float]]], path: Path,
                 title: str = "Success rate") -> Path:
    """Success rate against threshold, one line per method."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, curve in curves.items():
        taus, rates = zip(*curve) if curve else ((), ())
        ax.plot(taus, rates, marker="o", markersize=3, label=method)
    ax.set_xlabel("RMS-TRE threshold (mm)")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    try:
        return _save(fig, path)
    finally:
        plt.close(fig)


def plot_bins(rows: Sequence[BinRow], path: Path, title: str = "RMS-TRE by visibility") -> Path:
    """Grouped bars of mean RMS-TRE per bin with population-std whiskers."""
    plt = _pyplot()
    methods = list(dict.fromkeys(r.method for r in rows))
    bins = list(dict.fromkeys(r.bin for r in rows))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(bins)), 3.5))
    for k, m in enumerate(methods):
        sel = {r.bin: r for r in rows if r.method == m}
        xs = [b + (k - (len(methods) - 1) / 2) * width for b in range(len(bins))]
        means = [sel[b].mean if sel.get(b) and sel[b].mean is not None else 0.0 for b in bins]
        stds = [sel[b].std if sel.get(b) and sel[b].std is not None else 0.0 for b in bins]
        ax.bar(xs, means, width, yerr=stds, capsize=2, label=m)
    ax.set_xticks(range(len(bins)))
    ax.set_xticklabels(bins, rotation=30, ha="right")
    ax.set_ylabel("RMS-TRE (mm)")
    ax.set_title(title)
    ax.legend()
    try:
        return _save(fig, path)
    finally:
        plt.close(fig)
