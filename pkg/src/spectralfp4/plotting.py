"""Figure rendering for CLI reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _bars(ax, hist: dict, label: str, **kw) -> None:
    edges = np.asarray(hist["edges"])
    counts = np.asarray(hist["counts"], dtype=float)
    if counts.sum() > 0:
        counts = counts / counts.sum()
    ax.stairs(counts, edges, label=label, **kw)


def plot_analysis(record: dict, path: str) -> str:
    """Spectrum with elbow marker, plus full/component/residual histograms."""
    fig, (ax_s, ax_h) = plt.subplots(1, 2, figsize=(10, 4))
    sigma = np.asarray(record["spectrum"])
    if sigma.size:
        ax_s.semilogy(np.arange(1, sigma.size + 1), np.maximum(sigma, 1e-300))
        idx = record["elbow"]["index"]
        if 0 < idx <= sigma.size and not record["elbow"]["flat"]:
            ax_s.axvline(idx, color="tab:red", ls="--", label=f"elbow f={record['elbow']['fraction']:.3f}")
            ax_s.legend()
    ax_s.set_xlabel("component")
    ax_s.set_ylabel("singular value")
    ax_s.set_title("spectrum")
    hists = record["histograms"]
    _bars(ax_h, hists["full"], "full", fill=True, alpha=0.3)
    for name, h in hists.items():
        if name.startswith("component_"):
            _bars(ax_h, h, name.replace("_", " "), ls="--")
    _bars(ax_h, hists["residual"], f"residual (k={record['k']})", lw=2)
    ax_h.set_yscale("log")
    ax_h.set_xlabel("value")
    ax_h.set_title("value distributions")
    ax_h.legend(fontsize=7)
    return _save(fig, path)


def plot_losses(series: dict[str, list[float]], path: str, title: str = "training loss") -> str:
    """One curve per labelled loss series, lightly smoothed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, losses in series.items():
        y = np.asarray(losses, dtype=float)
        if y.size == 0:
            continue
        w = max(1, y.size // 50)
        smooth = np.convolve(y, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(smooth.size) + w - 1, smooth, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_quantized(original: np.ndarray, dequantized: np.ndarray, path: str) -> str:
    """Original vs dequantized scatter and the error histogram."""
    fig, (ax_a, ax_b) = plt.subplots(1, 2, figsize=(10, 4))
    o, d = np.ravel(original), np.ravel(dequantized)
    take = np.random.default_rng(0).permutation(o.size)[:20000]
    ax_a.scatter(o[take], d[take], s=2, alpha=0.4)
    ax_a.set_xlabel("original")
    ax_a.set_ylabel("dequantized")
    ax_b.hist(d - o, bins=80)
    ax_b.set_yscale("log")
    ax_b.set_xlabel("error")
    return _save(fig, path)


def plot_bars(labels: list[str], values: list[float], path: str, ylabel: str, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    lo, hi = min(values, default=0), max(values, default=1)
    if hi > lo > 0:
        ax.set_ylim(lo - 0.1 * (hi - lo), hi + 0.1 * (hi - lo))
    return _save(fig, path)
