"""Matrix-level diagnostics: spectra, value distributions, and how the
different FP4 treatments distort a matrix's dominant structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..baselines import HadamardPlan
from ..engine import QuantConfig, Quantizer
from ..spectral import elbow_fraction, spectral_distortion, split_rank_k, svd_full

COMPONENT_INDICES = (0, 16, 128, 1024)


def planted_matrix(rng: np.random.Generator, rows: int, cols: int, k: int,
                   energy: float = 0.9, tail_decay: float = 0.1) -> np.ndarray:
    """Random-basis matrix whose top ``k`` components carry ``energy`` of the
    squared Frobenius norm. The tail decays geometrically from 1 to ``tail_decay``."""
    if not 0 < energy < 1:
        raise ValueError("energy must lie in (0, 1)")
    n = min(rows, cols)
    if not 1 <= k < n:
        raise ValueError("k must satisfy 1 <= k < min(rows, cols)")
    u, _ = np.linalg.qr(rng.standard_normal((rows, n)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, n)))
    tail = np.geomspace(1.0, tail_decay, n - k)
    shape = np.linspace(1.0, 0.8, k)
    top = np.sqrt(np.sum(tail**2) * energy / (1 - energy) / k) * shape / np.sqrt(np.mean(shape**2))
    return (u * np.r_[top, tail]) @ v.T


def _spread(a: np.ndarray) -> dict:
    a = np.ravel(a)
    p10, p90 = np.percentile(a, [10, 90]) if a.size else (0.0, 0.0)
    return {
        "min": float(a.min()) if a.size else 0.0,
        "max": float(a.max()) if a.size else 0.0,
        "abs_max": float(np.abs(a).max()) if a.size else 0.0,
        "inter_decile": float(p90 - p10),
        "std": float(a.std()) if a.size else 0.0,
    }


def histogram(a: np.ndarray, bins: int = 64, value_range=None) -> dict:
    counts, edges = np.histogram(np.ravel(a), bins=bins, range=value_range)
    return {"edges": edges.tolist(), "counts": counts.tolist(), **_spread(a)}


def _range(a: np.ndarray) -> float:
    return float(np.max(a) - np.min(a)) if np.size(a) else 0.0


def analyze_tensor(m, k: int, bins: int = 64, components=COMPONENT_INDICES) -> dict:
    """Spectrum, elbow, and value histograms of ``m`` and its spectral pieces.

    ``residual_range_ratio`` is the value range (max minus min) of ``m`` over that of
    the residual left after removing the top ``k`` components.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValueError("expected a finite 2-D matrix")
    sigma, u, v = svd_full(m)
    r = sigma.size
    k = int(min(max(k, 0), r))
    positive = sigma[sigma > sigma[0] * 1e-12] if r and sigma[0] > 0 else sigma[:0]
    if positive.size >= 3:
        e = elbow_fraction(positive)
        elbow = {"index": e.index, "fraction": e.index / r, "max_curvature": e.max_curvature,
                 "flat": e.flat}
    else:
        elbow = {"index": 0, "fraction": 0.0, "max_curvature": 0.0, "flat": True}
    edges = (float(m.min()), float(m.max())) if m.size and m.min() < m.max() else None
    hists = {"full": histogram(m, bins, edges)}
    for i in components:
        if i < r:
            hists[f"component_{i}"] = histogram(sigma[i] * np.outer(u[:, i], v[:, i]), bins)
    residual = m - (u[:, :k] * sigma[:k]) @ v[:, :k].T if k else m
    hists["residual"] = histogram(residual, bins)
    res_range = _range(residual)
    return {
        "shape": list(m.shape),
        "k": k,
        "spectrum": sigma.tolist(),
        "elbow": elbow,
        "histograms": hists,
        # None when the residual is constant (nothing left to compare against)
        "residual_range_ratio": _range(m) / res_range if res_range > 0 else None,
    }


def compare_distributions(m, k: int, seed: int = 0) -> dict:
    """Value spread of ``m`` as seen by each treatment: untouched, after a
    random Hadamard rotation of the last axis, and the residual after removing
    the top ``k`` spectral components."""
    m = np.asarray(m, dtype=np.float64)
    plan = HadamardPlan.create(m.shape[1], seed)
    return {
        "original": _spread(m),
        "hadamard": _spread(plan.right(m)),
        "metis_residual": _spread(split_rank_k(m, k).residual),
    }


@dataclass(frozen=True)
class Treatments:
    """Dequantized reconstructions of one matrix under each FP4 treatment."""

    direct: np.ndarray
    hadamard: np.ndarray
    metis: np.ndarray


def quantize_treatments(m, k: int, cfg: QuantConfig | None = None, seed: int = 0) -> Treatments:
    """Fake-quantize ``m`` directly, through a random Hadamard rotation, and
    through its rank-``k`` split (factors and residual quantized separately,
    singular values kept in high precision)."""
    m = np.asarray(m, dtype=np.float64)
    cfg = cfg or QuantConfig()
    q = Quantizer(cfg, (seed,))
    direct = q(m, "x")
    plan = HadamardPlan.create(m.shape[1], seed)
    hadamard = plan.inverse_right(q(plan.right(m), "x"))
    sp = split_rank_k(m, k)
    metis = (q(sp.left, "a") * sp.values) @ q(sp.right, "b").T + q(sp.residual, "x")
    return Treatments(direct, hadamard, metis)


def distortion_summary(m, k: int, k_eval: int, cfg: QuantConfig | None = None,
                       seed: int = 0) -> dict:
    """Mean singular-value relative error and left-vector cosine over the top
    ``k_eval`` components, for each treatment."""
    t = quantize_treatments(m, k, cfg, seed)
    out = {}
    for name in ("direct", "hadamard", "metis"):
        d = spectral_distortion(m, getattr(t, name), k_eval)
        out[name] = {"value_rel_error": float(d.value_rel_error.mean()),
                     "vector_cosine": float(d.vector_cosine.mean())}
    return out
