"""Spectral machinery: exact and randomized SVD splits, sequence-sampled
subspace estimation, and the anisotropy / distortion metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .precision import DenseMatrix


@dataclass(frozen=True)
class SketchPlan:
    """Parameters of the scalable decomposition.

    ``seq_len`` is the number of consecutive rows forming one sequence, the
    unit drawn by sparse sampling.
    """

    k: int
    oversample: int = 8
    sample_ratio: float = 1.0
    power_iters: int = 1
    seed: int = 0
    seq_len: int = 1

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("rank must be non-negative")
        if self.oversample < 0:
            raise ValueError("oversample must be non-negative")
        if not 0 < self.sample_ratio <= 1:
            raise ValueError("sample_ratio must lie in (0, 1]")
        if self.power_iters < 0 or self.seq_len < 1:
            raise ValueError("power_iters >= 0 and seq_len >= 1 required")


@dataclass(frozen=True)
class SpectralSplit:
    """``left @ diag(values) @ right.T + residual`` reproduces the source."""

    left: np.ndarray
    values: np.ndarray
    right: np.ndarray
    residual: np.ndarray

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def low_rank(self) -> np.ndarray:
        return (self.left * self.values) @ self.right.T

    def reconstruct(self) -> np.ndarray:
        return self.low_rank() + self.residual


def default_rank(rows: int, cols: int, fraction: float = 0.015) -> int:
    return max(1, math.ceil(fraction * min(rows, cols)))


def _matrix(m) -> np.ndarray:
    arr = np.asarray(m.data if isinstance(m, DenseMatrix) else m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return arr


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each left vector made positive.
    if u.size == 0:
        return u, vt
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd_full(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD returning ``(sigma, U, V)`` with V's columns the right vectors."""
    arr = _matrix(m)
    u, s, vt = np.linalg.svd(arr, full_matrices=False)
    u, vt = _fix_signs(u, vt)
    return s, u, vt.T


def split_rank_k(m, k: int) -> SpectralSplit:
    arr = _matrix(m)
    if not 1 <= k <= min(arr.shape):
        raise ValueError(f"rank {k} outside [1, {min(arr.shape)}]")
    s, u, v = svd_full(arr)
    u, s, v = u[:, :k], s[:k], v[:, :k]
    return SpectralSplit(u, s, v, arr - (u * s) @ v.T)


def _orthonormal(z: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(z)
    return q


def randomized_split(m, plan: SketchPlan, rng: np.random.Generator | None = None) -> SpectralSplit:
    """Gaussian-sketch randomized SVD truncated to ``plan.k`` components."""
    arr = _matrix(m)
    width = plan.k + plan.oversample
    if plan.k < 1 or width > min(arr.shape):
        raise ValueError(f"sketch width {width} (k={plan.k}) exceeds matrix dims {arr.shape}")
    rng = np.random.default_rng(plan.seed) if rng is None else rng
    omega = rng.standard_normal((arr.shape[1], width))
    h = _orthonormal(arr @ omega)
    for _ in range(plan.power_iters):
        h = _orthonormal(arr @ _orthonormal(arr.T @ h))
    small = h.T @ arr
    ut, s, vt = np.linalg.svd(small, full_matrices=False)
    u = h @ ut[:, :plan.k]
    u, vt = _fix_signs(u, vt[:plan.k])
    s = s[:plan.k]
    v = vt.T
    return SpectralSplit(u, s, v, arr - (u * s) @ v.T)


def sample_sequences(n_rows: int, plan: SketchPlan, rng: np.random.Generator) -> np.ndarray:
    """Row indices of a uniform draw of whole sequences, without replacement."""
    n_seq = n_rows // plan.seq_len
    if n_seq * plan.seq_len != n_rows:
        raise ValueError(f"{n_rows} rows do not split into sequences of {plan.seq_len}")
    take = max(1, round(plan.sample_ratio * n_seq)) if n_seq else 0
    if take == 0:
        raise ValueError("sample is empty")
    chosen = np.sort(rng.choice(n_seq, size=take, replace=False))
    return (chosen[:, None] * plan.seq_len + np.arange(plan.seq_len)).ravel()


def sampled_subspace(x, plan: SketchPlan, rng: np.random.Generator | None = None) -> np.ndarray:
    """Dominant right-subspace basis (m x k) estimated from sampled sequences.

    The sketch width is clipped to the sampled block's dimensions when the
    sample holds fewer rows than ``k + oversample``.
    """
    arr = _matrix(x)
    rng = np.random.default_rng(plan.seed) if rng is None else rng
    rows = arr[sample_sequences(arr.shape[0], plan, rng)] if plan.sample_ratio < 1 else arr
    dim = min(rows.shape)
    k = min(plan.k, dim)
    if k < 1:
        raise ValueError("sample is empty")
    sub = SketchPlan(k, min(plan.oversample, dim - k), 1.0, plan.power_iters, plan.seed, plan.seq_len)
    return randomized_split(rows, sub, rng).right


def project_split(x, basis: np.ndarray) -> SpectralSplit:
    """Broadcast a right basis to the whole matrix.

    Coefficients ``x @ basis`` are refolded by a thin SVD so the left factor is
    orthonormal and the values come out re-estimated on the full batch.
    """
    arr = _matrix(x)
    coeff = arr @ basis
    p, s, rt = np.linalg.svd(coeff, full_matrices=False)
    right = basis @ rt.T
    p, rt_fixed = _fix_signs(p, right.T)
    right = rt_fixed.T
    keep = s > 0
    if not np.all(keep):
        p, s, right = p[:, keep], s[keep], right[:, keep]
    return SpectralSplit(p, s, right, arr - (p * s) @ right.T)


def sampled_split(x, plan: SketchPlan, rng: np.random.Generator | None = None) -> SpectralSplit:
    """Full scalable decomposition: sample, sketch, then project the batch."""
    return project_split(x, sampled_subspace(x, plan, rng))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Elbow:
    index: int  # number of dominant components before the elbow
    fraction: float
    max_curvature: float
    flat: bool


def curvature(sigma) -> np.ndarray:
    """Signed curvature of (normalized index, normalized log sigma).

    Entry ``i`` belongs to interior point ``i + 1``; convex bends are positive.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size < 3:
        raise ValueError("need at least 3 singular values")
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ValueError("singular values must be positive and finite")
    y = np.log(s)
    span = y.max() - y.min()
    if span <= 1e-12 * max(1.0, abs(y.max())):
        return np.zeros(s.size - 2)
    y = (y - y.min()) / span
    h = 1.0 / (s.size - 1)
    d1 = (y[2:] - y[:-2]) / (2 * h)
    d2 = (y[2:] - 2 * y[1:-1] + y[:-2]) / h**2
    return d2 / (1 + d1**2) ** 1.5


def elbow_fraction(sigma, flat_tol: float = 1e-9) -> Elbow:
    """Elbow of a descending spectrum at its point of maximum convex curvature."""
    kappa = curvature(sigma)
    r = len(sigma)
    best = float(kappa.max())
    flat = best <= flat_tol
    i = int(np.argmax(kappa)) + 1  # argmax returns the first maximum
    return Elbow(i, i / r, max(best, 0.0), flat)


def _orthonormal_basis(b: np.ndarray, name: str) -> np.ndarray:
    gram = b.T @ b
    if not np.allclose(gram, np.eye(b.shape[1]), atol=1e-6):
        warnings.warn(f"{name} is not orthonormal; re-orthonormalizing", stacklevel=3)
        return _orthonormal(b)
    return b


def subspace_alignment(basis_a, basis_b) -> float:
    """Mean squared canonical correlation between two column spans."""
    a = _matrix(basis_a)
    b = _matrix(basis_b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"ambient dims differ: {a.shape[0]} vs {b.shape[0]}")
    a = _orthonormal_basis(a, "basis_a")
    b = _orthonormal_basis(b, "basis_b")
    cc = np.linalg.svd(a.T @ b, compute_uv=False)
    k = max(a.shape[1], b.shape[1])
    return float(np.clip(np.sum(cc**2) / k, 0.0, 1.0))


@dataclass(frozen=True)
class Distortion:
    value_rel_error: np.ndarray
    vector_cosine: np.ndarray
    skipped: tuple[int, ...] = ()


def spectral_distortion(reference, perturbed, k: int) -> Distortion:
    """Per-component singular value error and left-vector cosine."""
    ref = _matrix(reference)
    per = _matrix(perturbed)
    if ref.shape != per.shape:
        raise ValueError("shape mismatch")
    if not 1 <= k <= min(ref.shape):
        raise ValueError("k out of range")
    s_ref, u_ref, _ = svd_full(ref)
    s_per, u_per, _ = svd_full(per)
    errs, cosines, skipped = [], [], []
    for i in range(k):
        if s_ref[i] == 0:
            skipped.append(i)
            continue
        errs.append(abs(s_per[i] - s_ref[i]) / s_ref[i])
        cosines.append(abs(float(u_ref[:, i] @ u_per[:, i])))
    return Distortion(np.array(errs), np.array(cosines), tuple(skipped))
