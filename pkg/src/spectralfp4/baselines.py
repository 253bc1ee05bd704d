"""Comparison regimes: BF16 GeMM, direct NVFP4 GeMM, and NVFP4 with a
random Hadamard rotation of the contraction axis plus stochastic rounding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import MetisWeight, QuantConfig, Quantizer, WeightGrads
from .precision import bf16


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def fast_hadamard(vec, normalize: bool = True) -> np.ndarray:
    """Walsh-Hadamard transform (Sylvester order) along the last axis."""
    a = np.array(vec, dtype=np.float64)
    n = a.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"length {n} is not a power of two")
    lead = a.shape[:-1]
    out = a.reshape(-1, n)
    h = 1
    while h < n:
        out = out.reshape(-1, n // (2 * h), 2, h)
        lo, hi = out[:, :, 0, :], out[:, :, 1, :]
        out = np.stack((lo + hi, lo - hi), axis=2)
        h *= 2
    out = out.reshape(*lead, n)
    if normalize:
        out /= math.sqrt(n)
    return out


@dataclass(frozen=True)
class HadamardPlan:
    """Random orthogonal ``R = H diag(signs) / sqrt(dim)`` on a padded axis.

    ``size`` is the true axis length; ``dim`` the power of two it is padded to.
    """

    size: int
    dim: int
    signs: np.ndarray
    seed: int

    @classmethod
    def create(cls, size: int, seed: int = 0) -> "HadamardPlan":
        dim = next_pow2(size)
        signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=dim)
        return cls(size, dim, signs, seed)

    def matrix(self) -> np.ndarray:
        return fast_hadamard(np.eye(self.dim)) * self.signs

    def _pad_cols(self, a: np.ndarray) -> np.ndarray:
        if a.shape[-1] != self.size:
            raise ValueError(f"axis has length {a.shape[-1]}, plan expects {self.size}")
        pad = self.dim - self.size
        return np.pad(a, ((0, 0), (0, pad))) if pad else a

    def right(self, x: np.ndarray) -> np.ndarray:
        """``x @ R`` on the padded last axis."""
        return fast_hadamard(self._pad_cols(np.asarray(x, dtype=np.float64))) * self.signs

    def left(self, w: np.ndarray) -> np.ndarray:
        """``R.T @ w`` on the padded first axis."""
        w = np.asarray(w, dtype=np.float64)
        return (fast_hadamard(self._pad_cols(w.T)) * self.signs).T

    def inverse_right(self, y: np.ndarray) -> np.ndarray:
        """Undo ``right``: ``y @ R.T`` truncated to the true size."""
        return fast_hadamard(np.asarray(y) * self.signs)[:, :self.size]


def direct_nvfp4_gemm(x, w, cfg: QuantConfig = QuantConfig(), key=(0,)) -> np.ndarray:
    """``Q(x) @ Q(w)`` with emulated accumulation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"cannot multiply {x.shape} by {w.shape}")
    q = Quantizer(cfg, key)
    return cfg.mm(q(x, "x"), q(w, "w"))


def hadamard_gemm(x, w, plan: HadamardPlan, cfg: QuantConfig = QuantConfig(), key=(0,)) -> np.ndarray:
    """Rotate the shared axis of both operands, quantize, multiply.

    ``(x R)(R^T w) = x w`` exactly, so no output transform is needed.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"cannot multiply {x.shape} by {w.shape}")
    q = Quantizer(cfg, key)
    return cfg.mm(q(plan.right(x), "x"), q(plan.left(w), "w"))


def _dense_grads(w: MetisWeight, dw: np.ndarray) -> WeightGrads:
    m, n = w.shape
    return WeightGrads(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)), dw)


class BF16Gemm:
    """BF16 operands with BF16 accumulation (the unquantized reference regime)."""

    def __init__(self, cfg: QuantConfig):
        self.cfg = cfg

    def forward(self, x, w: MetisWeight, key=(0,)):
        x_b, w_b = bf16(x), bf16(w.dense())
        return self.cfg.mm(x_b, w_b), (x_b, w_b, w)

    def backward(self, d, ctx):
        x_b, w_b, w = ctx
        d_b = bf16(d)
        return self.cfg.mm(d_b, w_b.T), _dense_grads(w, self.cfg.mm(x_b.T, d_b))


class DirectGemm:
    """Quantize every GeMM operand straight to NVFP4."""

    def __init__(self, cfg: QuantConfig):
        self.cfg = cfg

    def forward(self, x, w: MetisWeight, key=(0,)):
        q = Quantizer(self.cfg, key)
        x_q, w_q = q(np.asarray(x, dtype=np.float64), "x"), q(w.dense(), "w")
        return self.cfg.mm(x_q, w_q), (x_q, w_q, w, q)

    def backward(self, d, ctx):
        x_q, w_q, w, q = ctx
        d_q = q(np.asarray(d, dtype=np.float64), "d")
        return self.cfg.mm(d_q, w_q.T), _dense_grads(w, self.cfg.mm(x_q.T, d_q))


class HadamardGemm:
    """Random Hadamard rotation of each GeMM's contraction axis, then NVFP4.

    Sign vectors are drawn once per (layer, GeMM role) from ``seed`` and kept
    for the whole run.
    """

    def __init__(self, cfg: QuantConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self._plans: dict[tuple[str, int], HadamardPlan] = {}

    def plan(self, role: str, size: int) -> HadamardPlan:
        key = (role, size)
        if key not in self._plans:
            role_id = {"fwd": 0, "dgrad": 1, "wgrad": 2}[role]
            seed = int(np.random.default_rng([self.seed, role_id, size]).integers(2**31))
            self._plans[key] = HadamardPlan.create(size, seed)
        return self._plans[key]

    def forward(self, x, w: MetisWeight, key=(0,)):
        q = Quantizer(self.cfg, key)
        x = np.asarray(x, dtype=np.float64)
        dense = w.dense()
        r = self.plan("fwd", x.shape[1])
        y = self.cfg.mm(q(r.right(x), "x"), q(r.left(dense), "w"))
        return y, (x, dense, w, key)

    def backward(self, d, ctx):
        x, dense, w, key = ctx
        q = Quantizer(self.cfg, (*key, 1))
        d = np.asarray(d, dtype=np.float64)
        r_n = self.plan("dgrad", d.shape[1])
        dx = self.cfg.mm(q(r_n.right(d), "d"), q(r_n.left(dense.T), "w"))
        r_l = self.plan("wgrad", d.shape[0])
        dw = self.cfg.mm(q(r_l.right(x.T), "x"), q(r_l.left(d), "d"))
        return dx, _dense_grads(w, dw)
