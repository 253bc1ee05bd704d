"""Decomposed FP4 GeMM.

Each GeMM operand is split into a rank-k part and a residual: activations and
output gradients are split afresh every call, weights are kept split as four
trainable pieces (``u``, ``s``, ``v``, ``residual``). Singular-value diagonals
stay in float64; every other factor goes through the NVFP4 block quantizer.

The forward product is evaluated as ``Xq Uq S Vq^T + Xq Wq_R`` where
``Xq = Aq Lambda Bq^T + Xq_R``; the backward pass evaluates the four-term
input gradient and the two-term parameter gradients on the quantized factors
of ``D = P T Q^T + D_R``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .fp4 import DEFAULT_BLOCK, fake_quantize
from .precision import EmulatedFormat, RoundingMode, bf16, gemm, round_to_format
from .spectral import (
    SketchPlan,
    SpectralSplit,
    randomized_split,
    sampled_split,
    split_rank_k,
)

# Stable ids keep per-role RNG streams independent of call order.
ROLE_IDS = {
    "x": 0, "w": 1, "d": 2,
    "a": 3, "b": 4, "u": 5, "v": 6, "p": 7, "q": 8,
    "sketch_x": 20, "sketch_d": 21,
}

# Thin singular-vector factors; see ``QuantConfig.factor_blocking``.
_FACTOR_ROLES = frozenset("abuvpq")
_GRADIENT_ROLES = frozenset("dpq")


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class QuantConfig:
    """Numerics of one GeMM family.

    With ``enabled=False`` no operand is quantized (oracle mode); pair it with
    ``accumulate="wide"`` for exact float64 arithmetic. ``rounding`` applies to
    gradient operands; ``forward_rounding`` (default: same as ``rounding``)
    to weights and activations.
    """

    enabled: bool = True
    block_size: int = DEFAULT_BLOCK
    rounding: RoundingMode = RoundingMode.STOCHASTIC
    forward_rounding: RoundingMode | None = None
    accumulate: str = "bf16"
    accum_chunk: int | None = 64
    decompose_activations: bool = True
    decompose_gradients: bool = True
    sparse_sampling: bool = True
    factor_blocking: str = "row"
    tensor_scale: bool = False

    def __post_init__(self):
        if self.factor_blocking not in ("row", "column"):
            raise ValueError(f"factor_blocking must be 'row' or 'column', got {self.factor_blocking!r}")

    @classmethod
    def oracle(cls, **kw) -> "QuantConfig":
        return cls(enabled=False, accumulate="wide", **kw)

    def rounding_for(self, role: str) -> RoundingMode:
        if role in _GRADIENT_ROLES or self.forward_rounding is None:
            return self.rounding
        return self.forward_rounding

    def mm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return gemm(a, b, self.accumulate, self.accum_chunk)

    def carrier(self, a: np.ndarray) -> np.ndarray:
        return bf16(a) if self.accumulate == "bf16" else a


class Quantizer:
    """Fake-quantizes operands with RNG streams keyed by ``(*key, role)``."""

    def __init__(self, cfg: QuantConfig, key: tuple[int, ...] = (0,)):
        self.cfg = cfg
        self.key = tuple(int(k) for k in key)

    def rng(self, role: str) -> np.random.Generator:
        return np.random.default_rng([*self.key, ROLE_IDS[role]])

    def __call__(self, m: np.ndarray, role: str) -> np.ndarray:
        if not self.cfg.enabled or m.size == 0:
            return m
        mode = self.cfg.rounding_for(role)
        rng = self.rng(role) if mode is RoundingMode.STOCHASTIC else None
        if role in _FACTOR_ROLES and self.cfg.factor_blocking == "column":
            return fake_quantize(m.T, self.cfg.block_size, mode, rng, self.cfg.tensor_scale).T
        return fake_quantize(m, self.cfg.block_size, mode, rng, self.cfg.tensor_scale)


@dataclass(frozen=True)
class MetisWeight:
    """Weight held as ``u @ diag(s) @ v.T + residual``; ``k = 0`` is a dense weight."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    residual: np.ndarray

    def __post_init__(self):
        m, n = self.residual.shape
        k = self.s.shape[0]
        if self.u.shape != (m, k) or self.v.shape != (n, k):
            raise ValueError(f"inconsistent shapes u{self.u.shape} s{self.s.shape} "
                             f"v{self.v.shape} residual{self.residual.shape}")

    @classmethod
    def from_dense(cls, w: np.ndarray, k: int = 0) -> "MetisWeight":
        w = np.asarray(w, dtype=np.float64)
        m, n = w.shape
        if k == 0:
            return cls(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)), w.copy())
        split = split_rank_k(w, k)
        return cls(split.left, split.values, split.right, split.residual)

    @property
    def k(self) -> int:
        return self.s.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.residual.shape

    def dense(self) -> np.ndarray:
        if self.k == 0:
            return self.residual
        return (self.u * self.s) @ self.v.T + self.residual

    def arrays(self) -> dict[str, np.ndarray]:
        return {"u": self.u, "s": self.s, "v": self.v, "residual": self.residual}

    def cast(self, fmt: EmulatedFormat) -> "MetisWeight":
        if fmt is EmulatedFormat.WIDE:
            return self
        # The diagonal is a high-precision parameter and is never narrowed.
        return MetisWeight(_round(self.u, fmt), self.s, _round(self.v, fmt), _round(self.residual, fmt))


def _round(a: np.ndarray, fmt: EmulatedFormat) -> np.ndarray:
    return round_to_format(a, fmt) if a.size else a


class WeightGrads(NamedTuple):
    du: np.ndarray
    ds: np.ndarray
    dv: np.ndarray
    dw_r: np.ndarray


@dataclass
class QuantizedOperandSet:
    """Dequantized GeMM factors cached by ``forward`` for ``backward``.

    Low-rank activation factors are ``None`` when activations were not split.
    """

    x_bar: np.ndarray
    u_bar: np.ndarray
    s: np.ndarray
    v_bar: np.ndarray
    w_r_bar: np.ndarray
    a_bar: np.ndarray | None = None
    lam: np.ndarray | None = None
    b_bar: np.ndarray | None = None
    x_r_bar: np.ndarray | None = None
    key: tuple[int, ...] = (0,)
    extras: dict = field(default_factory=dict)


def decompose(m: np.ndarray, plan: SketchPlan, sampled: bool,
              rng: np.random.Generator) -> SpectralSplit:
    """Scalable split of an activation or gradient matrix."""
    if sampled and plan.sample_ratio < 1:
        return sampled_split(m, plan, rng)
    dim = min(m.shape)
    k = min(plan.k, dim)
    sub = replace(plan, k=k, oversample=min(plan.oversample, dim - k), sample_ratio=1.0)
    return randomized_split(m, sub, rng)


def _check(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise DivergenceError(f"non-finite values in {name}")


def forward(x, w: MetisWeight, plan: SketchPlan, cfg: QuantConfig,
            key: tuple[int, ...] = (0,)) -> tuple[np.ndarray, QuantizedOperandSet]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"input {x.shape} does not match weight {w.shape}")
    _check("input", x)
    q = Quantizer(cfg, key)

    cache = QuantizedOperandSet(x_bar=x, u_bar=w.u, s=w.s, v_bar=w.v, w_r_bar=w.residual, key=q.key)
    if cfg.decompose_activations and plan.k > 0:
        split = decompose(x, plan, cfg.sparse_sampling, q.rng("sketch_x"))
        cache.a_bar = q(split.left, "a")
        cache.lam = split.values
        cache.b_bar = q(split.right, "b")
        cache.x_r_bar = q(split.residual, "x")
        cache.x_bar = cfg.carrier((cache.a_bar * cache.lam) @ cache.b_bar.T + cache.x_r_bar)
    else:
        cache.x_bar = q(x, "x")
    cache.w_r_bar = q(w.residual, "w")
    if w.k:
        cache.u_bar = q(w.u, "u")
        cache.v_bar = q(w.v, "v")

    y = cfg.mm(cache.x_bar, cache.w_r_bar)
    if w.k:
        xu = cfg.mm(cache.x_bar, cache.u_bar)
        y = cfg.carrier(cfg.mm(xu * w.s, cache.v_bar.T) + y)
    return y, cache


def backward(d, cache: QuantizedOperandSet, plan: SketchPlan,
             cfg: QuantConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, du, ds, dv, dw_r)`` for upstream gradient ``d``."""
    d = np.asarray(d, dtype=np.float64)
    l, m = cache.x_bar.shape
    n = cache.w_r_bar.shape[1]
    if d.shape != (l, n):
        raise ValueError(f"gradient {d.shape} does not match cached output shape {(l, n)}")
    _check("output gradient", d)
    q = Quantizer(cfg, cache.key)
    u, s, v, w_r = cache.u_bar, cache.s, cache.v_bar, cache.w_r_bar
    k_w = s.shape[0]

    if cfg.decompose_gradients and plan.k > 0:
        split = decompose(d, plan, cfg.sparse_sampling, q.rng("sketch_d"))
        p = q(split.left, "p")
        t = split.values
        qq = q(split.right, "q")
        d_r = q(split.residual, "d")
    else:
        p, t, qq = np.zeros((l, 0)), np.zeros(0), np.zeros((n, 0))
        d_r = q(d, "d")

    # input gradient: four terms, small products first
    terms = [cfg.mm(d_r, w_r.T)]
    if t.size:
        terms.append(cfg.mm(p, (t[:, None] * qq.T) @ w_r.T))
    if k_w:
        terms.append(cfg.mm(cfg.mm(d_r, v) * s, u.T))
        if t.size:
            terms.append(cfg.mm(p, (t[:, None] * (qq.T @ v)) * s @ u.T))
    dx = terms[0]
    for term in terms[1:]:
        dx = cfg.carrier(dx + term)

    # weight-side gradients share E = Xq^T (Pq T Qq^T + Dq_R)
    xt = cache.x_bar.T
    e = cfg.mm(xt, d_r)
    if t.size:
        e = cfg.carrier(e + cfg.mm(cfg.mm(xt, p) * t, qq.T))
    dw_r = e
    if k_w:
        ev = e @ v
        du = cfg.carrier(ev * s)
        ds = np.einsum("mk,mk->k", u, ev)
        dv = cfg.carrier((e.T @ u) * s)
    else:
        du, ds, dv = np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0))
    return dx, du, ds, dv, dw_r


def dense_forward(x, w: MetisWeight) -> np.ndarray:
    """Float64 reference ``x @ (u diag(s) v^T + residual)``."""
    return np.asarray(x, dtype=np.float64) @ w.dense()


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return param - self.lr * grad


class Adam:
    """Adam with per-parameter state keyed by name."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def begin_step(self) -> None:
        self.t += 1

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        m, v = self.state.get(name, (np.zeros_like(param), np.zeros_like(param)))
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad**2
        self.state[name] = (m, v)
        t = max(self.t, 1)
        m_hat = m / (1 - self.b1**t)
        v_hat = v / (1 - self.b2**t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def apply_updates(w: MetisWeight, grads, lr: float | None = None, *, optimizer=None,
                  name: str = "w", step: int | None = None,
                  master_format: EmulatedFormat = EmulatedFormat.BF16) -> MetisWeight:
    """Update the four branches independently and re-narrow to the master format.

    ``grads`` is ``(du, ds, dv, dw_r)``. Without an optimizer, plain SGD with
    step size ``lr`` is used.
    """
    grads = WeightGrads(*grads)
    for label, g in zip(("du", "ds", "dv", "dw_r"), grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient {label} for {name}", step)
    if optimizer is None:
        if lr is None:
            raise ValueError("either lr or optimizer is required")
        optimizer = SGD(lr)
    new = {}
    for part, g in zip(("u", "s", "v", "residual"), grads):
        old = getattr(w, part)
        new[part] = optimizer.update(f"{name}.{part}", old, g) if old.size else old
    return MetisWeight(**new).cast(EmulatedFormat(master_format))


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    baseline: int
    terms: dict
    overhead: int
    ratio: float

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "terms": dict(self.terms),
                "overhead": self.overhead, "ratio": self.ratio}


def op_counter(l: int, m: int, n: int, k: int, l_k: int | None = None) -> CostReport:
    """Multiply counts of one training step of an (l x m) @ (m x n) GeMM.

    Baseline is forward plus the two backward GeMMs. Overhead collects the
    mixed low-rank products of both passes plus the per-step decomposition of
    activations (``l_k m k``) and output gradients (``l_k n k``).
    """
    if min(l, m, n) <= 0 or k < 0:
        raise ValueError("dimensions must be positive")
    l_k = l if l_k is None else l_k
    terms = {
        "fwd_lmk": l * m * k,
        "fwd_mnk": m * n * k,
        "fwd_lnk": l * n * k,
        "bwd_lmk": l * m * k,
        "bwd_mnk": m * n * k,
        "bwd_lnk": l * n * k,
        "decomp_act_lkmk": l_k * m * k,
        "decomp_grad_lknk": l_k * n * k,
    }
    baseline = 3 * l * m * n
    overhead = sum(terms.values())
    return CostReport(baseline, terms, overhead, overhead / baseline)


class MetisGemm:
    """Training-side wrapper binding a sketch plan and numerics to the
    decomposed forward/backward."""

    def __init__(self, plan: SketchPlan, cfg: QuantConfig):
        self.plan = plan
        self.cfg = cfg

    def forward(self, x, w: MetisWeight, key=(0,)):
        return forward(x, w, self.plan, self.cfg, key)

    def backward(self, d, cache: QuantizedOperandSet):
        dx, du, ds, dv, dw_r = backward(d, cache, self.plan, self.cfg)
        return dx, WeightGrads(du, ds, dv, dw_r)
