"""Experiment configuration, training loop and run reports."""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

import numpy as np

from ..baselines import BF16Gemm, DirectGemm, HadamardGemm
from ..engine import Adam, DivergenceError, MetisGemm, MetisWeight, QuantConfig, SGD, op_counter
from ..precision import EmulatedFormat, RoundingMode
from ..spectral import SketchPlan, default_rank, elbow_fraction, svd_full
from .data import BUILTIN_TEXT, ByteCorpus, PlantedRegression, PlantedTokens
from .models import MLP, TinyTransformer


class Regime(str, Enum):
    BF16 = "BF16"
    FP4_DIRECT = "FP4Direct"
    FP4_HADAMARD = "FP4Hadamard"
    FP4_METIS = "FP4Metis"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "MLP"  # "MLP" or "TinyTransformer"
    d_in: int = 128
    hidden: int = 128
    d_out: int = 128
    layers: int = 2
    heads: int = 4
    ffn: int = 512
    vocab: int = 64
    seq_len: int = 8
    batch: int = 64
    dataset: str = "planted"  # transformer only: "planted" or "text"
    text_path: str | None = None

    def validate(self) -> None:
        if self.kind not in ("MLP", "TinyTransformer"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        for name in ("d_in", "hidden", "d_out", "layers", "heads", "ffn", "vocab", "seq_len", "batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.kind == "TinyTransformer" and self.hidden % self.heads:
            raise ConfigError("model.hidden must be divisible by model.heads")
        if self.dataset not in ("planted", "text"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.kind == "TinyTransformer" and self.dataset == "text" and self.vocab < 256:
            raise ConfigError("byte-level text needs model.vocab >= 256")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    regime: Regime = Regime.FP4_METIS
    rank_frac: float = 0.015
    oversample: int = 8
    sample_ratio: float = 0.25
    power_iters: int = 1
    decompose_weights: bool = True
    decompose_activations: bool = True
    decompose_gradients: bool = True
    sparse_sampling: bool = True
    rounding: RoundingMode = RoundingMode.STOCHASTIC
    forward_rounding: RoundingMode = RoundingMode.NEAREST_EVEN
    accumulate: str = "bf16"
    block_size: int = 16
    tensor_scale: bool = True
    factor_blocking: str = "row"
    steps: int = 2000
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    master_format: EmulatedFormat = EmulatedFormat.BF16
    eval_batches: int = 4
    log_every: int = 0
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        # Accept plain strings for the enum-valued fields.
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "rounding", RoundingMode(self.rounding))
        object.__setattr__(self, "forward_rounding", RoundingMode(self.forward_rounding))
        if isinstance(self.master_format, str):
            object.__setattr__(self, "master_format", EmulatedFormat[self.master_format])
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelSpec(**self.model))

    def validate(self) -> None:
        self.model.validate()
        if not 0 < self.rank_frac <= 0.5:
            raise ConfigError("rank_frac must lie in (0, 0.5]")
        if not 0 < self.sample_ratio <= 1:
            raise ConfigError("sample_ratio must lie in (0, 1]")
        if self.steps < 0 or self.lr < 0 or self.eval_batches < 1:
            raise ConfigError("steps and lr must be non-negative, eval_batches positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.factor_blocking not in ("row", "column"):
            raise ConfigError(f"unknown factor blocking {self.factor_blocking!r}")
        if self.accumulate not in ("bf16", "wide"):
            raise ConfigError(f"unknown accumulation {self.accumulate!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = self.regime.value
        d["rounding"] = self.rounding.value
        d["forward_rounding"] = self.forward_rounding.value
        d["master_format"] = EmulatedFormat(self.master_format).name
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = raw.pop("model", {})
            if not isinstance(model, ModelSpec):
                mk = {f.name for f in fields(ModelSpec)}
                bad = set(model) - mk
                if bad:
                    raise ConfigError(f"unknown model keys: {sorted(bad)}")
                model = ModelSpec(**model)
            if "regime" in raw:
                raw["regime"] = Regime(raw["regime"])
            if "master_format" in raw and isinstance(raw["master_format"], str):
                raw["master_format"] = EmulatedFormat[raw["master_format"]]
            cfg = cls(model=model, **raw)
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def standard_benchmark(seed: int = 0, **overrides) -> ExperimentConfig:
    """The desk-scale MLP regression benchmark: 64-wide two-layer MLP on
    planted anisotropic data (one strong input direction at 20x the weak
    ones), batches of 32 sequences of 8 tokens, 2000 Adam steps."""
    model = ModelSpec(kind="MLP", d_in=64, hidden=64, d_out=64, seq_len=8, batch=32)
    return replace(ExperimentConfig(model=model, steps=2000, seed=seed), **overrides)


def metis_flags_off(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, decompose_weights=False, decompose_activations=False,
                   decompose_gradients=False, sparse_sampling=False)


@dataclass
class RunReport:
    config: dict
    losses: list[float]
    final_train_loss: float
    final_eval_loss: float
    layers: dict
    op_ratio: float
    wall_time: float
    diverged_at: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        # a diverged run has no final losses; reports carry null rather than NaN
        for key in ("final_train_loss", "final_eval_loss"):
            if not math.isfinite(d[key]):
                d[key] = None
        return d


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _name_seed(seed: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{name}".encode())


def layer_rank(cfg: ExperimentConfig, m: int, n: int) -> int:
    return default_rank(m, n, cfg.rank_frac)


def quant_config(cfg: ExperimentConfig) -> QuantConfig:
    return QuantConfig(
        enabled=cfg.regime is not Regime.BF16,
        block_size=cfg.block_size,
        rounding=cfg.rounding,
        forward_rounding=cfg.forward_rounding,
        accumulate=cfg.accumulate,
        decompose_activations=cfg.decompose_activations,
        decompose_gradients=cfg.decompose_gradients,
        sparse_sampling=cfg.sparse_sampling,
        tensor_scale=cfg.tensor_scale,
        factor_blocking=cfg.factor_blocking,
    )


def sketch_plan(cfg: ExperimentConfig, m: int, n: int) -> SketchPlan:
    return SketchPlan(layer_rank(cfg, m, n), cfg.oversample, cfg.sample_ratio, cfg.power_iters,
                      cfg.seed, cfg.model.seq_len)


def _make_weight(cfg: ExperimentConfig):
    def make(name: str, m: int, n: int) -> MetisWeight:
        rng = np.random.default_rng([cfg.seed, _name_seed(0, name)])
        dense = rng.standard_normal((m, n)) / math.sqrt(m)
        k = 0
        if cfg.regime is Regime.FP4_METIS and cfg.decompose_weights:
            k = layer_rank(cfg, m, n)
        return MetisWeight.from_dense(dense, k).cast(EmulatedFormat(cfg.master_format))
    return make


def _make_engine(cfg: ExperimentConfig):
    qcfg = quant_config(cfg)

    def make(name: str, m: int, n: int):
        if cfg.regime is Regime.BF16:
            return BF16Gemm(qcfg)
        if cfg.regime is Regime.FP4_DIRECT:
            return DirectGemm(qcfg)
        if cfg.regime is Regime.FP4_HADAMARD:
            return HadamardGemm(qcfg, seed=_name_seed(cfg.seed, name))
        return MetisGemm(sketch_plan(cfg, m, n), qcfg)
    return make


def build_model(cfg: ExperimentConfig):
    spec = cfg.model
    if spec.kind == "MLP":
        return MLP(spec.d_in, spec.hidden, spec.d_out, _make_weight(cfg), _make_engine(cfg))
    return TinyTransformer(spec.vocab, spec.hidden, spec.ffn, spec.layers, spec.heads, spec.seq_len,
                           _make_weight(cfg), _make_engine(cfg), seed=cfg.seed)


def build_dataset(cfg: ExperimentConfig):
    spec = cfg.model
    if spec.kind == "MLP":
        return PlantedRegression(spec.d_in, spec.d_out, spec.seq_len, seed=cfg.seed, **cfg.data)
    if spec.dataset == "text":
        if spec.text_path:
            return ByteCorpus.from_file(spec.text_path, spec.seq_len, cfg.seed)
        return ByteCorpus(BUILTIN_TEXT, spec.seq_len, cfg.seed)
    return PlantedTokens(spec.vocab, spec.seq_len, seed=cfg.seed, **cfg.data)


def _split_batch(batch):
    return batch if isinstance(batch, tuple) else (batch, None)


def make_optimizer(cfg: ExperimentConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

EVAL_STREAM = 1
_EVAL_KEY_BASE = 1 << 30


def evaluate(model, data, cfg: ExperimentConfig) -> float:
    """Held-out loss through the regime's own (quantized) forward pass."""
    losses = []
    for i in range(cfg.eval_batches):
        x, t = _split_batch(data.batch(i, cfg.model.batch, stream=EVAL_STREAM))
        loss, _ = model.loss_and_grad(x, t, key=(cfg.seed, _EVAL_KEY_BASE + i))
        losses.append(loss)
    return float(np.mean(losses))


def weight_summary(w: MetisWeight) -> dict:
    """Spectral shape of the trained weight and, when split, of its residual."""
    out = {"k": w.k}
    sig = svd_full(w.dense())[0]
    e = elbow_fraction(np.maximum(sig, 1e-300))
    out["dense_elbow_fraction"] = e.fraction
    out["dense_max_curvature"] = e.max_curvature
    if w.k:
        sig_r = svd_full(w.residual)[0]
        er = elbow_fraction(np.maximum(sig_r, 1e-300))
        out["residual_elbow_fraction"] = er.fraction
        out["residual_max_curvature"] = er.max_curvature
        out["s"] = [float(v) for v in w.s]
    return out


def _op_ratio(cfg: ExperimentConfig, model) -> float:
    if cfg.regime is not Regime.FP4_METIS:
        return 0.0
    l = cfg.model.batch * cfg.model.seq_len
    base = over = 0
    for lin in model.linears:
        m, n = lin.weight.shape
        plan = lin.engine.plan
        l_k = l if not cfg.sparse_sampling else max(1, round(cfg.sample_ratio * cfg.model.batch)) * cfg.model.seq_len
        rep = op_counter(l, m, n, plan.k, l_k)
        base += rep.baseline
        over += rep.overhead
    return over / base


def run_experiment(cfg: ExperimentConfig, layer_metrics: bool = True) -> RunReport:
    cfg.validate()
    t0 = time.perf_counter()
    model = build_model(cfg)
    data = build_dataset(cfg)
    opt = make_optimizer(cfg)
    master = EmulatedFormat(cfg.master_format)
    losses: list[float] = []
    diverged = None
    for step in range(cfg.steps):
        x, t = _split_batch(data.batch(step, cfg.model.batch))
        key = (cfg.seed, step)
        try:
            loss, grad = model.loss_and_grad(x, t, key)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite loss", step)
            model.backward(grad)
            model.step(opt, step, master)
        except DivergenceError as exc:
            diverged = step if exc.step is None else exc.step
            break
        losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"step {step:5d} loss {loss:.6g}", flush=True)
    if diverged is None:
        final_eval = evaluate(model, data, cfg)
        tail = losses[-max(1, min(100, len(losses) // 10)):] if losses else [float("nan")]
        final_train = float(np.mean(tail))
    else:
        final_eval = final_train = float("nan")
    layers = {}
    if layer_metrics and diverged is None:
        layers = {lin.name: weight_summary(lin.weight) for lin in model.linears}
    return RunReport(cfg.to_dict(), losses, final_train, final_eval, layers,
                     _op_ratio(cfg, model), time.perf_counter() - t0, diverged)


def rank_sweep(cfg: ExperimentConfig, ranks, tolerance: float = 0.02) -> dict:
    """Train once per rank fraction and check final losses agree above 1.5%."""
    ranks = [float(r) for r in ranks]
    if not ranks:
        raise ConfigError("rank list is empty")
    for r in ranks:
        if not 0 < r <= 0.5:
            raise ConfigError(f"rank fraction {r} outside (0, 0.5]")
    reports = {r: run_experiment(replace(cfg, rank_frac=r)) for r in ranks}
    kept = [reports[r].final_eval_loss for r in ranks if r >= 0.015]
    spread = (max(kept) - min(kept)) / min(kept) if len(kept) > 1 else 0.0
    return {"reports": reports, "relative_spread": spread, "within_tolerance": spread < tolerance}


def compare_regimes(cfg: ExperimentConfig, regimes=tuple(Regime)) -> dict:
    reports = {Regime(r).value: run_experiment(replace(cfg, regime=Regime(r))) for r in regimes}
    out = {"reports": reports}
    if "BF16" in reports:
        base = reports["BF16"].final_eval_loss
        out["gaps"] = {k: r.final_eval_loss - base for k, r in reports.items()}
    return out
