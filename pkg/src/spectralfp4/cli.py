"""Command-line entry point.

Every command writes a JSON report, a CSV series where one exists, and PNG
figures into ``--out``. Exit codes: 0 ok, 2 training diverged, 3 bad config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .engine import op_counter
from .fp4 import dequantize, quantize_nvfp4, zero_fraction
from .harness.analysis import analyze_tensor
from .harness.experiment import ConfigError, ExperimentConfig, Regime, compare_regimes, rank_sweep, run_experiment
from .precision import RoundingMode
from .report_io import (FormatError, ReportEnvelope, emit_report, load_config, load_matrix,
                        write_qtensor)

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_CONFIG = 3
SEED_ENV = "SPECTRALFP4_SEED"

_ROUNDING = {"rtn": RoundingMode.NEAREST_EVEN, "sr": RoundingMode.STOCHASTIC}


def _seed_override() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _load_experiment(path: str | None) -> ExperimentConfig:
    raw = {}
    if path:
        try:
            raw = load_config(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    seed = _seed_override()
    if seed is not None:
        raw["seed"] = seed
    return ExperimentConfig.from_dict(raw)


class _Writer:
    def __init__(self, out: str, stem: str):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stem = stem
        self.paths: list[str] = []

    def path(self, suffix: str) -> str:
        p = str(self.dir / f"{self.stem}{suffix}")
        self.paths.append(p)
        return p

    def write(self, suffix: str, data: bytes) -> None:
        Path(self.path(suffix)).write_bytes(data)

    def envelope(self, kind: str, payload: dict, config: dict | None = None) -> None:
        self.write(".json", emit_report(ReportEnvelope(kind, payload, config or {}), "json"))

    def done(self) -> None:
        for p in self.paths:
            print(p)


def cmd_analyze(args) -> int:
    from .plotting import plot_analysis

    m = load_matrix(args.matrix).data
    k = max(1, int(np.ceil(args.rank_frac * min(m.shape)))) if m.size else 0
    record = analyze_tensor(m, k, bins=args.bins)
    w = _Writer(args.out, "analysis")
    w.envelope("analysis", record, {"matrix": args.matrix, "rank_frac": args.rank_frac, "bins": args.bins})
    w.write(".csv", emit_report({"index": list(range(len(record["spectrum"]))),
                                 "singular_value": record["spectrum"]}, "csv"))
    plot_analysis(record, w.path(".png"))
    w.done()
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .plotting import plot_quantized

    m = load_matrix(args.matrix).data
    mode = _ROUNDING[args.rounding]
    seed = _seed_override()
    seed = args.seed if seed is None else seed
    rng = np.random.default_rng(seed) if mode is RoundingMode.STOCHASTIC else None
    q = quantize_nvfp4(m, args.block_size, mode, rng, tensor_scale=args.tensor_scale)
    deq = dequantize(q)
    norm = np.linalg.norm(m)
    payload = {
        "shape": list(m.shape),
        "block_size": args.block_size,
        "rounding": args.rounding,
        "tensor_scale": q.tensor_scale,
        "rel_error": float(np.linalg.norm(deq - m) / norm) if norm > 0 else 0.0,
        "zero_fraction": zero_fraction(m, q),
    }
    w = _Writer(args.out, "quantize")
    write_qtensor(w.path(".qtensor"), q)
    w.envelope("quantize", payload, {"matrix": args.matrix, "mode": args.mode, "rounding": args.rounding,
                                     "block_size": args.block_size, "seed": seed,
                                     "tensor_scale": args.tensor_scale})
    plot_quantized(m, deq, w.path(".png"))
    w.done()
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_losses

    cfg = _load_experiment(args.config)
    if args.regime:
        cfg = replace(cfg, regime=Regime(args.regime))
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    cfg.validate()
    report = run_experiment(cfg)
    w = _Writer(args.out, "train")
    w.envelope("run", report.to_dict(), cfg.to_dict())
    w.write(".csv", emit_report(report.to_dict(), "csv"))
    plot_losses({cfg.regime.value: report.losses}, w.path(".png"))
    w.done()
    if report.diverged_at is not None:
        print(f"diverged at step {report.diverged_at}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"final eval loss {report.final_eval_loss:.6g}")
    return EXIT_OK


def _diverged(reports) -> list[str]:
    return [str(name) for name, r in reports.items() if r.diverged_at is not None]


def cmd_sweep_rank(args) -> int:
    from .plotting import plot_losses

    cfg = _load_experiment(args.config)
    ranks = [float(r) for r in args.ranks.split(",") if r.strip()]
    res = rank_sweep(cfg, ranks, tolerance=args.tolerance)
    reports = res["reports"]
    finals = [reports[r].final_eval_loss for r in ranks]
    payload = {"ranks": ranks, "final_losses": [None if np.isnan(f) else f for f in finals],
               "relative_spread": res["relative_spread"], "within_tolerance": res["within_tolerance"]}
    w = _Writer(args.out, "sweep_rank")
    if _diverged(reports):
        w.write(".json", (json.dumps({"diverged": _diverged(reports)}) + "\n").encode())
        w.done()
        return EXIT_DIVERGED
    w.envelope("sweep", payload, cfg.to_dict())
    w.write(".csv", emit_report({"rank_frac": ranks, "final_loss": finals}, "csv"))
    plot_losses({f"rank {r:g}": reports[r].losses for r in ranks}, w.path(".png"), "rank sweep")
    w.done()
    return EXIT_OK


def cmd_compare(args) -> int:
    from .plotting import plot_losses

    cfg = _load_experiment(args.config)
    regimes = [Regime(r) for r in args.regimes.split(",")] if args.regimes else list(Regime)
    res = compare_regimes(cfg, regimes)
    reports = res["reports"]
    w = _Writer(args.out, "compare")
    if _diverged(reports):
        w.write(".json", (json.dumps({"diverged": _diverged(reports)}) + "\n").encode())
        w.done()
        return EXIT_DIVERGED
    names = list(reports)
    payload = {"regimes": names,
               "final_losses": {n: reports[n].final_eval_loss for n in names},
               "gaps": res.get("gaps", {})}
    w.envelope("compare", payload, cfg.to_dict())
    w.write(".csv", emit_report({"regime": names,
                                 "final_loss": [reports[n].final_eval_loss for n in names]}, "csv"))
    plot_losses({n: reports[n].losses for n in names}, w.path(".png"), "regime comparison")
    w.done()
    return EXIT_OK


def cmd_cost(args) -> int:
    k = args.k if args.k is not None else max(1, int(np.ceil(0.015 * min(args.m, args.n))))
    l_k = args.l_k if args.l_k is not None else max(1, int(np.ceil(0.01 * args.l)))
    rep = op_counter(args.l, args.m, args.n, k, l_k)
    w = _Writer(args.out, "cost")
    w.envelope("cost", rep.to_dict(), {"l": args.l, "m": args.m, "n": args.n, "k": k, "l_k": l_k})
    w.write(".csv", emit_report({"term": list(rep.terms), "multiplies": list(rep.terms.values())}, "csv"))
    w.done()
    print(f"overhead ratio {rep.ratio:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectralfp4", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="spectrum, elbow and value histograms of a matrix")
    a.add_argument("matrix")
    a.add_argument("--rank-frac", type=float, default=0.015)
    a.add_argument("--bins", type=int, default=64)
    a.set_defaults(func=cmd_analyze)

    q = sub.add_parser("quantize", help="NVFP4-quantize a matrix")
    q.add_argument("matrix")
    q.add_argument("--mode", choices=["nvfp4"], default="nvfp4")
    q.add_argument("--rounding", choices=sorted(_ROUNDING), default="rtn")
    q.add_argument("--block-size", type=int, default=16)
    q.add_argument("--tensor-scale", action="store_true", help="add a per-tensor FP32 scale")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_quantize)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config")
    t.add_argument("--regime", choices=[r.value for r in Regime])
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep-rank", help="train at several rank fractions")
    s.add_argument("--config")
    s.add_argument("--ranks", default="0.015,0.125")
    s.add_argument("--tolerance", type=float, default=0.02)
    s.set_defaults(func=cmd_sweep_rank)

    c = sub.add_parser("compare-regimes", help="train the same configuration under several regimes")
    c.add_argument("--config")
    c.add_argument("--regimes", help="comma-separated subset of " + ",".join(r.value for r in Regime))
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("cost", help="multiply-count overhead of the decomposed GeMM")
    o.add_argument("--l", type=int, default=4096)
    o.add_argument("--m", type=int, default=1024)
    o.add_argument("--n", type=int, default=1024)
    o.add_argument("--k", type=int)
    o.add_argument("--l-k", type=int)
    o.set_defaults(func=cmd_cost)

    for sp in (a, q, t, s, c, o):
        sp.add_argument("--out", default="reports", help="output directory (default: reports)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
