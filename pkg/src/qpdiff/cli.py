"""Command line entry points: ``gen``, ``bench`` and ``portfolio``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import io
from .bench import BenchConfig, dims_label, emit_report, parse_dims, run_benchmark
from .generators import GenSpec, generate
from .portfolio import TrainConfig, synthetic_panel, train


def _families(text):
    return [f.strip().upper() for f in text.split(",") if f.strip()]


def _kv(text):
    out = {}
    for item in text.split(","):
        if item.strip():
            k, _, v = item.partition("=")
            out[k.strip()] = v.strip()
    return out


def cmd_gen(args):
    dims = parse_dims(args.dims, args.family)
    spec = GenSpec(args.family, *dims, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        name = f"{spec.family.lower()}_{dims_label(dims)}_s{args.seed}_{k:05d}.json"
        io.dump(generate(spec, k), out / name)
    print(f"wrote {args.count} {spec.family} instances to {out}")
    return 0


def cmd_bench(args):
    fams = _families(args.family)
    dims = [d.strip() for d in args.dims.split(",") if d.strip()]
    methods = tuple(m.strip() for m in args.methods.split(","))
    fmt = args.format or ("json" if str(args.out).endswith(".json") else "csv")
    rows = []
    for fam in fams:
        cfg = BenchConfig(families=(fam,), dims=tuple(parse_dims(d, fam) for d in dims),
                          runs=args.runs, methods=methods, seed=args.seed, out=args.out, fmt=fmt,
                          fd_samples=args.fd_samples, parallel=args.parallel)
        rows.extend(run_benchmark(cfg))
    emit_report(rows, fmt, args.out)
    for r in rows:
        print(f"{r.family:5s} {r.dims:>10s} {r.method:12s} bwd {r.bwd_mean:.3e}s "
              f"cos {r.cos_sim_mean:.4f} fd {r.fd_rel_err:.2e} failures {r.failures}")
    return 2 if any(r.failures for r in rows) else 0


def cmd_portfolio(args):
    opts = _kv(args.synthetic)
    panel = synthetic_panel(d=int(opts.get("d", 20)), T=int(opts.get("T", 600)),
                            snr=float(opts.get("snr", 0.3)),
                            market_snr=float(opts.get("market_snr", 0.3)), seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, learning_rate=args.lr,
                      beta=args.beta)
    res = train(panel, cfg, args.mode)
    payload = {"mode": res.mode, "synthetic": opts, "seed": args.seed, "epochs": args.epochs,
               "curves": res.curves, "metrics": res.metrics,
               "weights": res.predictor.weights.tolist(), "skipped_solves": res.skipped}
    Path(args.out).write_text(json.dumps(payload, indent=1))
    print(json.dumps(res.metrics))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="qpdiff", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write generated problems as JSON files")
    g.add_argument("--family", default="qp")
    g.add_argument("--dims", default="10x5")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("bench", help="timing and gradient-accuracy sweep")
    b.add_argument("--family", default="qp")
    b.add_argument("--dims", default="10x5")
    b.add_argument("--runs", type=int, default=200)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--methods", default="BPQP,ExactOracle")
    b.add_argument("--fd-samples", type=int, default=5)
    b.add_argument("--format", choices=("csv", "json"))
    b.add_argument("--parallel", action="store_true",
                   help="run cells concurrently (timings become less reliable)")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("portfolio", help="end-to-end vs two-stage portfolio learning")
    p.add_argument("--synthetic", default="d=20,T=600,snr=0.3")
    p.add_argument("--mode", choices=("e2e", "two-stage"), default="e2e")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_portfolio)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
