"""
Benchmark Sweep
===============

A desk-scale version of the timing and accuracy tables: QPs, smoothed LPs
and single-cone SOCPs at a few sizes, with the BPQP backward pass timed
against the dense differentiated-KKT oracle. The loss is ``L = 1'z*``.

Absolute timings depend on the machine; the ordering (BPQP faster than the
dense oracle from 100x20 up) and the accuracy columns are what carry over.
The same sweep is available from the command line::

    qpdiff bench --family qp,lp,socp --dims 10x5,100x20 --runs 50 --out report.csv

Run with ``python demos/bench_sweep.py [out.csv]``.
"""
import sys

from qpdiff import BenchConfig, emit_report, run_benchmark


def main(out="bench_report.csv"):
    cfg = BenchConfig(families=("QP", "LP", "SOCP"), dims=((10, 5, 5), (100, 20, 20)),
                      runs=50, fd_samples=3, seed=0)
    rows = run_benchmark(cfg)
    print(f"{'family':6s} {'dims':>7s} {'method':12s} {'bwd [ms]':>9s} {'cos sim':>9s} "
          f"{'fd err':>9s} {'fail':>4s}")
    for r in rows:
        print(f"{r.family:6s} {r.dims:>7s} {r.method:12s} {r.bwd_mean * 1e3:9.3f} "
              f"{r.cos_sim_mean:9.6f} {r.fd_rel_err:9.1e} {r.failures:4d}")
    emit_report(rows, "csv", out)
    print(f"\nreport written to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
