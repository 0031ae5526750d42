"""
Timing and accuracy sweeps over generated QP, LP and SOCP families.

For every (family, dims, method) cell the harness generates ``runs`` seeded
instances, times the forward and backward passes separately with
``time.perf_counter`` and compares the backward ``dq`` (``dtheta`` for LP)
against the dense differentiated-KKT oracle. Instance generation, oracle
comparisons and finite-difference audits run outside the timed sections.
"""
from __future__ import annotations

import csv
import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backward import detect_active_set, exact_backward_oracle, gradient_cos_sim
from .exceptions import ActiveSetFlip, DegenerateActiveSetWarning, QpDiffError
from .generators import GenSpec, generate
from .layers import (LpLayerSpec, SocpLayerSpec, _socp_active, qp_layer_backward, qp_layer_forward,
                     socp_exact_oracle, socp_layer_backward, socp_layer_forward)
from .qp import QpProblem, SolverSettings

METHODS = ("BPQP", "ExactOracle")
CSV_FIELDS = ("family", "dims", "method", "fwd_mean", "fwd_std", "bwd_mean", "bwd_std",
              "total_mean", "total_std", "cos_sim_mean", "cos_sim_std", "fd_rel_err", "failures")
# both gradients below this fraction of ||dL/dz|| count as zero (see gradient_cos_sim)
ZERO_GRAD_RTOL = 1e-9


def fd_noise_floor(z, h):
    """
    Size below which a central-difference gradient is rounding noise.

    Each coordinate carries roughly ``eps * |L| / h`` of cancellation error;
    the factor 100 leaves room for the forward solver's own accuracy.
    """
    z = np.asarray(z, dtype=float)
    return 100.0 * np.finfo(float).eps * (1.0 + np.abs(z).sum()) / h * np.sqrt(z.size)


class OnesDotZ:
    """``L(z) = 1'z``, so ``dL/dz`` is the all-ones vector."""

    name = "OnesDotZ"

    def value(self, z):
        return float(np.sum(z))

    def grad(self, z):
        return np.ones_like(np.asarray(z, dtype=float))


LOSSES = {"OnesDotZ": OnesDotZ}


def parse_dims(text, family="QP"):
    """``"100x20"`` -> ``(100, 20, 20)``; ``"500x100x200"`` sets the inequality count."""
    parts = [int(p) for p in str(text).lower().split("x")]
    if family.upper() == "SOCP":
        return (parts[0], 0, 0)
    if len(parts) == 2:
        return (parts[0], parts[1], parts[1])
    if len(parts) == 3:
        return tuple(parts)
    raise ValueError(f"bad dims {text!r}; expected DxM or DxMxN")


def dims_label(dims):
    d, m, n = dims
    if m == 0 and n == 0:
        return str(d)
    return f"{d}x{m}" if m == n else f"{d}x{m}x{n}"


@dataclass(frozen=True)
class BenchConfig:
    families: tuple = ("QP",)
    dims: tuple = ((10, 5, 5),)
    runs: int = 200
    methods: tuple = METHODS
    loss: str = "OnesDotZ"
    seed: int = 0
    out: str = None
    fmt: str = "csv"
    fd_samples: int = 5
    fd_h: float = 1e-5
    parallel: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        fams = tuple(f.upper() for f in self.families)
        if any(f not in ("QP", "LP", "SOCP") for f in fams):
            raise ValueError(f"unknown family in {self.families}")
        if any(m not in METHODS for m in self.methods):
            raise ValueError(f"methods must be a subset of {METHODS}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.fmt not in ("csv", "json"):
            raise ValueError("fmt must be csv or json")
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "dims", tuple(tuple(int(v) for v in d) for d in self.dims))


@dataclass
class BenchRow:
    family: str
    dims: str
    method: str
    fwd_mean: float
    fwd_std: float
    bwd_mean: float
    bwd_std: float
    total_mean: float
    total_std: float
    cos_sim_mean: float
    cos_sim_std: float
    fd_rel_err: float
    failures: int
    instances: list = field(default_factory=list, repr=False)

    def csv_record(self):
        return [getattr(self, k) for k in CSV_FIELDS]


# ---------------------------------------------------------------- per-family passes

def _forward(inst, settings):
    if isinstance(inst, SocpLayerSpec):
        z, _, tape = socp_layer_forward(inst, settings)
        return z, tape
    problem = inst.lower() if isinstance(inst, LpLayerSpec) else inst
    return qp_layer_forward(problem, settings)


def _backward(method, inst, tape, g):
    """dq (or dtheta) from one backward pass of ``method``."""
    sol = tape.solution
    if isinstance(inst, SocpLayerSpec):
        if method == "BPQP":
            return socp_layer_backward(tape, g).dq
        return socp_exact_oracle(inst, sol.z_star, sol.lambda_star, g).dq
    if method == "BPQP":
        return qp_layer_backward(tape, g).dq
    return exact_backward_oracle(tape.problem, sol, g).dq


def _with_q(inst, q):
    if isinstance(inst, SocpLayerSpec):
        return SocpLayerSpec(q, inst.a, inst.b)
    if isinstance(inst, LpLayerSpec):
        return LpLayerSpec(q, inst.A, inst.b, inst.G, inst.h, inst.eps)
    return QpProblem(inst.P, q, inst.A, inst.b, inst.G, inst.c)


def _cost_vector(inst):
    return inst.theta if isinstance(inst, LpLayerSpec) else inst.q


def _active(inst, tape):
    if isinstance(inst, SocpLayerSpec):
        return _socp_active(tape.solution.lambda_star).indices
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateActiveSetWarning)
        return detect_active_set(tape.problem, tape.solution).indices


def finite_difference_audit(problem, loss=None, h=1e-5, dq=None, settings=None) -> float:
    """
    Relative L2 error between the backward ``dq`` and central differences
    of ``loss(z*(q))`` over every coordinate of ``q`` (``theta`` for LP).

    ``dq`` defaults to the BPQP gradient. When ``dq`` is below
    ``1e-9 * ||dL/dz||`` and the differences are below ``fd_noise_floor``
    the error is reported as 0.

    Raises
    ------
    ActiveSetFlip
        If any perturbed solve has a different active set, so the two-sided
        difference straddles a kink.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    loss = loss or OnesDotZ()
    settings = settings or SolverSettings()
    z, tape = _forward(problem, settings)
    base = _active(problem, tape)
    g = loss.grad(z)
    if dq is None:
        dq = _backward("BPQP", problem, tape, g)
    q = np.asarray(_cost_vector(problem), dtype=float)
    fd = np.zeros_like(q)
    for j in range(q.size):
        vals = []
        for sgn in (1.0, -1.0):
            qp = q.copy()
            qp[j] += sgn * h
            inst = _with_q(problem, qp)
            zp, tp = _forward(inst, settings)
            if _active(inst, tp) != base:
                raise ActiveSetFlip(f"active set changes under a {h:g} perturbation of q[{j}]")
            vals.append(loss.value(zp))
        fd[j] = (vals[0] - vals[1]) / (2 * h)
    # a pinned solution (e.g. a vertex) has dq = 0 and differences of pure noise
    if np.linalg.norm(dq) <= ZERO_GRAD_RTOL * np.linalg.norm(g) \
            and np.linalg.norm(fd) <= fd_noise_floor(z, h):
        return 0.0
    scale = max(np.linalg.norm(fd), np.linalg.norm(dq))
    return float(np.linalg.norm(dq - fd) / scale)


# ---------------------------------------------------------------- sweep

def _stats(values):
    if not values:
        return float("nan"), float("nan")
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def _run_cell(cfg: BenchConfig, family, dims, method, settings):
    if family == "SOCP":
        dims = (dims[0], 0, 0)  # one cone, no linear constraints
    spec = GenSpec(family, dims[0], dims[1], dims[2], seed=cfg.seed)
    loss = LOSSES[cfg.loss]()
    instances = [generate(spec, k) for k in range(cfg.runs)]

    # warm-up, not recorded
    try:
        z, tape = _forward(instances[0], settings)
        _backward(method, instances[0], tape, loss.grad(z))
    except QpDiffError:
        pass

    fwd, bwd, tot, cos, fd_errs, rows = [], [], [], [], [], []
    failures = 0
    for k, inst in enumerate(instances):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateActiveSetWarning)
                t0 = time.perf_counter()
                z, tape = _forward(inst, settings)
                t1 = time.perf_counter()
                g = loss.grad(z)
                t2 = time.perf_counter()
                dq = _backward(method, inst, tape, g)
                t3 = time.perf_counter()
        except QpDiffError:
            failures += 1
            rows.append({"instance_id": k, "cos_sim_dq": None, "fd_rel_err": None,
                         "backward_time_s": None, "status": "failed"})
            continue
        fwd.append(t1 - t0)
        bwd.append(t3 - t2)
        tot.append((t1 - t0) + (t3 - t2))

        # accuracy, untimed
        try:
            ref = dq if method == "ExactOracle" else _backward("ExactOracle", inst, tape, g)
            c = gradient_cos_sim(dq, ref, ZERO_GRAD_RTOL * np.linalg.norm(g))
            cos.append(c)
        except QpDiffError:
            c = None
        e = None
        if k < cfg.fd_samples:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DegenerateActiveSetWarning)
                    e = finite_difference_audit(inst, loss, cfg.fd_h, dq=dq, settings=settings)
                fd_errs.append(e)
            except QpDiffError:
                e = None
        rows.append({"instance_id": k, "cos_sim_dq": c, "fd_rel_err": e,
                     "backward_time_s": t3 - t2, "status": "ok"})

    fm, fs = _stats(fwd)
    bm, bs = _stats(bwd)
    tm, ts = _stats(tot)
    cm, cs = _stats(cos)
    fd_mean = float(np.mean(fd_errs)) if fd_errs else float("nan")
    return BenchRow(family, dims_label(dims), method, fm, fs, bm, bs, tm, ts, cm, cs, fd_mean,
                    failures, rows)


def run_benchmark(cfg: BenchConfig, settings: SolverSettings = None) -> list:
    """One ``BenchRow`` per (family, dims, method); failures never abort the sweep."""
    settings = settings or SolverSettings()
    cells = [(fam, dims, method) for fam in cfg.families for dims in cfg.dims
             for method in cfg.methods]
    if cfg.parallel:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(lambda c: _run_cell(cfg, *c, settings), cells))
    return [_run_cell(cfg, *c, settings) for c in cells]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(rows, fmt, path):
    """Write rows as CSV (13 columns) or JSON (rows plus per-instance comparisons)."""
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_FIELDS)
                for r in rows:
                    w.writerow([_fmt(v) for v in r.csv_record()])
        elif fmt == "json":
            payload = [asdict(r) for r in rows]
            path.write_text(json.dumps(payload, indent=1))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path):
    """Parse a CSV report back into a list of dicts (numbers as floats)."""
    with Path(path).open(newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            for k in CSV_FIELDS[3:]:
                rec[k] = int(rec[k]) if k == "failures" else float(rec[k])
            out.append(rec)
    return out
