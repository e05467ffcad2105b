"""Timing harness: diagonal inverse vs dense LU, sampling vs training direction.

Every case is timed as the median of ``repeats`` runs after ``warmup``
untimed runs.  Outputs are checked against each other (and against the dense
solve where it fits) before any timing is reported.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .invconv import SolveStats, conv_forward, conv_inverse, count_sequential_stages
from .model import FlowModel, ModelConfig
from .tensor import DENSE_LIMIT, MaskedKernel, build_dense_operator, devectorize, vectorize

METHODS = ("dense-lu", "sequential-diag", "parallel-diag")
CSV_FIELDS = ("case", "m", "k", "C", "method", "median_s", "checksum")


def median_time(fn, repeats=5, warmup=2):
    """Median wall time of ``fn()`` over ``repeats`` runs, after ``warmup`` runs."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def checksum(x) -> float:
    return float(np.sum(x))


@dataclass
class BenchRecord:
    case: str
    m: int
    k: int
    C: int
    method: str
    median_s: float | None
    checksum: float | None
    stages: int = 0
    status: str = "ok"


@dataclass
class BenchReport:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            median = r.status if r.median_s is None else f"{r.median_s:.6e}"
            chk = "" if r.checksum is None else f"{r.checksum:.10e}"
            w.writerow([r.case, r.m, r.k, r.C, r.method, median, chk])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'case':<14}{'method':<17}{'median (ms)':>12}{'stages':>8}  checksum"]
        for r in self.records:
            t = r.status if r.median_s is None else f"{1e3 * r.median_s:.3f}"
            chk = "" if r.checksum is None else f"{r.checksum:.6e}"
            lines.append(f"{r.case:<14}{r.method:<17}{t:>12}{r.stages:>8}  {chk}")
        return "\n".join(lines)

    def get(self, case, method):
        for r in self.records:
            if r.case == case and r.method == method:
                return r
        raise KeyError((case, method))

    def speedup(self, case, slow="dense-lu", fast="sequential-diag"):
        return self.get(case, slow).median_s / self.get(case, fast).median_s


def dense_lu_inverse(y, K):
    """Reference solve: materialize the operator, LU-factorize, solve."""
    C, H, W = y.shape
    M = build_dense_operator(K, H, W)
    return devectorize(lu_solve(lu_factor(M), vectorize(y)), C, H, W)


class ChecksumMismatch(AssertionError):
    pass


def bench_inverse(sizes=(16, 32), kernel_sizes=(3,), channels=(1,), repeats=5, warmup=2,
                  threads=2, seed=0, rtol=1e-9) -> BenchReport:
    """Time the three inverse methods on random masked kernels and inputs."""
    rng = np.random.default_rng(seed)
    report = BenchReport()
    for m in sizes:
        for k in kernel_sizes:
            for C in channels:
                case = f"m{m}_k{k}_C{C}"
                K = MaskedKernel.random(C, k, rng, scale=0.2)
                y = rng.normal(size=(C, m, m))
                stages = 1 if k == 1 else count_sequential_stages(m, m)  # k=1 has no spatial coupling
                runs = {
                    "sequential-diag": lambda: conv_inverse(y, K),
                    "parallel-diag": lambda: conv_inverse(y, K, workers=threads),
                }
                outputs = {name: fn() for name, fn in runs.items()}
                st = SolveStats()
                conv_inverse(y, K, stats=st)
                if not np.array_equal(outputs["sequential-diag"], outputs["parallel-diag"]):
                    raise ChecksumMismatch(f"{case}: parallel schedule differs from sequential")
                dense_ok = C * m * m <= DENSE_LIMIT
                if dense_ok:
                    outputs["dense-lu"] = dense_lu_inverse(y, K)
                    ref = outputs["dense-lu"]
                    scale = 1.0 + np.max(np.abs(ref))
                    for name in runs:
                        if np.max(np.abs(outputs[name] - ref)) > rtol * scale:
                            raise ChecksumMismatch(f"{case}: {name} disagrees with the dense solve")
                for method in METHODS:
                    if method == "dense-lu" and not dense_ok:
                        report.records.append(
                            BenchRecord(case, m, k, C, method, None, None, 0, "skipped(dense)")
                        )
                        continue
                    fn = (lambda: dense_lu_inverse(y, K)) if method == "dense-lu" else runs[method]
                    t = median_time(fn, repeats, warmup)
                    n_stages = 1 if method == "dense-lu" else st.stages
                    report.records.append(
                        BenchRecord(case, m, k, C, method, t, checksum(outputs[method]), n_stages)
                    )
                assert st.stages == stages
    return report


@dataclass
class SamplingRecord:
    config: str
    sampling_s: float
    training_s: float


def _invconv_layers(model: FlowModel):
    shapes = {}
    C, H, W = model.config.input_shape
    for level, c in enumerate(model.config.level_channels()):
        H, W = H // 2, W // 2
        shapes[level] = (c, H, W)
    out = []
    for path, layer in model.layers():
        if path.endswith("/invconv"):
            out.append((layer, shapes[int(path.split("/")[0][1:])]))
    return out


def bench_sampling(configs, batch=16, repeats=5, warmup=2, seed=0) -> list[SamplingRecord]:
    """Per-batch wall time of a model's invertible convolutions in both directions.

    Sampling evaluates each layer as a convolution; training evaluates it as
    the triangular solve.
    """
    rng = np.random.default_rng(seed)
    records = []
    for cfg in configs:
        model = FlowModel(cfg)
        layers = _invconv_layers(model)
        inputs = [rng.normal(size=(batch,) + shape) for _, shape in layers]
        kernels = [MaskedKernel(layer.params["weight"]) for layer, _ in layers]

        def sampling():
            for K, x in zip(kernels, inputs):
                conv_forward(x, K)

        def training():
            for K, x in zip(kernels, inputs):
                conv_inverse(x, K)

        st = median_time(sampling, repeats, warmup)
        ft = median_time(training, repeats, warmup)
        name = f"L{cfg.levels}_K{cfg.steps}_k{cfg.kernel_size}_{'x'.join(map(str, cfg.input_shape))}"
        records.append(SamplingRecord(name, st, ft))
    return records


def default_sampling_configs():
    return [
        ModelConfig(levels=2, steps=4, hidden=8, kernel_size=3, input_shape=(1, 16, 16)),
        ModelConfig(levels=1, steps=2, hidden=8, kernel_size=2, input_shape=(1, 16, 16)),
        ModelConfig(levels=2, steps=2, hidden=8, kernel_size=3, input_shape=(3, 32, 32)),
    ]


def stage_count_line(m: int) -> str:
    return f"m={m}: {count_sequential_stages(m, m)} sequential stages"

