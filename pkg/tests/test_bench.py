import csv
import io

import numpy as np
import pytest

from invflow.bench import (
    CSV_FIELDS,
    bench_inverse,
    bench_sampling,
    checksum,
    dense_lu_inverse,
    median_time,
    stage_count_line,
)
from invflow.invconv import conv_inverse
from invflow.model import ModelConfig
from invflow.tensor import MaskedKernel


def test_median_time_excludes_warmup():
    calls = []
    median_time(lambda: calls.append(1), repeats=3, warmup=2)
    assert len(calls) == 5


def test_dense_lu_matches_diagonal(rng):
    K = MaskedKernel.random(2, 3, rng)
    y = rng.normal(size=(2, 6, 6))
    np.testing.assert_allclose(dense_lu_inverse(y, K), conv_inverse(y, K), atol=1e-10)


def test_checksums_agree_m16():
    rep = bench_inverse([16], [3], [1], repeats=1, warmup=0)
    sums = [rep.get("m16_k3_C1", m).checksum for m in ("dense-lu", "sequential-diag", "parallel-diag")]
    assert sums[0] == pytest.approx(sums[1], rel=1e-9) and sums[1] == sums[2]


def test_dense_skipped_above_limit():
    rep = bench_inverse([48], [2], [2], repeats=1, warmup=0)
    r = rep.get("m48_k2_C2", "dense-lu")
    assert r.status == "skipped(dense)" and r.median_s is None
    assert "skipped(dense)" in rep.to_csv()


def test_csv_schema_and_table():
    rep = bench_inverse([4], [1, 2], [1], repeats=1, warmup=0)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == CSV_FIELDS
    assert len(rows) == 1 + 2 * 3
    assert "sequential-diag" in rep.table()


def test_stage_count_line():
    assert stage_count_line(32) == "m=32: 63 sequential stages"


def test_sampling_records():
    cfg = ModelConfig(levels=1, steps=1, hidden=4, kernel_size=2, input_shape=(1, 8, 8))
    (rec,) = bench_sampling([cfg], batch=2, repeats=1, warmup=0)
    assert rec.sampling_s > 0 and rec.training_s > 0


def test_checksum():
    assert checksum(np.ones((2, 3))) == 6.0


def test_identity_kernel_model_directions_within_2x():
    cfg = ModelConfig(levels=2, steps=4, hidden=8, kernel_size=1, input_shape=(1, 16, 16), identity_init=True)
    (rec,) = bench_sampling([cfg], repeats=7, warmup=2)
    assert rec.training_s / rec.sampling_s < 2 and rec.sampling_s / rec.training_s < 2


def test_sampling_faster_than_training_l2_k4():
    cfg = ModelConfig(levels=2, steps=4, hidden=8, kernel_size=3, input_shape=(1, 16, 16))
    (rec,) = bench_sampling([cfg], repeats=5, warmup=2)
    assert rec.sampling_s < rec.training_s
