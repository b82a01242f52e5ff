import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from onlinecqr.core import (
    BetaPath,
    DomainError,
    GammaPath,
    QuantileGrid,
    RecordBatch,
    SubjectRecord,
    counting_indicator,
    eval_path,
    h_transform,
)


def test_h_transform_known_values():
    assert h_transform(0.0) == 0.0
    assert h_transform(0.5) == pytest.approx(math.log(2.0), abs=1e-15)
    getcontext().prec = 40
    reference = float(-(Decimal("0.01").ln()))
    assert h_transform(0.99) == pytest.approx(reference, rel=1e-14)
    assert h_transform(0.99) == pytest.approx(4.60517, abs=1e-5)


@pytest.mark.parametrize("u", [-0.1, 1.0, 1.5, float("nan")])
def test_h_transform_domain(u):
    with pytest.raises(DomainError):
        h_transform(u)


def test_h_transform_vectorised_and_increasing(rng):
    u = np.sort(rng.uniform(0, 0.999, size=500))
    vals = h_transform(u)
    assert np.all(np.diff(vals) > 0)


@pytest.fixture
def two_step():
    return BetaPath(QuantileGrid([0.1, 0.2]), [[1.0, 0.0], [2.0, 0.0]])


@pytest.mark.parametrize("tau, expected", [(0.15, [1, 0]), (0.2, [2, 0]), (0.1, [1, 0])])
def test_eval_path_examples(two_step, tau, expected):
    assert np.array_equal(eval_path(two_step, tau), expected)


@pytest.mark.parametrize("tau", [0.0, -0.1, 0.21, 1.0])
def test_eval_path_domain(two_step, tau):
    with pytest.raises(DomainError):
        eval_path(two_step, tau)


def test_eval_path_right_continuous_at_knots():
    grid = QuantileGrid.regular(0.01, 0.5)
    coefs = np.arange(grid.K * 2, dtype=float).reshape(grid.K, 2)
    path = BetaPath(grid, coefs)
    for k, tau in enumerate(grid.taus):
        assert np.array_equal(eval_path(path, float(tau)), coefs[k])


@pytest.mark.parametrize("x, delta, t, expected", [(2, 1, 3, 1), (2, 0, 3, 0), (2, 1, 2, 1), (2, 1, 1.9, 0)])
def test_counting_indicator(x, delta, t, expected):
    assert counting_indicator(SubjectRecord(x, delta, (1.0, 0.3)), t) == expected


@pytest.mark.parametrize("kwargs", [
    dict(x=0.0, delta=1, z=(1.0,)),
    dict(x=-1.0, delta=1, z=(1.0,)),
    dict(x=1.0, delta=2, z=(1.0,)),
    dict(x=1.0, delta=1, z=(2.0, 0.1)),
    dict(x=1.0, delta=1, z=(1.0, float("inf"))),
    dict(x=float("nan"), delta=1, z=(1.0,)),
])
def test_subject_record_validation(kwargs):
    with pytest.raises(DomainError):
        SubjectRecord(**kwargs)


def test_record_batch_round_trip():
    records = [SubjectRecord(1.5, 1, (1.0, 0.2)), SubjectRecord(0.5, 0, (1.0, -1.0))]
    batch = RecordBatch.from_records(records)
    assert batch.n == 2 and batch.p == 2
    assert list(batch) == records
    assert np.allclose(batch.logx, np.log([1.5, 0.5]))
    assert batch.censoring_rate() == 0.5
    with pytest.raises(ValueError):
        batch.x[0] = 3.0


def test_record_batch_rejects_bad_columns():
    with pytest.raises(DomainError):
        RecordBatch([1.0, 2.0], [1, 0], [[1.0, 0.0]])
    with pytest.raises(DomainError):
        RecordBatch([1.0], [1], [[0.5, 0.0]])


def test_grid_construction_and_mesh():
    grid = QuantileGrid.regular(0.01, 0.5)
    assert grid.K == 50
    assert grid.taus[0] == 0.01 and grid.taus[-1] == 0.5
    assert grid.mesh == pytest.approx(0.01)
    assert QuantileGrid([0.1, 0.4]).mesh == pytest.approx(0.3)
    assert grid.index_of(0.3) == 29
    assert np.allclose(np.cumsum(grid.h_increments()), h_transform(grid.taus))


@pytest.mark.parametrize("taus", [[0.2, 0.1], [0.0, 0.1], [0.1, 1.0], [0.1, 0.1], []])
def test_grid_validation(taus):
    with pytest.raises(DomainError):
        QuantileGrid(taus)


def test_gamma_path_shape_checked():
    grid = QuantileGrid([0.1, 0.2])
    GammaPath(grid, np.zeros((2, 3, 3)))
    with pytest.raises(DomainError):
        GammaPath(grid, np.zeros((3, 3, 3)))
