import math

import numpy as np
import pytest

from onlinecqr.core import QuantileGrid, RecordBatch, h_transform
from onlinecqr.sim import SimDesign, generate_batch


def simulated_batch(n, seed, error_kind="standard_normal", upper=None):
    design = SimDesign.preset(error_kind, n_b=n, seed=seed)
    if upper is not None:
        design = SimDesign(error_kind, n_b=n, seed=seed, censor_upper=upper, target_censor_rate=None)
    elif design.censor_upper is None:
        # calibrated value for the normal design; avoids recalibrating per test
        design = SimDesign(error_kind, n_b=n, seed=seed, censor_upper=2.4247, target_censor_rate=None)
    return generate_batch(design, 0)


def random_batch(rng, n, p=3, censor=0.4):
    z = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    x = np.exp(rng.normal(size=n))
    delta = (rng.uniform(size=n) > censor).astype(int)
    return RecordBatch(x, delta, z)


def naive_cum_weights(batch, grid, coefs, k):
    """At-risk weights for level k from scratch, one record and level at a time."""
    taus = [0.0] + [float(t) for t in grid.taus]
    out = []
    for i in range(batch.n):
        total = h_transform(taus[1]) - h_transform(taus[0])
        for r in range(1, k):
            fitted = sum(batch.z[i, j] * coefs[r - 1][j] for j in range(batch.p))
            if math.log(batch.x[i]) >= fitted:
                total += h_transform(taus[r + 1]) - h_transform(taus[r])
        out.append(total)
    return out


def naive_loss(batch, grid, coefs, k, beta, weights=None):
    cw = naive_cum_weights(batch, grid, coefs, k)
    total = 0.0
    for i in range(batch.n):
        w = 1.0 if weights is None else weights[i]
        fit = sum(batch.z[i, j] * beta[j] for j in range(batch.p))
        d = batch.delta[i]
        total += w * (d * abs(math.log(batch.x[i]) - fit) + d * fit - 2.0 * fit * cw[i])
    return total / batch.n


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def coarse_grid():
    return QuantileGrid.regular(0.05, 0.5)


@pytest.fixture
def fine_grid():
    return QuantileGrid.regular(0.01, 0.5)
