import math

import numpy as np
import pytest
from scipy.optimize import linprog

from onlinecqr.batch import (
    BatchLossContext,
    UnboundedLossError,
    batch_loss,
    batch_score,
    batch_scores_many,
    fit_batch,
    minimize_batch_level,
    pooled,
)
from onlinecqr.core import DomainError, QuantileGrid, RecordBatch
from onlinecqr.sim import SimDesign, true_beta
from onlinecqr.variance import resample_batch_variance

from conftest import naive_cum_weights, naive_loss, random_batch, simulated_batch

E = math.e
ONE = RecordBatch([E], [1], [[1.0]])
HALF = QuantileGrid([0.5])


def ctx_at(batch, grid, coefs, k, weights=None):
    ctx = BatchLossContext(batch, grid, weights)
    for r in range(1, k):
        ctx.advance(coefs[r - 1])
    return ctx


def test_single_record_loss_by_hand():
    ctx = BatchLossContext(ONE, HALF)
    assert batch_loss(ctx, 1, [1.0]) == pytest.approx(1 - 2 * math.log(2), abs=1e-15)
    assert batch_loss(ctx, 1, [1.0]) == pytest.approx(-0.386294, abs=1e-6)
    assert batch_loss(ctx, 1, [0.0]) == pytest.approx(1.0, abs=1e-15)


def test_single_record_score_by_hand():
    ctx = BatchLossContext(ONE, HALF)
    assert batch_score(ctx, 1, [2.0])[0] == pytest.approx(1 - math.log(2), abs=1e-15)
    assert batch_score(ctx, 1, [2.0])[0] == pytest.approx(0.306853, abs=1e-6)
    assert batch_score(ctx, 1, [0.5])[0] == pytest.approx(-math.log(2), abs=1e-15)


def test_initial_cum_weights_and_monotonicity(rng, coarse_grid):
    batch = random_batch(rng, 40)
    path = fit_batch(batch, coarse_grid)
    ctx = BatchLossContext(batch, coarse_grid)
    assert np.allclose(ctx.cum_weights, -math.log(1 - 0.05))
    prev = ctx.cum_weights.copy()
    for k, c in ctx.replay(path):
        assert np.all(c.cum_weights >= prev)
        prev = c.cum_weights.copy()


def test_two_record_mixed_matches_naive():
    batch = RecordBatch([1.3, 0.7], [1, 0], [[1.0, 0.4], [1.0, -0.2]])
    grid = QuantileGrid([0.2, 0.4, 0.6])
    coefs = [[0.1, 0.3], [0.2, 0.1], [0.3, 0.0]]
    for k in (1, 2, 3):
        for beta in ([0.0, 0.0], [0.25, -1.0], [-0.3, 2.0]):
            ctx = ctx_at(batch, grid, coefs, k)
            assert batch_loss(ctx, k, beta) == pytest.approx(
                naive_loss(batch, grid, coefs, k, beta), abs=1e-12)


def test_random_losses_match_naive(rng, coarse_grid):
    batch = random_batch(rng, 25)
    coefs = rng.normal(scale=0.5, size=(coarse_grid.K, 3))
    weights = rng.exponential(size=25)
    for k in (1, 4, 10):
        ctx = ctx_at(batch, coarse_grid, coefs, k, weights)
        assert np.allclose(ctx.cum_weights, naive_cum_weights(batch, coarse_grid, coefs, k), atol=1e-14)
        beta = rng.normal(size=3)
        assert batch_loss(ctx, k, beta) == pytest.approx(
            naive_loss(batch, coarse_grid, coefs, k, beta, weights), abs=1e-12)


def central_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_gradient_is_twice_score(rng, coarse_grid):
    batch = random_batch(rng, 50)
    coefs = rng.normal(scale=0.3, size=(coarse_grid.K, 3))
    checked = 0
    while checked < 30:
        k = int(rng.integers(1, coarse_grid.K + 1))
        ctx = ctx_at(batch, coarse_grid, coefs, k)
        beta = rng.normal(size=3)
        if np.min(np.abs(batch.logx - batch.z @ beta)) < 1e-4:
            continue
        grad = central_gradient(lambda b: batch_loss(ctx, k, b), beta)
        score = batch_score(ctx, k, beta)
        assert np.linalg.norm(grad - 2 * score) <= 1e-5 * max(np.linalg.norm(grad), 1e-8)
        checked += 1


def test_convexity(rng, coarse_grid):
    batch = random_batch(rng, 60)
    coefs = rng.normal(scale=0.3, size=(coarse_grid.K, 3))
    ctx = ctx_at(batch, coarse_grid, coefs, 6)
    for _ in range(200):
        b1, b2 = rng.normal(scale=2, size=(2, 3))
        lam = rng.uniform()
        mix = batch_loss(ctx, 6, lam * b1 + (1 - lam) * b2)
        assert mix <= lam * batch_loss(ctx, 6, b1) + (1 - lam) * batch_loss(ctx, 6, b2) + 1e-12


def test_pooled_loss_decomposes_with_common_plugins(rng, coarse_grid):
    for _ in range(10):
        b1, b2 = random_batch(rng, 30), random_batch(rng, 45)
        coefs = rng.normal(scale=0.4, size=(coarse_grid.K, 3))
        k = int(rng.integers(1, coarse_grid.K + 1))
        beta = rng.normal(size=3)
        whole = batch_loss(ctx_at(pooled([b1, b2]), coarse_grid, coefs, k), k, beta)
        parts = (30 * batch_loss(ctx_at(b1, coarse_grid, coefs, k), k, beta)
                 + 45 * batch_loss(ctx_at(b2, coarse_grid, coefs, k), k, beta)) / 75
        assert whole == pytest.approx(parts, abs=1e-12)


def test_vectorised_scores_match(rng, coarse_grid):
    batch = random_batch(rng, 40)
    ctx = BatchLossContext(batch, coarse_grid, rng.exponential(size=40))
    betas = rng.normal(size=(7, 3))
    many = batch_scores_many(ctx, 1, betas)
    for row, b in zip(many, betas):
        assert np.allclose(row, batch_score(ctx, 1, b), atol=1e-15)


def test_level_order_enforced(rng, coarse_grid):
    ctx = BatchLossContext(random_batch(rng, 10), coarse_grid)
    with pytest.raises(DomainError):
        batch_loss(ctx, 2, np.zeros(3))


def test_one_record_minimiser_against_grid_search():
    grid = QuantileGrid([0.05])
    ctx = BatchLossContext(ONE, grid)
    found = minimize_batch_level(ctx, 1)
    candidates = np.round(np.arange(-3.0, 3.0 + 1e-9, 1e-4), 10)
    values = [batch_loss(ctx, 1, [b]) for b in candidates]
    best = candidates[int(np.argmin(values))]
    assert found[0] == pytest.approx(best, abs=1e-4)
    assert found[0] == pytest.approx(1.0, abs=1e-12)


def test_all_censored_is_unbounded():
    batch = RecordBatch([1.0, 2.0, 3.0], [0, 0, 0], [[1.0], [1.0], [1.0]])
    grid = QuantileGrid([0.1])
    with pytest.raises(UnboundedLossError):
        minimize_batch_level(BatchLossContext(batch, grid), 1)
    with pytest.raises(UnboundedLossError):
        fit_batch(batch, grid)


def highs_minimum(ctx, k):
    keep = ctx.delta == 1
    zu, yu = ctx.z[keep], ctx.y[keep]
    u = ctx.w[keep]
    d = (ctx.w * (ctx.delta - 2 * ctx.cum_weights)) @ ctx.z
    m, p = zu.shape
    res = linprog(np.concatenate([d, u, u]), A_eq=np.hstack([zu, np.eye(m), -np.eye(m)]), b_eq=yu,
                  bounds=[(None, None)] * p + [(0, None)] * (2 * m), method="highs")
    assert res.status == 0
    return res.x[:p]


def test_levels_reach_lp_optimum(rng, coarse_grid):
    for _ in range(15):
        batch = random_batch(rng, int(rng.integers(20, 120)))
        weights = rng.exponential(size=batch.n)
        path = fit_batch(batch, coarse_grid, weights)
        ctx = BatchLossContext(batch, coarse_grid, weights)
        for k, c in ctx.replay(path):
            ref = highs_minimum(c, k)
            ours = batch_loss(c, k, path.coefs[k - 1])
            best = batch_loss(c, k, ref)
            assert ours <= best + 1e-9 * (1 + abs(best))


def test_minimiser_is_directionally_optimal(rng, coarse_grid):
    batch = random_batch(rng, 80)
    ctx = BatchLossContext(batch, coarse_grid)
    beta = minimize_batch_level(ctx, 1)
    base = batch_loss(ctx, 1, beta)
    for j in range(3):
        for sgn in (1, -1):
            step = np.zeros(3)
            step[j] = sgn * 1e-6
            assert batch_loss(ctx, 1, beta + step) >= base - 1e-12


def test_single_level_grid_is_one_weighted_l1_problem(rng):
    batch = random_batch(rng, 60)
    grid = QuantileGrid([0.3])
    path = fit_batch(batch, grid)
    ctx = BatchLossContext(batch, grid)
    assert np.allclose(ctx.cum_weights, -math.log(0.7))
    assert batch_loss(ctx, 1, path.coefs[0]) <= batch_loss(ctx, 1, highs_minimum(ctx, 1)) + 1e-12


def test_level_minimiser_near_truth():
    batch = simulated_batch(200, seed=11)
    grid = QuantileGrid.regular(0.01, 0.5)
    k = grid.index_of(0.3) + 1
    path = fit_batch(batch, grid)
    se = np.sqrt(np.diag(resample_batch_variance(batch, grid, 100, seed=5)[k - 1]))
    truth = true_beta(SimDesign(), 0.3)
    assert np.all(np.abs(path.coefs[k - 1] - truth) <= 2 * se)


def test_warm_start_gives_same_optimum(rng, coarse_grid):
    batch = random_batch(rng, 70)
    path = fit_batch(batch, coarse_grid)
    ctx = BatchLossContext(batch, coarse_grid)
    for k, c in ctx.replay(path):
        fresh = c.copy()
        fresh.basis[:] = -1
        cold = minimize_batch_level(fresh, k, init=np.zeros(3))
        assert batch_loss(c, k, cold) == pytest.approx(batch_loss(c, k, path.coefs[k - 1]), abs=1e-12)
