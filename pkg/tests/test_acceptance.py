"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line to the terminal
before asserting. The Monte Carlo studies (criteria 6 and 7) take several
minutes each on one core; they use every available core.
"""

import math
import os
import time
import tracemalloc

import numpy as np
import pytest
from scipy import stats

from onlinecqr import checkpoint
from onlinecqr.batch import BatchLossContext, batch_loss, batch_score, fit_batch, pooled
from onlinecqr.cli import main as cli_main
from onlinecqr.core import QuantileGrid
from onlinecqr.datafile import write_records
from onlinecqr.gamma import RelsConfig, per_batch_gamma, rels_gamma
from onlinecqr.online import (
    MmConfig,
    OnlineConfig,
    SummaryState,
    ingest_batch,
    mm_minimize,
    online_loss,
    online_score,
    run_stream,
    surrogate,
)
from onlinecqr.sim import SimDesign, generate_batch, run_study, true_beta
from onlinecqr.variance import resample_batch_variance

from conftest import random_batch

GRID = QuantileGrid.regular(0.01, 0.5)
TAUS = (0.1, 0.3, 0.5)
WORKERS = os.cpu_count() or 1


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


def level_ctx(batch, grid, coefs, k):
    ctx = BatchLossContext(batch, grid)
    for r in range(1, k):
        ctx.advance(coefs[r - 1])
    return ctx


def random_state(rng, grid, p=3):
    mats = []
    for _ in range(grid.K):
        a = rng.normal(size=(p, p))
        mats.append(a @ a.T / p + 0.2 * np.eye(p))
    mats = np.array(mats)
    cum_n = int(rng.integers(50, 2000))
    return SummaryState(grid, p, cum_n, 1, 0, rng.normal(scale=0.5, size=(grid.K, p)), mats,
                        cum_n * mats, np.zeros((grid.K, p, p)))


def sim_batch(n, seed, kind="standard_normal"):
    return generate_batch(SimDesign.preset(kind, n_b=n, seed=seed).resolved(), 0)


def test_criterion_1_single_batch_equivalence(verdict):
    batch = sim_batch(500, 101)
    offline = fit_batch(batch, GRID).coefs
    started = time.perf_counter()
    state = ingest_batch(SummaryState.empty(GRID, 3, seed=1), batch, OnlineConfig())
    elapsed = time.perf_counter() - started
    identical = np.array_equal(state.beta, offline)
    ok = identical and elapsed < 5.0
    verdict(1, ok, f"bit-identical={identical}, max|diff|={np.max(np.abs(state.beta - offline)):.1e}, "
                   f"ingest {elapsed:.2f}s (< 5s) at n=500, K=50")
    assert ok


def fd_rel_error(f, score, x, h=1e-6):
    grad = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])
    return np.linalg.norm(grad - 2 * score) / max(np.linalg.norm(grad), 1e-12)


def test_criterion_2_gradient_identities(verdict):
    rng = np.random.default_rng(2)
    grid = QuantileGrid.regular(0.05, 0.5)
    worst_batch = worst_online = 0.0
    done = 0
    while done < 100:
        batch = random_batch(rng, 80)
        state = random_state(rng, grid)
        k = int(rng.integers(1, grid.K + 1))
        ctx = level_ctx(batch, grid, state.beta, k)
        beta = rng.normal(size=3)
        if np.min(np.abs(batch.logx - batch.z @ beta)) < 1e-4:
            continue    # too close to a kink for central differences
        worst_batch = max(worst_batch, fd_rel_error(lambda b: batch_loss(ctx, k, b),
                                                    batch_score(ctx, k, beta), beta))
        worst_online = max(worst_online, fd_rel_error(lambda b: online_loss(state, ctx, k, b),
                                                      online_score(state, ctx, k, beta), beta))
        done += 1
    ok = worst_batch < 1e-5 and worst_online < 1e-5
    verdict(2, ok, f"100 points, max rel error batch {worst_batch:.1e}, online {worst_online:.1e} (< 1e-5)")
    assert ok


def test_criterion_3_pooled_loss_decomposition(verdict):
    rng = np.random.default_rng(3)
    grid = QuantileGrid.regular(0.05, 0.5)
    worst = 0.0
    for _ in range(50):
        n1, n2 = (int(v) for v in rng.integers(10, 150, size=2))
        b1, b2 = random_batch(rng, n1), random_batch(rng, n2)
        coefs = rng.normal(scale=0.4, size=(grid.K, 3))
        k = int(rng.integers(1, grid.K + 1))
        beta = rng.normal(size=3)
        whole = batch_loss(level_ctx(pooled([b1, b2]), grid, coefs, k), k, beta)
        parts = (n1 * batch_loss(level_ctx(b1, grid, coefs, k), k, beta)
                 + n2 * batch_loss(level_ctx(b2, grid, coefs, k), k, beta)) / (n1 + n2)
        worst = max(worst, abs(whole - parts))
    ok = worst <= 1e-12
    verdict(3, ok, f"50 two-batch instances, max |pooled - weighted| = {worst:.1e} (<= 1e-12)")
    assert ok


def test_criterion_4_mm_descent(verdict):
    rng = np.random.default_rng(4)
    grid = QuantileGrid.regular(0.05, 0.5)
    cfg = MmConfig(exact_finish=False)
    worst_rise, worst_touch, max_iters, unconverged = -np.inf, 0.0, 0, 0
    for _ in range(100):
        state = random_state(rng, grid)
        batch = random_batch(rng, int(rng.integers(20, 150)))
        k = int(rng.integers(1, grid.K + 1))
        ctx = level_ctx(batch, grid, state.beta, k)
        start = state.beta[k - 1] + rng.normal(scale=0.3, size=3)
        _, trace = mm_minimize(state, ctx, k, start, cfg, full_output=True)
        worst_rise = max(worst_rise, float(np.max(np.diff(trace.objective), initial=-np.inf)))
        max_iters = max(max_iters, trace.iterations)
        unconverged += trace.iterations > cfg.max_iter
        g = online_loss(state, ctx, k, start)
        h = online_score(state, ctx, k, start)
        worst_touch = max(worst_touch, abs(surrogate(g, h, 0.7, start, start) - g))
    ok = worst_rise <= 1e-12 and unconverged == 0 and worst_touch == 0.0
    verdict(4, ok, f"100 problems, max objective rise {worst_rise:.1e} (<= 1e-12), "
                   f"max iterations {max_iters}/{cfg.max_iter}, surrogate gap at expansion {worst_touch}")
    assert ok


def test_criterion_5_rels_recovery(verdict):
    rng = np.random.default_rng(5)
    planted = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
    centre = np.array([0.1, -0.2, 0.3])
    est = rels_gamma(lambda b: planted @ (20.0 * (b - centre)) + 0.05 * rng.standard_normal(3),
                     centre, 400, RelsConfig(s=5000))
    planted_err = np.linalg.norm(est - planted) / np.linalg.norm(planted)

    # population oracle: central differences of the mean score on 400k records
    # drawn once, with the same records at both ends of each difference
    grid = QuantileGrid([0.3])
    big = SimDesign("standard_normal", n_b=400_000, seed=55, censor_upper=2.4247, target_censor_rate=None)
    ctx = BatchLossContext(generate_batch(big, 0), grid)
    centre = true_beta(SimDesign(), 0.3)
    h = 0.02
    from onlinecqr.batch import batch_scores_many
    scores = batch_scores_many(ctx, 1, np.concatenate([centre + h * np.eye(3), centre - h * np.eye(3)]))
    jac = ((scores[:3] - scores[3:]) / (2 * h)).T
    jac = 0.5 * (jac + jac.T)
    small = sim_batch(5000, 56)
    rels = per_batch_gamma(small, fit_batch(small, grid), 1, RelsConfig(s=1000, seed=3))
    jac_err = np.linalg.norm(rels - jac) / np.linalg.norm(jac)
    ok = planted_err < 0.02 and jac_err < 0.15
    verdict(5, ok, f"planted rel error {planted_err:.4f} (< 0.02, s=5000); "
                   f"population Jacobian rel error {jac_err:.3f} (< 0.15, s=1000, n=5000)")
    assert ok


def study_checks(result):
    est, ses, truth = result.estimates, result.ses, result.truth
    bias = est.mean(axis=0) - truth
    sd = est.std(axis=0, ddof=1)
    ase = ses.mean(axis=0)
    cp = np.mean(np.abs(est - truth) <= 1.959963984540054 * ses, axis=0)
    return bias, sd / ase, cp


def table(result, ratio, cp):
    rows = []
    for i, tau in enumerate(result.taus):
        for j in range(3):
            r = result.rows[i * 3 + j]
            rows.append(f"    tau={tau:.1f} b{j + 1}: bias {r.bias:+.4f} sd {r.sd:.4f} ase {r.ase:.4f} "
                        f"sd/ase {ratio[i, j]:.3f} cp {cp[i, j]:.3f}")
    return "\n".join(rows)


@pytest.mark.slow
def test_criterion_6_normal_design_study(verdict):
    result = run_study(SimDesign.preset("standard_normal", seed=0), 200, TAUS, "online", GRID,
                       threads=WORKERS)
    bias, ratio, cp = study_checks(result)
    bias_ok = np.all(np.abs(bias[:, 1:]) <= 0.03)
    cp_ok = np.all((cp >= 0.90) & (cp <= 0.98))
    ratio_ok = np.all((ratio >= 0.8) & (ratio <= 1.25))
    ok = bool(bias_ok and cp_ok and ratio_ok)
    verdict(6, ok, f"{len(result.estimates)} of 200 replications fitted; bias(b2,b3) ok={bias_ok}, "
                   f"CP in [0.90,0.98] ok={cp_ok}, SD/ASE in [0.8,1.25] ok={ratio_ok}\n"
                   + table(result, ratio, cp))
    assert ok


def monte_carlo_third_coefficient(taus, draws=10_000_000, seed=77):
    rng = np.random.default_rng(seed)
    shifted = rng.standard_normal(draws) - 0.5 * rng.exponential(size=draws)
    return np.array([np.quantile(shifted, t) - stats.norm.ppf(t) for t in taus])


@pytest.mark.slow
def test_criterion_7_heteroscedastic_study(verdict):
    mc_third = monte_carlo_third_coefficient(TAUS)
    design = SimDesign.preset("heteroscedastic_normal", seed=0)
    exact_third = np.array([true_beta(design, t)[2] for t in TAUS])
    truth_gap = float(np.max(np.abs(exact_third - mc_third)))

    result = run_study(design, 200, TAUS, "online", GRID, threads=WORKERS)
    est = result.estimates
    b2_bias = est[:, :, 1].mean(axis=0) - 0.5
    b3_bias = est[:, :, 2].mean(axis=0) - mc_third
    _, ratio, cp = study_checks(result)
    ok = bool(truth_gap < 3e-3 and np.all(np.abs(b2_bias) <= 0.03) and np.all(np.abs(b3_bias) <= 0.03))
    verdict(7, ok, f"{len(est)} of 200 replications fitted; truth vs 1e7-draw oracle gap {truth_gap:.1e}; "
                   f"max |bias b2| {np.max(np.abs(b2_bias)):.4f}, max |bias b3 vs oracle| "
                   f"{np.max(np.abs(b3_bias)):.4f} (<= 0.03)\n" + table(result, ratio, cp))
    assert ok


def test_criterion_8_online_matches_oracle(verdict):
    design = SimDesign.preset("standard_normal", n_b=500, B=5, seed=8).resolved()
    batches = [generate_batch(design, b) for b in range(design.B)]
    online = run_stream(batches, GRID, seed=8).state.beta
    data = pooled(batches)
    oracle = fit_batch(data, GRID).coefs
    pooled_se = np.sqrt(np.diagonal(resample_batch_variance(data, GRID, 250, seed=9), axis1=1, axis2=2))
    idx = [GRID.index_of(t) for t in TAUS]
    z = np.abs(online[idx] - oracle[idx]) / pooled_se[idx]
    ok = bool(np.max(z) <= 3.0)
    verdict(8, ok, f"max |online - oracle| / pooled SE over tau in {TAUS} = {np.max(z):.3f} (<= 3)")
    assert ok


def test_criterion_9_storage(verdict, tmp_path):
    files = []
    for b in range(20):
        path = tmp_path / f"batch{b}.csv"
        write_records(path, sim_batch(400, 900 + b), ["z1", "z2"])
        files.append(str(path))
    flags = ["--resample-s", "40", "--resample-S", "20", "--seed", "9"]

    sizes = []
    ck_in = None
    for b, path in enumerate(files):
        ck_out = tmp_path / f"ck{b}"
        argv = ["fit", *flags, "--batch", path, "--checkpoint-out", str(ck_out), "--out", str(tmp_path / "r")]
        if ck_in:
            argv += ["--checkpoint-in", str(ck_in)]
        assert cli_main(argv) == 0
        sizes.append(os.path.getsize(ck_out))
        ck_in = ck_out
    size_ok = len(set(sizes)) == 1

    def peak_for(paths):
        argv = ["fit", *flags, "--out", str(tmp_path / "m")]
        for p in paths:
            argv += ["--batch", p]
        tracemalloc.start()
        assert cli_main(argv) == 0
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        return peak

    few, many = peak_for(files[:3]), peak_for(files)
    one_batch = 400 * (3 + 2) * 8
    # 17 extra batches retained would add at least 17 * one_batch bytes
    mem_ok = many - few < 4 * one_batch
    ok = size_ok and mem_ok
    verdict(9, ok, f"checkpoint bytes after batches 1..20: {sorted(set(sizes))}; peak memory "
                   f"3 batches {few / 1e6:.2f} MB, 20 batches {many / 1e6:.2f} MB")
    assert ok
