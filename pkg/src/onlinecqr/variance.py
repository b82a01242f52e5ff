"""Perturbation-resampling covariance per block and its streaming combination."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .batch import BatchLossContext, SolverError, fit_batch_context, minimize_batch_level
from .core import BetaPath, DomainError, QuantileGrid, as_batch

Z_95 = 1.959963984540054


class VarianceError(RuntimeError):
    """Covariance could not be formed at some grid level."""

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


def exponential_weights(rng, n):
    """Mean-one, variance-one resampling weights."""
    return rng.exponential(1.0, size=n)


def _seed_sequences(seed, S):
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(S)


def _replicate_own(batch, grid, w):
    out = np.full((grid.K, batch.p), np.nan)
    try:
        fit_batch_context(BatchLossContext(batch, grid, w), out)
    except SolverError as exc:
        out[max((exc.level or 1) - 1, 0):] = np.nan
    return out


def _replicate_fixed(batch, grid, w, plugin):
    out = np.full((grid.K, batch.p), np.nan)
    ctx = BatchLossContext(batch, grid, w)
    for k, c in ctx.replay(plugin):
        try:
            out[k - 1] = minimize_batch_level(c, k)
        except SolverError:
            # plug-ins do not depend on this replicate, later levels still solve
            c.basis[:] = -1
    return out


def resample_paths(records, grid: QuantileGrid, S: int, seed, weight_sampler=exponential_weights,
                   plugin_path: BetaPath | None = None, threads: int = 1):
    """Refit the block ``S`` times under random record weights.

    By default each replicate walks the grid along its own path, so the at-risk
    weights of replicate ``r`` use replicate ``r``'s lower-level estimates. With
    ``plugin_path`` every replicate uses those fixed lower-level estimates
    instead. Failed levels are NaN; in the default mode a failure also blanks
    every later level of that replicate.

    Returns
    -------
    ndarray, shape (S, K, p)
    """
    batch = as_batch(records)
    weights = [weight_sampler(np.random.default_rng(sq), batch.n) for sq in _seed_sequences(seed, S)]
    if plugin_path is None:
        def job(w):
            return _replicate_own(batch, grid, w)
    else:
        def job(w):
            return _replicate_fixed(batch, grid, w, plugin_path)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(job, weights))
    else:
        rows = [job(w) for w in weights]
    return np.stack(rows) if rows else np.empty((0, grid.K, batch.p))


def sample_covariance(paths, min_survivors):
    """Per-level covariance of replicate paths, ignoring NaN rows."""
    S, K, p = paths.shape
    cov = np.empty((K, p, p))
    survivors = np.empty(K, dtype=int)
    for k in range(K):
        rows = paths[:, k, :]
        rows = rows[np.all(np.isfinite(rows), axis=1)]
        survivors[k] = rows.shape[0]
        if rows.shape[0] < min_survivors:
            raise VarianceError(
                f"level {k + 1}: only {rows.shape[0]} of {S} resampled fits survived",
                level=k + 1,
            )
        centered = rows - rows.mean(axis=0)
        cov[k] = centered.T @ centered / (rows.shape[0] - 1)
    return cov, survivors


def resample_batch_variance(records, grid: QuantileGrid, S: int = 250, seed=0,
                            weight_sampler=exponential_weights, return_survivors=False,
                            plugin_path: BetaPath | None = None, threads: int = 1):
    """Covariance ``V_{n_b}`` of a block's own estimator at every level.

    Returns a ``(K, p, p)`` array (and the per-level survivor counts when
    ``return_survivors``).
    """
    if S < 2:
        raise DomainError("need at least two resamples")
    batch = as_batch(records)
    paths = resample_paths(batch, grid, S, seed, weight_sampler, plugin_path, threads)
    cov, survivors = sample_covariance(paths, max(batch.p + 1, S // 2))
    if return_survivors:
        return cov, survivors
    return cov


@dataclass(frozen=True)
class VarianceAccumulator:
    """Running sums kept between batches.

    ``gamma_tilde_cum[k]`` is ``sum_b n_b Gamma_{n_b}(tau_k)`` and
    ``mid_sum[k]`` is ``sum_b Gt_b V_b Gt_b`` with ``Gt_b = n_b Gamma_{n_b}``.
    """

    gamma_tilde_cum: np.ndarray
    mid_sum: np.ndarray

    @classmethod
    def empty(cls, K, p):
        return cls(np.zeros((K, p, p)), np.zeros((K, p, p)))

    @property
    def is_empty(self):
        return not np.any(self.gamma_tilde_cum)


@dataclass(frozen=True)
class CovarianceReport:
    grid: QuantileGrid
    cov: np.ndarray   # (K, p, p)
    se: np.ndarray    # (K, p)

    def intervals(self, beta, z=Z_95):
        """Normal-approximation bounds ``beta -/+ z * se``, each ``(K, p)``."""
        beta = np.asarray(beta, dtype=float)
        return beta - z * self.se, beta + z * self.se


def _report(grid, cov):
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    se = np.sqrt(np.clip(np.diagonal(cov, axis1=1, axis2=2), 0.0, None))
    return CovarianceReport(grid, cov, se)


def sandwich(gamma_tilde_cum, mid_sum, eig_rtol=1e-12):
    """``A^{-1} M A^{-1}`` per level, refusing near-singular ``A``."""
    K = gamma_tilde_cum.shape[0]
    cov = np.empty_like(mid_sum)
    for k in range(K):
        a = 0.5 * (gamma_tilde_cum[k] + gamma_tilde_cum[k].T)
        vals = np.linalg.eigvalsh(a)
        if not vals[0] > eig_rtol * max(vals[-1], 0.0) or vals[-1] <= 0:
            raise VarianceError(
                f"level {k + 1}: weight matrix is near singular (min eigenvalue {vals[0]:.3g})",
                level=k + 1,
            )
        a_inv = np.linalg.inv(a)
        cov[k] = a_inv @ mid_sum[k] @ a_inv
    return cov


def combine_covariance(acc: VarianceAccumulator, gamma_tilde_B, V_B, grid: QuantileGrid):
    """Fold one block into the accumulator and report the updated covariance.

    Parameters
    ----------
    acc : VarianceAccumulator
        Sums over earlier blocks.
    gamma_tilde_B : ndarray, shape (K, p, p)
        ``n_B * Gamma_{n_B}`` for the new block.
    V_B : ndarray, shape (K, p, p)
        Resampling covariance of the new block's own estimator.
    """
    gamma_tilde_B = np.asarray(gamma_tilde_B, dtype=float)
    V_B = np.asarray(V_B, dtype=float)
    middle = np.einsum("kij,kjl,klm->kim", gamma_tilde_B, V_B, gamma_tilde_B)
    new = VarianceAccumulator(acc.gamma_tilde_cum + gamma_tilde_B, acc.mid_sum + middle)
    cov = sandwich(new.gamma_tilde_cum, new.mid_sum)
    if acc.is_empty:
        # the sandwich collapses to V_B; skip the rounding of A^{-1} A V A A^{-1}
        cov = V_B.copy()
    return _report(grid, cov), new


def covariance_report(grid, acc: VarianceAccumulator) -> CovarianceReport:
    return _report(grid, sandwich(acc.gamma_tilde_cum, acc.mid_sum))
