"""Resampling least-squares (ReLS) estimates of the score slope matrix.

Near the root of a scaled score ``W(b) = sqrt(N) * score(b)``,

    W(b_hat + xi / sqrt(N)) ~ Gamma @ xi

for perturbations ``xi``. Drawing ``s`` perturbations and regressing each
component of ``W`` on ``xi`` by ordinary least squares recovers ``Gamma``
row by row, with no density or bandwidth estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .batch import BatchLossContext, batch_scores_many
from .core import BetaPath, DomainError, as_batch


class GammaError(RuntimeError):
    """ReLS could not produce a finite weight matrix."""


@dataclass(frozen=True)
class RelsConfig:
    """ReLS settings.

    Attributes
    ----------
    s : int
        Number of perturbations (at least ``p + 1``).
    seed : int
        Seed for standalone calls; streaming fits derive per-level seeds.
    ridge : float
        Floor applied to the eigenvalues of the symmetrised estimate.
    """

    s: int = 250
    seed: int = 0
    ridge: float = 1e-6

    def __post_init__(self):
        if self.s < 2:
            raise DomainError("s must be at least 2")
        if self.ridge < 0:
            raise DomainError("ridge must be nonnegative")


def condition_psd(mat, ridge):
    """Symmetrise and lift eigenvalues below ``ridge`` up to ``ridge``."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    clipped = int(np.sum(vals < ridge))
    if clipped:
        vals = np.maximum(vals, ridge)
        sym = (vecs * vals) @ vecs.T
        sym = 0.5 * (sym + sym.T)
    return sym, clipped


def rels_gamma(score_fn, beta_hat, n_scale, cfg: RelsConfig = RelsConfig(), rng=None,
               vectorized=False, return_info=False):
    """Estimate the slope matrix of ``score_fn`` at ``beta_hat``.

    Parameters
    ----------
    score_fn : callable
        Scaled score, ``sqrt(N) * S(.)``. Maps a length-p vector to a
        length-p vector, or an ``(s, p)`` array to ``(s, p)`` when
        ``vectorized`` is true.
    beta_hat : array_like
        Point the perturbations are centred on.
    n_scale : int
        ``N``; perturbations are ``xi / sqrt(N)``.
    cfg : RelsConfig
    rng : numpy.random.Generator, optional
        Source of the perturbations; ``default_rng(cfg.seed)`` if omitted.

    Returns
    -------
    ndarray, shape (p, p)
        Symmetric matrix with eigenvalues at least ``cfg.ridge``. With
        ``return_info`` a dict with the condition number and the count of
        clipped eigenvalues is returned as well.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    p = beta_hat.shape[0]
    if cfg.s < p + 1:
        raise DomainError(f"s={cfg.s} must be at least p + 1 = {p + 1}")
    if n_scale <= 0:
        raise DomainError("n_scale must be positive")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    root = math.sqrt(n_scale)

    for attempt in range(2):
        xi = rng.standard_normal((cfg.s, p))
        gram = xi.T @ xi
        if np.linalg.cond(gram) < 1e12:
            break
    else:
        raise GammaError("perturbation design is singular after a redraw")

    points = beta_hat[None, :] + xi / root
    if vectorized:
        resp = np.asarray(score_fn(points), dtype=float)
    else:
        resp = np.array([score_fn(pt) for pt in points], dtype=float)
    if resp.shape != (cfg.s, p):
        raise DomainError(f"score_fn returned shape {resp.shape}, expected {(cfg.s, p)}")
    bad = np.flatnonzero(~np.all(np.isfinite(resp), axis=1))
    if bad.size:
        raise GammaError(f"non-finite score at perturbation {int(bad[0]) + 1}")

    # row l of Gamma is the OLS coefficient of resp[:, l] on xi
    gamma = np.linalg.solve(gram, xi.T @ resp).T
    out, clipped = condition_psd(gamma, cfg.ridge)
    if not return_info:
        return out
    vals = np.linalg.eigvalsh(out)
    return out, {"cond": float(vals[-1] / vals[0]), "clipped": clipped}


def _batch_rels(ctx, k, beta_k, cfg, rng, return_info):
    n = ctx.n
    root = math.sqrt(n)
    return rels_gamma(
        lambda pts: root * batch_scores_many(ctx, k, pts),
        beta_k, n, cfg, rng=rng, vectorized=True, return_info=return_info,
    )


def per_batch_gamma(records, beta_path: BetaPath, k: int, cfg: RelsConfig = RelsConfig(),
                    rng=None):
    """``Gamma_{n_b}`` at level ``k`` from one block and its own path."""
    batch = as_batch(records)
    ctx = BatchLossContext(batch, beta_path.grid)
    for level, c in ctx.replay(beta_path):
        if level == k:
            return _batch_rels(c, k, beta_path.coefs[k - 1], cfg, rng, False)
    raise DomainError(f"level {k} outside 1..{beta_path.grid.K}")


def per_batch_gammas(records, beta_path: BetaPath, cfg: RelsConfig, rng_for_level):
    """All levels at once; ``rng_for_level(k)`` supplies each level's generator.

    Returns ``(mats, conds)`` with shapes ``(K, p, p)`` and ``(K,)``.
    """
    batch = as_batch(records)
    ctx = BatchLossContext(batch, beta_path.grid)
    K, p = beta_path.coefs.shape
    mats = np.empty((K, p, p))
    conds = np.empty(K)
    for k, c in ctx.replay(beta_path):
        mats[k - 1], info = _batch_rels(c, k, beta_path.coefs[k - 1], cfg, rng_for_level(k), True)
        conds[k - 1] = info["cond"]
    return mats, conds
