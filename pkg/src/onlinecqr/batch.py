"""Offline grid-sequential censored quantile regression.

At grid level ``k`` the coefficient vector minimises the convex,
piecewise-linear loss

    l_k(b) = (1/n) sum_i w_i [ delta_i |log x_i - z_i.b| + delta_i z_i.b
                               - 2 z_i.b * cw_i(k) ]

where ``cw_i(k)`` accumulates ``H(tau_{r+1}) - H(tau_r)`` over the earlier
levels ``r < k`` at which record ``i`` is still at risk
(``log x_i >= z_i.b(tau_r)``); the ``r = 0`` term is always counted. Levels
are solved in order because each one feeds the at-risk weights of the next.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from . import kernels
from .core import BetaPath, DomainError, QuantileGrid, RecordBatch, as_batch

#: Pivot cap for one level of the vertex-walking L1 solver.
MAX_PIVOTS = 10_000


class SolverError(RuntimeError):
    """A grid level could not be minimised.

    Attributes
    ----------
    level : int or None
        1-based grid level.
    status : str
        Solver status name.
    beta : ndarray or None
        Best iterate reached.
    score_norm : float
        Norm of the score at ``beta`` (nan when unavailable).
    """

    def __init__(self, message, level=None, status="", beta=None, score_norm=float("nan")):
        super().__init__(message)
        self.level = level
        self.status = status
        self.beta = beta
        self.score_norm = score_norm


class UnboundedLossError(SolverError):
    """The level loss decreases without bound (no minimiser exists)."""


class BatchLossContext:
    """Records, grid and the running at-risk weights for one data block.

    Parameters
    ----------
    records : RecordBatch or iterable of SubjectRecord
    grid : QuantileGrid
    weights : array_like, optional
        Nonnegative per-record multipliers applied to every loss term
        (perturbation resampling). Defaults to ones.

    Notes
    -----
    ``level`` is the 1-based grid level the ``cum_weights`` are current
    for; :meth:`advance` moves to the next level using the coefficient
    estimated at the current one.
    """

    def __init__(self, records, grid: QuantileGrid, weights=None):
        batch = as_batch(records)
        self.batch = batch
        self.grid = grid
        if weights is None:
            w = np.ones(batch.n)
        else:
            w = np.ascontiguousarray(weights, dtype=float)
            if w.shape != (batch.n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise DomainError("weights must be finite, nonnegative and one per record")
        self.w = w
        self.hdiff = grid.h_increments()
        self.cum_weights = np.full(batch.n, self.hdiff[0])
        self.level = 1
        self.basis = np.full(batch.p, -1, dtype=np.intp)
        # records the fit interpolates must stay at risk whatever the rounding
        self._slack = kernels.at_risk_slack(batch.logx)

    @property
    def y(self):
        return self.batch.logx

    @property
    def delta(self):
        return self.batch.delta

    @property
    def z(self):
        return self.batch.z

    @property
    def n(self):
        return self.batch.n

    @property
    def p(self):
        return self.batch.p

    def advance(self, beta_k):
        """Fold level ``self.level``'s estimate into the at-risk weights."""
        k = self.level
        if k >= self.grid.K:
            self.level = k + 1
            return
        at_risk = self.y >= self.z @ np.asarray(beta_k, dtype=float) - self._slack
        self.cum_weights = self.cum_weights + at_risk * self.hdiff[k]
        self.level = k + 1

    def copy(self) -> "BatchLossContext":
        other = object.__new__(BatchLossContext)
        other.batch = self.batch
        other.grid = self.grid
        other.w = self.w
        other.hdiff = self.hdiff
        other.cum_weights = self.cum_weights.copy()
        other.level = self.level
        other.basis = self.basis.copy()
        other._slack = self._slack
        return other

    def replay(self, path: BetaPath):
        """Yield ``(k, ctx)`` for k = 1..K with plug-ins taken from ``path``.

        The context is advanced in place between yields.
        """
        for k in range(1, self.grid.K + 1):
            self._check_level(k)
            yield k, self
            self.advance(path.coefs[k - 1])

    def _check_level(self, k):
        if k != self.level:
            raise DomainError(f"at-risk weights are current for level {self.level}, not {k}")


def _check_beta(ctx, beta):
    beta = np.ascontiguousarray(beta, dtype=float)
    if beta.shape != (ctx.p,):
        raise DomainError(f"beta must have length {ctx.p}")
    return beta


def batch_loss(ctx: BatchLossContext, k: int, beta) -> float:
    """Grid-level loss ``l_k(beta)``, averaged over the records."""
    ctx._check_level(k)
    beta = _check_beta(ctx, beta)
    score = np.empty(ctx.p)
    return kernels.loss_score(ctx.y, ctx.delta, ctx.z, ctx.w, ctx.cum_weights, beta, score)


def batch_score(ctx: BatchLossContext, k: int, beta) -> np.ndarray:
    """Estimating function at level ``k``; half the gradient of the loss."""
    ctx._check_level(k)
    beta = _check_beta(ctx, beta)
    score = np.empty(ctx.p)
    kernels.loss_score(ctx.y, ctx.delta, ctx.z, ctx.w, ctx.cum_weights, beta, score)
    return score


def batch_loss_score(ctx: BatchLossContext, k: int, beta):
    ctx._check_level(k)
    beta = _check_beta(ctx, beta)
    score = np.empty(ctx.p)
    loss = kernels.loss_score(ctx.y, ctx.delta, ctx.z, ctx.w, ctx.cum_weights, beta, score)
    return loss, score


def _linear_term(ctx):
    return (ctx.w * (ctx.delta - 2.0 * ctx.cum_weights)) @ ctx.z


def _uncensored(ctx):
    keep = np.flatnonzero((ctx.delta == 1.0) & (ctx.w > 0.0))
    return np.ascontiguousarray(ctx.z[keep]), ctx.y[keep], ctx.w[keep]


def _lp_objective(zu, yu, u, d, beta):
    return float(np.sum(u * np.abs(yu - zu @ beta)) + d @ beta)


def _solve_lp_highs(zu, yu, u, d):
    """Primal LP through HiGHS; used to certify degenerate vertices."""
    m, p = zu.shape
    cost = np.concatenate([d, u, u])
    eye = np.eye(m)
    a_eq = np.hstack([zu, eye, -eye])
    bounds = [(None, None)] * p + [(0, None)] * (2 * m)
    res = linprog(cost, A_eq=a_eq, b_eq=yu, bounds=bounds, method="highs")
    if res.status == 3:
        return None
    if res.status != 0:
        raise SolverError(f"HiGHS failed: {res.message}", status="highs")
    return res.x[:p]


def _resolve_degenerate(ctx, zu, yu, u, d, vertex):
    """Confirm an edge-optimal degenerate vertex, or replace it."""
    alt = _solve_lp_highs(zu, yu, u, d)
    if alt is None:
        return None
    f_vertex = _lp_objective(zu, yu, u, d, vertex)
    f_alt = _lp_objective(zu, yu, u, d, alt)
    if f_alt < f_vertex - 1e-9 * (1.0 + abs(f_vertex)):
        # fresh basis built around the HiGHS point on the next solve
        ctx.basis[:] = -1
        return alt
    return vertex


def _level_error(ctx, k, status, beta):
    if status == kernels.RANK_DEFICIENT:
        # too few independent uncensored records: unbounded unless HiGHS finds a finite optimum
        zu, yu, u = _uncensored(ctx)
        if zu.shape[0] == 0 or _solve_lp_highs(zu, yu, u, _linear_term(ctx)) is None:
            status = kernels.UNBOUNDED
    name = kernels.STATUS_NAMES.get(status, str(status))
    tau = ctx.grid.taus[k - 1]
    norm = float("nan")
    if beta is not None and np.all(np.isfinite(beta)):
        norm = float(np.linalg.norm(batch_score(ctx, k, beta)))
    cls = UnboundedLossError if status == kernels.UNBOUNDED else SolverError
    return cls(
        f"level {k} (tau={tau:g}): {name}", level=k, status=name, beta=beta, score_norm=norm
    )


def minimize_batch_level(ctx: BatchLossContext, k: int, init=None) -> np.ndarray:
    """Minimise ``l_k`` exactly.

    The piecewise-linear loss is minimised by walking its vertices (each
    vertex interpolates ``p`` uncensored records); the walk is warm-started
    from the context's last basis, or from the records closest to ``init``.
    """
    ctx._check_level(k)
    zu, yu, u = _uncensored(ctx)
    d = _linear_term(ctx)
    beta = np.empty(ctx.p)
    beta0 = np.full(ctx.p, np.nan) if init is None else _check_beta(ctx, init)
    status, _ = kernels.solve_l1(zu, yu, u, d, ctx.basis, beta, beta0, MAX_PIVOTS)
    if status == kernels.DEGENERATE:
        resolved = _resolve_degenerate(ctx, zu, yu, u, d, beta.copy())
        if resolved is None:
            raise _level_error(ctx, k, kernels.UNBOUNDED, beta)
        return resolved
    if status != kernels.OK:
        raise _level_error(ctx, k, status, beta if status == kernels.ITER_CAP else None)
    return beta


def fit_batch_context(ctx: BatchLossContext, coefs=None) -> np.ndarray:
    """Fit every remaining level of ``ctx``; returns the ``(K, p)`` coefficients.

    Uses the compiled sequential kernel and only drops back to Python for
    degenerate vertices. Rows of a caller-supplied ``coefs`` below the
    failing level are valid even when a :class:`SolverError` escapes.
    """
    K = ctx.grid.K
    if coefs is None:
        coefs = np.empty((K, ctx.p))
    beta0 = np.full(ctx.p, np.nan)
    start = ctx.level - 1
    while start < K:
        cw = ctx.cum_weights.copy()
        status, level, _ = kernels.fit_path(
            ctx.y, ctx.delta, ctx.z, ctx.w, ctx.hdiff, start, cw, ctx.basis, coefs,
            beta0, MAX_PIVOTS,
        )
        ctx.cum_weights = cw
        ctx.level = level + 1
        if status == kernels.OK:
            break
        k = level + 1
        if status != kernels.DEGENERATE:
            raise _level_error(ctx, k, status, None)
        zu, yu, u = _uncensored(ctx)
        resolved = _resolve_degenerate(ctx, zu, yu, u, _linear_term(ctx), coefs[level].copy())
        if resolved is None:
            raise _level_error(ctx, k, kernels.UNBOUNDED, coefs[level])
        coefs[level] = resolved
        beta0 = resolved
        ctx.advance(resolved)
        start = level + 1
    return coefs


def fit_batch(records, grid: QuantileGrid, weights=None) -> BetaPath:
    """Grid-sequential estimate of the coefficient path from one data block.

    Applied to pooled data this is the offline benchmark; applied to the
    first batch of a stream it is also the first online estimate.

    Raises
    ------
    SolverError
        When a level fails; later levels depend on it and are not fitted.
    """
    batch = as_batch(records)
    if not np.any(batch.delta == 1.0):
        raise UnboundedLossError("no uncensored records", level=1, status="unbounded")
    ctx = BatchLossContext(batch, grid, weights)
    return BetaPath(grid, fit_batch_context(ctx))


def pooled(batches) -> RecordBatch:
    return RecordBatch.concatenate([as_batch(b) for b in batches])


def batch_scores_many(ctx: BatchLossContext, k: int, betas) -> np.ndarray:
    """Scores at each row of ``betas`` (shape ``(s, p)``); returns ``(s, p)``."""
    ctx._check_level(k)
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    fit = ctx.z @ betas.T
    counted = (ctx.delta == 1.0)[:, None] & (ctx.y[:, None] <= fit)
    resid = ctx.w[:, None] * (counted - ctx.cum_weights[:, None])
    return (resid.T @ ctx.z) / ctx.n
