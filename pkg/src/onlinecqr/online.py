"""Renewable estimation over a stream of data blocks.

Between blocks only a :class:`SummaryState` is kept: the cumulative sample
size, the current coefficient path, one weight matrix per grid level and
the two covariance accumulators. A new block is folded in level by level by
minimising

    G(b) = (N_prev / N) (b - b_prev)' Gamma_prev (b - b_prev) + (n / N) l(b)

with an isotropic-quadratic majorize-minimize iteration, where ``l`` is the
block's own grid-level loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .batch import (
    BatchLossContext,
    SolverError,
    batch_loss,
    batch_loss_score,
    batch_scores_many,
    fit_batch,
    fit_batch_context,
)
from .core import BetaPath, DomainError, GammaPath, QuantileGrid, as_batch
from .gamma import GammaError, RelsConfig, per_batch_gammas, rels_gamma
from .variance import (
    CovarianceReport,
    VarianceAccumulator,
    VarianceError,
    combine_covariance,
    resample_batch_variance,
)
from . import variance as _variance

# spawn-key tags for the per-purpose seed streams
SEED_RELS_GLOBAL = 1
SEED_RELS_BATCH = 2
SEED_RESAMPLE = 3


def derive_seed(seed, purpose, batch_index, *rest):
    return np.random.SeedSequence(int(seed), spawn_key=(purpose, int(batch_index)) + tuple(rest))


def derive_rng(seed, purpose, batch_index, *rest):
    return np.random.default_rng(derive_seed(seed, purpose, batch_index, *rest))


class MmError(RuntimeError):
    """MM iteration did not converge.

    Attributes
    ----------
    beta : ndarray
        Last iterate.
    omega : float
        Quadratic coefficient in force at the last step.
    """

    def __init__(self, message, beta=None, omega=float("nan"), level=None):
        super().__init__(message)
        self.beta = beta
        self.omega = omega
        self.level = level


class IngestError(RuntimeError):
    """A block could not be ingested; the previous state is untouched."""

    def __init__(self, message, batch_index=None, level=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.level = level


@dataclass(frozen=True)
class MmConfig:
    omega0: float = 0.5
    lam: float = 2.0
    tol: float = 1e-4
    max_iter: int = 5000
    max_escalations: int = 80
    exact_finish: bool = True

    def __post_init__(self):
        if not self.omega0 > 0:
            raise DomainError("omega0 must be positive")
        if not self.lam > 1:
            raise DomainError("lambda must exceed 1")
        if not self.tol > 0:
            raise DomainError("tol must be positive")
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")


@dataclass(frozen=True)
class OnlineConfig:
    """Everything :func:`ingest_batch` needs besides the data.

    ``resample_S`` is the number of weighted refits per block used for the
    block covariance; ``threads`` parallelises those refits.
    """

    mm: MmConfig = field(default_factory=MmConfig)
    rels: RelsConfig = field(default_factory=RelsConfig)
    resample_S: int = 250
    threads: int = 1


@dataclass(frozen=True)
class SummaryState:
    """Fixed-size summary of every block ingested so far.

    ``gamma_tilde[k]`` stores ``sum_b n_b Gamma_{n_b}(tau_k)``, the bracket
    that the covariance formula inverts, and ``mid_sum[k]`` the matching
    middle term.
    """

    grid: QuantileGrid
    p: int
    cum_n: int
    batch_index: int
    seed: int
    beta: np.ndarray         # (K, p)
    gamma: np.ndarray        # (K, p, p)
    gamma_tilde: np.ndarray  # (K, p, p)
    mid_sum: np.ndarray      # (K, p, p)

    def __post_init__(self):
        K, p = self.grid.K, self.p
        if p < 1:
            raise DomainError("p must be positive")
        if self.cum_n < 0 or self.batch_index < 0:
            raise DomainError("cum_n and batch_index must be nonnegative")
        for name, shape in (("beta", (K, p)), ("gamma", (K, p, p)),
                            ("gamma_tilde", (K, p, p)), ("mid_sum", (K, p, p))):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise DomainError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, grid: QuantileGrid, p: int, seed: int = 0) -> "SummaryState":
        K = grid.K
        z2 = np.zeros((K, p, p))
        return cls(grid, p, 0, 0, int(seed), np.zeros((K, p)), z2, z2, z2)

    @property
    def is_empty(self):
        return self.cum_n == 0

    @property
    def beta_path(self) -> BetaPath:
        return BetaPath(self.grid, self.beta)

    @property
    def gamma_path(self) -> GammaPath:
        return GammaPath(self.grid, self.gamma)

    @property
    def accumulator(self) -> VarianceAccumulator:
        return VarianceAccumulator(self.gamma_tilde, self.mid_sum)

    def __eq__(self, other):
        if not isinstance(other, SummaryState):
            return NotImplemented
        return (
            self.grid == other.grid and self.p == other.p and self.cum_n == other.cum_n
            and self.batch_index == other.batch_index and self.seed == other.seed
            and all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("beta", "gamma", "gamma_tilde", "mid_sum"))
        )

    __hash__ = None


def covariance_report(state: SummaryState) -> CovarianceReport:
    if state.is_empty:
        raise DomainError("no data ingested yet")
    return _variance.covariance_report(state.grid, state.accumulator)


# ---------------------------------------------------------------- objective

def _weights(state, ctx):
    total = state.cum_n + ctx.n
    return state.cum_n / total, ctx.n / total


def _check(state, ctx, beta):
    if ctx.p != state.p:
        raise DomainError(f"batch has p={ctx.p}, state has p={state.p}")
    beta = np.ascontiguousarray(beta, dtype=float)
    if beta.shape != (state.p,):
        raise DomainError(f"beta must have length {state.p}")
    return beta


def online_loss(state: SummaryState, ctx: BatchLossContext, k: int, beta) -> float:
    """``G_k`` for the incoming block at level ``k``."""
    beta = _check(state, ctx, beta)
    a, b = _weights(state, ctx)
    value = b * batch_loss(ctx, k, beta)
    if a:
        diff = beta - state.beta[k - 1]
        value += a * float(diff @ state.gamma[k - 1] @ diff)
    return value


def online_score(state: SummaryState, ctx: BatchLossContext, k: int, beta) -> np.ndarray:
    """``H_k``; half the gradient of :func:`online_loss` away from kinks."""
    return online_loss_score(state, ctx, k, beta)[1]


def online_loss_score(state, ctx, k, beta):
    beta = _check(state, ctx, beta)
    a, b = _weights(state, ctx)
    loss, score = batch_loss_score(ctx, k, beta)
    loss *= b
    score = b * score
    if a:
        diff = beta - state.beta[k - 1]
        g_diff = state.gamma[k - 1] @ diff
        loss += a * float(diff @ g_diff)
        score += a * g_diff
    return loss, score


def online_scores_many(state, ctx, k, betas):
    """:func:`online_score` at each row of ``betas``."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    a, b = _weights(state, ctx)
    out = b * batch_scores_many(ctx, k, betas)
    if a:
        out += a * (betas - state.beta[k - 1]) @ state.gamma[k - 1].T
    return out


def surrogate(g_value, h_value, omega, beta_t, beta):
    """Isotropic quadratic majorant anchored at ``beta_t``.

    ``g_value``/``h_value`` are the objective and score at ``beta_t``.
    Touches the objective there; its minimiser is ``beta_t - 2 h / omega``.
    """
    step = np.asarray(beta, dtype=float) - beta_t
    return g_value + 2.0 * float(h_value @ step) + 0.5 * omega * float(step @ step)


@dataclass
class MmTrace:
    iterations: int = 0
    escalations: int = 0
    omega: float = float("nan")
    objective: list = field(default_factory=list)
    stalled: bool = False


def mm_minimize(state: SummaryState, ctx: BatchLossContext, k: int, init, cfg: MmConfig = MmConfig(),
                full_output=False):
    """Minimise ``G_k`` by majorize-minimize from ``init``.

    Each iteration starts from ``omega0`` and multiplies by ``lam`` until
    the surrogate lies above the objective at the candidate. Stops once the
    accepted step is at most ``tol``; a step that would only be accepted
    after shrinking below ``tol`` counts as convergence in place.

    Returns the estimate, plus an :class:`MmTrace` when ``full_output``.
    """
    beta = _check(state, ctx, init)
    if not np.all(np.isfinite(beta)):
        raise DomainError("init must be finite")
    trace = MmTrace()
    g, h = online_loss_score(state, ctx, k, beta)
    trace.objective.append(g)
    for it in range(1, cfg.max_iter + 1):
        if not np.all(np.isfinite(h)):
            raise MmError(f"level {k}: non-finite score", beta=beta, level=k)
        h_norm = float(np.linalg.norm(h))
        omega = cfg.omega0
        accepted = None
        for _ in range(cfg.max_escalations + 1):
            cand = beta - (2.0 / omega) * h
            step = (2.0 / omega) * h_norm
            g_cand, h_cand = online_loss_score(state, ctx, k, cand)
            if surrogate(g, h, omega, beta, cand) >= g_cand:
                accepted = (cand, g_cand, h_cand, step)
                break
            if step <= cfg.tol:
                break
            omega *= cfg.lam
            trace.escalations += 1
        trace.iterations = it
        trace.omega = omega
        if accepted is None:
            # any admissible move is already below tolerance
            trace.stalled = True
            break
        beta, g, h, step = accepted
        trace.objective.append(g)
        if step <= cfg.tol:
            break
    else:
        raise MmError(
            f"level {k}: no convergence in {cfg.max_iter} iterations (omega={trace.omega:g})",
            beta=beta, omega=trace.omega, level=k,
        )
    return (beta, trace) if full_output else beta


def _independent_of(rows, cand, rtol=1e-9):
    if not rows:
        return True
    basis = np.array(rows)
    resid = cand - basis.T @ np.linalg.lstsq(basis.T, cand, rcond=None)[0]
    return np.linalg.norm(resid) > rtol * (1.0 + np.linalg.norm(cand))


def exact_minimize(state: SummaryState, ctx: BatchLossContext, k: int, start, max_steps=None):
    """Exact minimiser of ``G_k`` by an active-set walk from ``start``.

    ``G_k`` is a strictly convex quadratic plus a weighted sum of absolute
    residuals. The walk keeps a set of records whose residual is pinned at
    zero, jumps to the minimiser of the quadratic piece on that face, and
    line-searches the piecewise-quadratic restriction exactly. A pinned
    record is released when its multiplier leaves ``[-1, 1]``. The objective
    never increases, so ``start`` is returned unchanged if it is optimal.
    """
    beta = _check(state, ctx, start).copy()
    ctx._check_level(k)
    p = state.p
    a = state.cum_n / (state.cum_n + ctx.n)
    kappa = 1.0 / (state.cum_n + ctx.n)
    hess = 2.0 * a * state.gamma[k - 1]
    center = state.beta[k - 1]
    keep = np.flatnonzero((ctx.delta == 1.0) & (ctx.w > 0.0))
    zu, yu, u = ctx.z[keep], ctx.y[keep], ctx.w[keep]
    lin = (ctx.w * (ctx.delta - 2.0 * ctx.cum_weights)) @ ctx.z
    eps = 1e-10 * (1.0 + (np.max(np.abs(yu)) if yu.size else 0.0))
    if max_steps is None:
        max_steps = 20 * (len(yu) + p) + 100

    def objective(b):
        diff = b - center
        return 0.5 * float(diff @ hess @ diff) + kappa * (
            float(u @ np.abs(yu - zu @ b)) + float(lin @ b))

    resid = yu - zu @ beta
    active = []
    for i in np.flatnonzero(np.abs(resid) <= eps):
        if len(active) < p and _independent_of([zu[j] for j in active], zu[i]):
            active.append(int(i))
    best = objective(beta)
    for _ in range(max_steps):
        free = np.ones(len(yu), dtype=bool)
        free[active] = False
        sign = np.where(free, np.sign(resid) * (np.abs(resid) > eps), 0.0)
        c_free = lin - (u * sign) @ zu
        m = len(active)
        kkt = np.zeros((p + m, p + m))
        kkt[:p, :p] = hess
        rhs = np.empty(p + m)
        rhs[:p] = hess @ center - kappa * c_free
        if m:
            za = zu[active]
            kkt[:p, p:] = -za.T
            kkt[p:, :p] = za
            rhs[p:] = yu[active]
        sol = np.linalg.solve(kkt, rhs)
        target, mult = sol[:p], sol[p:] / (kappa * u[active]) if m else np.empty(0)
        direction = target - beta
        if np.linalg.norm(direction) <= 1e-13 * (1.0 + np.linalg.norm(beta)):
            over = np.abs(mult) - 1.0
            if m == 0 or over.max() <= 1e-9:
                return beta
            active.pop(int(np.argmax(over)))
            continue
        slope_a = zu @ direction
        moving = free & (np.abs(slope_a) > 0.0)
        qd = float(direction @ hess @ direction)
        # directional derivative just after t = 0
        after = np.where(np.abs(resid) > eps, np.sign(resid), -np.sign(slope_a))
        slope = float(direction @ hess @ (beta - center)) + kappa * (
            float(lin @ direction) - float(np.sum((u * after * slope_a)[moving])))
        if slope >= 0.0:
            # blocked by a zero-residual record outside the active set
            blocked = [int(i) for i in np.flatnonzero(moving & (np.abs(resid) <= eps))]
            added = False
            for i in blocked:
                if len(active) < p and _independent_of([zu[j] for j in active], zu[i]):
                    active.append(i)
                    added = True
                    break
            if not added:
                return beta
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            knots = np.where(moving & (np.abs(resid) > eps), resid / slope_a, np.inf)
        order = np.flatnonzero((knots > 0.0) & np.isfinite(knots))
        order = order[np.lexsort((order, knots[order]))]
        t_prev, step, hit = 0.0, None, None
        for i in order:
            t_i = knots[i]
            t_star = t_prev - slope / qd
            if t_star <= t_i:
                step = t_star
                break
            slope += qd * (t_i - t_prev) + 2.0 * kappa * u[i] * abs(slope_a[i])
            t_prev = t_i
            if slope >= 0.0:
                step, hit = t_i, int(i)
                break
        if step is None:
            step = t_prev - slope / qd
        cand = beta + step * direction
        value = objective(cand)
        if value > best + 1e-14 * (1.0 + abs(best)):
            return beta
        beta, best = cand, value
        resid = yu - zu @ beta
        if hit is not None:
            resid[hit] = 0.0
            if len(active) < p and _independent_of([zu[j] for j in active], zu[hit]):
                active.append(hit)
    return beta


# ------------------------------------------------------------------- ingest

@dataclass
class LevelDiagnostics:
    tau: float
    mm_iterations: int = 0
    escalations: int = 0
    omega: float = float("nan")
    stale: bool = False
    rels_cond: float = float("nan")
    batch_rels_cond: float = float("nan")
    beta_norm: float = float("nan")
    resample_survivors: int = 0


@dataclass
class IngestResult:
    state: SummaryState
    report: CovarianceReport
    levels: list  # LevelDiagnostics per grid level
    batch_path: BetaPath


def _batch_pieces(batch, grid, path, seed, batch_index, cfg):
    """Per-block weight matrices and resampling covariance."""
    mats, conds = per_batch_gammas(
        batch, path, cfg.rels,
        lambda k: derive_rng(seed, SEED_RELS_BATCH, batch_index, k),
    )
    V, survivors = resample_batch_variance(
        batch, grid, cfg.resample_S, derive_seed(seed, SEED_RESAMPLE, batch_index),
        return_survivors=True, threads=cfg.threads,
    )
    return mats, conds, V, survivors


def ingest_batch_with_diagnostics(state: SummaryState, records, config: OnlineConfig = OnlineConfig()):
    """Fold one block into ``state``; returns an :class:`IngestResult`.

    ``state`` itself is never modified.
    """
    batch = as_batch(records)
    grid = state.grid
    if batch.p != state.p:
        raise IngestError(
            f"batch has {batch.p} covariates (with intercept), state has {state.p}",
            batch_index=state.batch_index + 1,
        )
    B = state.batch_index + 1
    seed = state.seed
    n_new = state.cum_n + batch.n
    diags = [LevelDiagnostics(float(t)) for t in grid.taus]
    try:
        if state.is_empty:
            path = fit_batch(batch, grid)
            beta = path.coefs.copy()
            mats, conds, V, survivors = _batch_pieces(batch, grid, path, seed, B, config)
            gamma = mats
            for k, d in enumerate(diags):
                d.rels_cond = d.batch_rels_cond = conds[k]
        else:
            beta, gamma = _online_levels(state, batch, config, B, diags)
            path = BetaPath(grid, fit_batch_context(BatchLossContext(batch, grid)))
            mats, conds, V, survivors = _batch_pieces(batch, grid, path, seed, B, config)
            for k, d in enumerate(diags):
                d.batch_rels_cond = conds[k]
        report, acc = combine_covariance(state.accumulator, batch.n * mats, V, grid)
    except (SolverError, GammaError, VarianceError, MmError) as exc:
        level = getattr(exc, "level", None)
        where = f"batch {B}" + (f", level {level}" if level else "")
        raise IngestError(f"{where}: {exc}", batch_index=B, level=level) from exc
    for k, d in enumerate(diags):
        d.beta_norm = float(np.linalg.norm(beta[k]))
        d.resample_survivors = int(survivors[k])
    new = SummaryState(grid, state.p, n_new, B, seed, beta, gamma, acc.gamma_tilde_cum, acc.mid_sum)
    return IngestResult(new, report, diags, path)


def ingest_batch(state: SummaryState, records, config: OnlineConfig = OnlineConfig()) -> SummaryState:
    return ingest_batch_with_diagnostics(state, records, config).state


def _online_levels(state, batch, config, B, diags):
    grid = state.grid
    ctx = BatchLossContext(batch, grid)
    K, p = grid.K, state.p
    beta = np.empty((K, p))
    gamma = np.empty((K, p, p))
    n_new = state.cum_n + batch.n
    root = math.sqrt(n_new)
    for k in range(1, K + 1):
        d = diags[k - 1]
        start = state.beta[k - 1]
        try:
            est, trace = mm_minimize(state, ctx, k, start, config.mm, full_output=True)
            d.mm_iterations, d.escalations, d.omega = trace.iterations, trace.escalations, trace.omega
            if config.mm.exact_finish:
                est = exact_minimize(state, ctx, k, est)
        except MmError as exc:
            est = start.copy()
            d.stale = True
            d.omega = exc.omega
            d.mm_iterations = config.mm.max_iter
        beta[k - 1] = est
        gamma[k - 1], info = rels_gamma(
            lambda pts: root * online_scores_many(state, ctx, k, pts),
            est, n_new, config.rels, rng=derive_rng(state.seed, SEED_RELS_GLOBAL, B, k),
            vectorized=True, return_info=True,
        )
        d.rels_cond = info["cond"]
        ctx.advance(est)
    return beta, gamma


def run_stream(batches, grid: QuantileGrid, seed=0, config: OnlineConfig = OnlineConfig(),
               state: SummaryState | None = None):
    """Ingest ``batches`` in order; returns the final :class:`IngestResult`."""
    result = None
    for records in batches:
        batch = as_batch(records)
        if state is None:
            state = SummaryState.empty(grid, batch.p, seed)
        result = ingest_batch_with_diagnostics(state, batch, config)
        state = result.state
    if result is None:
        raise DomainError("no batches given")
    return result
