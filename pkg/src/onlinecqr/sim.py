"""Simulation designs and the Monte Carlo harness.

Three accelerated-failure-time designs are available, all with covariates
``Z1 ~ Uniform(0, 1)`` and ``Z2 ~ Bernoulli(0.5)`` and censoring
``C ~ Uniform(0, U_c)``:

``standard_normal``
    ``log T = g1 Z1 + g2 Z2 + e`` with ``e ~ N(0, 1)``.
``extreme_value_scale1``
    Same model with ``e`` the log of an Exponential(1) variable (minimum
    Gumbel), quantile ``log(-log(1 - tau))``.
``heteroscedastic_normal``
    ``log T = g1 Z1 + g2 Z2 zeta + e`` with ``zeta ~ Exponential(1)``, so the
    ``Z2`` coefficient varies with ``tau``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .batch import fit_batch, pooled
from .core import DomainError, QuantileGrid, RecordBatch
from .online import OnlineConfig, IngestError, run_stream
from .batch import SolverError
from .variance import VarianceError, Z_95, _report, resample_batch_variance

ERROR_KINDS = ("standard_normal", "extreme_value_scale1", "heteroscedastic_normal")
DEFAULT_TAUS = (0.1, 0.3, 0.5)
METRICS_HEADER = ("tau", "coef", "bias", "sd", "ase", "cp", "minutes")
PATH_HEADER = ("tau", "coef", "estimate", "lower", "upper", "truth")

# spawn-key tags
_DATA = 10
_FIT = 11
_CALIBRATE = 12


class StudyError(RuntimeError):
    """Too many replications failed."""


@dataclass(frozen=True)
class SimDesign:
    """One simulation setting.

    Exactly one of ``censor_upper`` (``U_c``) and ``target_censor_rate``
    must be given; :meth:`resolved` turns a target rate into ``U_c``.
    """

    error_kind: str = "standard_normal"
    gamma1: float = 0.5
    gamma2: float = -0.5
    n_b: int = 200
    B: int = 5
    censor_upper: float | None = None
    target_censor_rate: float | None = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.error_kind not in ERROR_KINDS:
            raise DomainError(f"unknown design {self.error_kind!r}; choose from {', '.join(ERROR_KINDS)}")
        if (self.censor_upper is None) == (self.target_censor_rate is None):
            raise DomainError("give exactly one of censor_upper and target_censor_rate")
        if self.censor_upper is not None and not self.censor_upper > 0:
            raise DomainError("censor_upper must be positive")
        if self.target_censor_rate is not None and not 0 < self.target_censor_rate < 1:
            raise DomainError("target_censor_rate must lie in (0, 1)")
        if self.n_b < 1 or self.B < 1:
            raise DomainError("n_b and B must be positive")

    @classmethod
    def preset(cls, error_kind, **kw):
        """Design with its usual censoring: ``U_c = 2.5`` for the heteroscedastic
        design, a calibrated 50% rate otherwise."""
        if error_kind == "heteroscedastic_normal":
            kw.setdefault("censor_upper", 2.5)
            kw.setdefault("target_censor_rate", None)
        return cls(error_kind=error_kind, **kw)

    def resolved(self) -> "SimDesign":
        if self.censor_upper is not None:
            return self
        upper = calibrate_censoring(self, self.target_censor_rate)
        return replace(self, censor_upper=upper, target_censor_rate=None)


def error_quantile(error_kind, tau):
    if error_kind == "extreme_value_scale1":
        return math.log(-math.log1p(-tau))
    return float(stats.norm.ppf(tau))


def _scaled_exp_plus_normal_quantile(scale, tau):
    """Quantile of ``scale * zeta + e`` with ``zeta ~ Exp(1)`` and ``e ~ N(0, 1)``."""
    if scale == 0:
        return float(stats.norm.ppf(tau))
    if scale > 0:
        return float(stats.exponnorm.ppf(tau, scale))
    return -float(stats.exponnorm.ppf(1.0 - tau, -scale))


def true_beta(design: SimDesign, tau: float) -> np.ndarray:
    """Coefficient vector at quantile ``tau`` under ``design``."""
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    q = error_quantile(design.error_kind, tau)
    if design.error_kind == "heteroscedastic_normal":
        # quantile of g2 * zeta + e at Z2 = 1, relative to the Z2 = 0 baseline
        third = _scaled_exp_plus_normal_quantile(design.gamma2, tau) - q
        return np.array([q, design.gamma1, third])
    return np.array([q, design.gamma1, design.gamma2])


def _draw_log_t(design, rng, n):
    z1 = rng.uniform(size=n)
    z2 = rng.binomial(1, 0.5, size=n).astype(float)
    if design.error_kind == "extreme_value_scale1":
        err = np.log(rng.exponential(size=n))
    else:
        err = rng.standard_normal(n)
    if design.error_kind == "heteroscedastic_normal":
        zeta = rng.exponential(size=n)
        log_t = design.gamma1 * z1 + design.gamma2 * z2 * zeta + err
    else:
        log_t = design.gamma1 * z1 + design.gamma2 * z2 + err
    return z1, z2, log_t


def generate_batch(design: SimDesign, batch_index: int, replication: int = 0) -> RecordBatch:
    """Draw block ``batch_index`` of replication ``replication``."""
    if design.censor_upper is None:
        raise DomainError("design censoring is not calibrated; call resolved() first")
    rng = np.random.default_rng(
        np.random.SeedSequence(design.seed, spawn_key=(_DATA, replication, batch_index)))
    z1, z2, log_t = _draw_log_t(design, rng, design.n_b)
    log_c = np.log(rng.uniform(0.0, design.censor_upper, size=design.n_b))
    event = log_t <= log_c
    x = np.exp(np.where(event, log_t, log_c))
    return RecordBatch(x, event.astype(int), np.column_stack([np.ones(design.n_b), z1, z2]))


def calibrate_censoring(design: SimDesign, target_rate: float, draws: int = 100_000,
                        log_t_sampler=None, tol: float = 0.005) -> float:
    """``U_c`` whose censoring rate is ``target_rate``.

    The rate is estimated on one fixed Monte Carlo sample (common random
    numbers), which makes it monotone in ``U_c``; the bracket is then
    bisected to machine resolution. ``log_t_sampler(rng, n)`` overrides the
    design's event-time law.
    """
    if not 0 < target_rate < 1:
        raise DomainError("target_rate must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(design.seed, spawn_key=(_CALIBRATE,)))
    if log_t_sampler is None:
        log_t = _draw_log_t(design, rng, draws)[2]
    else:
        log_t = np.asarray(log_t_sampler(rng, draws), dtype=float)
    unif = rng.uniform(size=draws)
    t = np.exp(log_t)

    def rate(upper):
        return float(np.mean(t > unif * upper))

    lo, hi = 1.0, 1.0
    for _ in range(200):
        if rate(lo) >= target_rate:
            break
        lo /= 2.0
    for _ in range(200):
        if rate(hi) <= target_rate:
            break
        hi *= 2.0
    if not rate(lo) >= target_rate >= rate(hi):
        raise DomainError("could not bracket the target censoring rate")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if rate(mid) > target_rate:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda u: abs(rate(u) - target_rate))
    if abs(rate(best) - target_rate) >= tol:
        raise DomainError(f"censoring rate {rate(best):.4f} misses target {target_rate}")
    return best


@dataclass(frozen=True)
class MetricsRow:
    tau: float
    coef_index: int
    bias: float
    sd: float
    ase: float
    cp: float
    wall_minutes: float

    def as_tuple(self):
        return (self.tau, self.coef_index, self.bias, self.sd, self.ase, self.cp, self.wall_minutes)


@dataclass
class StudyResult:
    design: SimDesign
    mode: str
    taus: tuple
    rows: list
    estimates: np.ndarray   # (reps_ok, len(taus), p)
    ses: np.ndarray         # (reps_ok, len(taus), p)
    truth: np.ndarray       # (len(taus), p)
    failures: int = 0
    minutes: np.ndarray = field(default_factory=lambda: np.empty(0))
    mean_path: np.ndarray | None = None   # (K, p)
    mean_lower: np.ndarray | None = None
    mean_upper: np.ndarray | None = None
    grid: QuantileGrid | None = None


def _replication(design, rep, grid, taus_idx, mode, config):
    started = time.perf_counter()
    batches = [generate_batch(design, b, rep) for b in range(design.B)]
    fit_seed = int(np.random.SeedSequence(design.seed, spawn_key=(_FIT, rep)).generate_state(1)[0])
    if mode == "online":
        result = run_stream(batches, grid, seed=fit_seed, config=config)
        beta, report = result.state.beta, result.report
    else:
        data = pooled(batches)
        beta = fit_batch(data, grid).coefs
        cov = resample_batch_variance(data, grid, config.resample_S, fit_seed, threads=config.threads)
        report = _report(grid, cov)
    minutes = (time.perf_counter() - started) / 60.0
    return beta, report.se, minutes


def _safe_replication(args):
    try:
        return _replication(*args)
    except (IngestError, SolverError, VarianceError) as exc:
        return exc


def run_study(design: SimDesign, replications: int, taus_report=DEFAULT_TAUS, mode: str = "online",
              grid: QuantileGrid | None = None, config: OnlineConfig = OnlineConfig(),
              threads: int = 1, max_failure_rate: float = 0.05, progress=None) -> StudyResult:
    """Repeat ``design`` and summarise bias, SD, ASE, coverage and time.

    Replications run in ``threads`` worker processes when above one. A
    :class:`StudyError` is raised if more than ``max_failure_rate`` of the
    replications fail.
    """
    if mode not in ("online", "oracle"):
        raise DomainError(f"mode must be 'online' or 'oracle', got {mode!r}")
    if replications < 0:
        raise DomainError("replications must be nonnegative")
    grid = grid or QuantileGrid.regular()
    taus = tuple(float(t) for t in taus_report)
    taus_idx = [grid.index_of(t) for t in taus]
    design = design.resolved()
    truth = np.array([true_beta(design, t) for t in taus])
    p = truth.shape[1]
    if replications == 0:
        return StudyResult(design, mode, taus, [], np.empty((0, len(taus), p)),
                           np.empty((0, len(taus), p)), truth, grid=grid)

    jobs = [(design, rep, grid, taus_idx, mode, config) for rep in range(replications)]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            outcomes = list(pool.map(_safe_replication, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(_safe_replication(job))
            if progress:
                progress(len(outcomes), replications)
    good = [o for o in outcomes if not isinstance(o, Exception)]
    failures = replications - len(good)
    if failures > max_failure_rate * replications:
        first = next(o for o in outcomes if isinstance(o, Exception))
        raise StudyError(f"{failures} of {replications} replications failed; first: {first}")
    if not good:
        raise StudyError("every replication failed")

    paths = np.stack([g[0] for g in good])
    path_se = np.stack([g[1] for g in good])
    minutes = np.array([g[2] for g in good])
    est = paths[:, taus_idx, :]
    ses = path_se[:, taus_idx, :]
    rows = summarize(est, ses, truth, taus, float(minutes.mean()))
    return StudyResult(
        design, mode, taus, rows, est, ses, truth, failures, minutes,
        paths.mean(axis=0), (paths - Z_95 * path_se).mean(axis=0),
        (paths + Z_95 * path_se).mean(axis=0), grid,
    )


def summarize(est, ses, truth, taus, minutes):
    """Metric rows from per-replication estimates and standard errors."""
    reps = est.shape[0]
    bias = est.mean(axis=0) - truth
    sd = est.std(axis=0, ddof=1) if reps > 1 else np.zeros_like(truth)
    ase = ses.mean(axis=0)
    cp = np.mean(np.abs(est - truth) <= Z_95 * ses, axis=0)
    rows = []
    for i, tau in enumerate(taus):
        for j in range(truth.shape[1]):
            rows.append(MetricsRow(tau, j + 1, float(bias[i, j]), float(sd[i, j]),
                                   float(ase[i, j]), float(cp[i, j]), minutes))
    return rows


def format_metrics(rows, delimiter=","):
    lines = [delimiter.join(METRICS_HEADER)]
    for r in rows:
        lines.append(delimiter.join([
            f"{r.tau:g}", str(r.coef_index), f"{r.bias:.6f}", f"{r.sd:.6f}",
            f"{r.ase:.6f}", f"{r.cp:.4f}", f"{r.wall_minutes:.6f}",
        ]))
    return "\n".join(lines) + "\n"


def format_path_export(result: StudyResult, delimiter=","):
    """Monte Carlo mean path with mean interval bounds, one row per level and coefficient."""
    lines = [delimiter.join(PATH_HEADER)]
    if result.mean_path is None:
        return lines[0] + "\n"
    for k, tau in enumerate(result.grid.taus):
        truth = true_beta(result.design, float(tau))
        for j in range(result.mean_path.shape[1]):
            lines.append(delimiter.join([
                f"{tau:g}", str(j + 1), f"{result.mean_path[k, j]:.6f}",
                f"{result.mean_lower[k, j]:.6f}", f"{result.mean_upper[k, j]:.6f}",
                f"{truth[j]:.6f}",
            ]))
    return "\n".join(lines) + "\n"
