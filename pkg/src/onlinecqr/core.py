"""Shared domain types: survival records, quantile grids and step paths."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


def h_transform(u):
    """Cumulative hazard transform ``-log(1 - u)`` on ``[0, 1)``.

    Accepts a scalar or an array; raises :class:`DomainError` outside the
    domain.
    """
    arr = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr >= 1.0):
        raise DomainError(f"h_transform needs 0 <= u < 1, got {u!r}")
    out = -np.log1p(-arr)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class SubjectRecord:
    """One observation: follow-up time, event indicator and covariates.

    ``z`` includes the leading intercept entry, which must equal 1.
    """

    x: float
    delta: int
    z: tuple

    def __post_init__(self):
        z = tuple(float(v) for v in self.z)
        object.__setattr__(self, "z", z)
        if not (math.isfinite(self.x) and self.x > 0):
            raise DomainError(f"follow-up time must be positive and finite, got {self.x}")
        if self.delta not in (0, 1):
            raise DomainError(f"event indicator must be 0 or 1, got {self.delta}")
        if not z or z[0] != 1.0:
            raise DomainError("first covariate must be the intercept 1")
        if not all(math.isfinite(v) for v in z):
            raise DomainError("covariates must be finite")


def counting_indicator(rec: SubjectRecord, t: float) -> int:
    """Return ``I(X <= t, delta = 1)`` for one record."""
    return int(rec.delta == 1 and rec.x <= t)


class RecordBatch:
    """Column-oriented block of survival records.

    Parameters
    ----------
    x : array_like, shape (n,)
        Observed follow-up times ``min(T, C)``; strictly positive.
    delta : array_like, shape (n,)
        Event indicators in {0, 1}.
    z : array_like, shape (n, p)
        Covariates with the intercept column first.
    """

    __slots__ = ("x", "delta", "z", "logx")

    def __init__(self, x, delta, z):
        x = np.ascontiguousarray(x, dtype=float)
        delta_raw = np.asarray(delta)
        z = np.ascontiguousarray(np.atleast_2d(z), dtype=float)
        if x.ndim != 1:
            raise DomainError("x must be one-dimensional")
        n = x.shape[0]
        if z.shape[0] != n or delta_raw.shape != (n,):
            raise DomainError("x, delta and z disagree on the number of records")
        if not np.all(np.isin(delta_raw, (0, 1))):
            raise DomainError("event indicators must be 0 or 1")
        if not np.all(np.isfinite(x)) or np.any(x <= 0):
            raise DomainError("follow-up times must be positive and finite")
        if not np.all(np.isfinite(z)):
            raise DomainError("covariates must be finite")
        if n and not np.all(z[:, 0] == 1.0):
            raise DomainError("first covariate column must be the intercept 1")
        self.x = x
        self.delta = np.ascontiguousarray(delta_raw, dtype=float)
        self.z = z
        self.logx = np.log(x)
        for arr in (self.x, self.delta, self.z, self.logx):
            arr.setflags(write=False)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord]) -> "RecordBatch":
        records = list(records)
        if not records:
            raise DomainError("empty record list")
        return cls(
            [r.x for r in records],
            [r.delta for r in records],
            [r.z for r in records],
        )

    @classmethod
    def concatenate(cls, batches: Sequence["RecordBatch"]) -> "RecordBatch":
        if not batches:
            raise DomainError("nothing to concatenate")
        return cls(
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.delta for b in batches]),
            np.vstack([b.z for b in batches]),
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[SubjectRecord]:
        for i in range(self.n):
            yield SubjectRecord(float(self.x[i]), int(self.delta[i]), tuple(self.z[i]))

    def censoring_rate(self) -> float:
        return float(1.0 - self.delta.mean())


def as_batch(records) -> RecordBatch:
    """Coerce a :class:`RecordBatch` or an iterable of records."""
    if isinstance(records, RecordBatch):
        return records
    return RecordBatch.from_records(records)


class QuantileGrid:
    """Strictly increasing quantile levels ``0 < tau_1 < ... < tau_K < 1``.

    The implicit level ``tau_0 = 0`` is never stored.
    """

    __slots__ = ("taus",)

    def __init__(self, taus):
        taus = np.array(taus, dtype=float).ravel()
        if taus.size == 0:
            raise DomainError("quantile grid is empty")
        if not np.all(np.isfinite(taus)) or taus[0] <= 0.0 or taus[-1] >= 1.0:
            raise DomainError("grid levels must lie in (0, 1)")
        if np.any(np.diff(taus) <= 0):
            raise DomainError("grid levels must be strictly increasing")
        taus.setflags(write=False)
        self.taus = taus

    @classmethod
    def regular(cls, step: float = 0.01, tau_max: float = 0.5) -> "QuantileGrid":
        """Equally spaced grid ``step, 2*step, ..., tau_max``."""
        if step <= 0 or tau_max <= 0 or tau_max >= 1:
            raise DomainError("need step > 0 and 0 < tau_max < 1")
        count = int(math.floor(tau_max / step + 1e-9))
        if count < 1:
            raise DomainError("step larger than tau_max")
        return cls(np.round(step * np.arange(1, count + 1), 12))

    @property
    def K(self) -> int:
        return self.taus.shape[0]

    @property
    def mesh(self) -> float:
        """Largest spacing ``max_k (tau_k - tau_{k-1})`` with ``tau_0 = 0``."""
        return float(np.max(np.diff(np.concatenate(([0.0], self.taus)))))

    def h_increments(self) -> np.ndarray:
        """``H(tau_k) - H(tau_{k-1})`` for ``k = 1..K``."""
        h = h_transform(self.taus)
        return np.diff(np.concatenate(([0.0], np.atleast_1d(h))))

    def index_of(self, tau: float, atol: float = 1e-9) -> int:
        """Position of a level that lies on the grid."""
        k = int(np.argmin(np.abs(self.taus - tau)))
        if abs(self.taus[k] - tau) > atol:
            raise DomainError(f"tau={tau} is not a grid level")
        return k

    def __len__(self) -> int:
        return self.K

    def __eq__(self, other) -> bool:
        return isinstance(other, QuantileGrid) and np.array_equal(self.taus, other.taus)

    def __hash__(self):
        return hash(self.taus.tobytes())

    def __repr__(self) -> str:
        return f"QuantileGrid(K={self.K}, tau_K={self.taus[-1]:g}, mesh={self.mesh:g})"


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


class BetaPath:
    """Right-continuous step function of coefficient vectors over a grid."""

    __slots__ = ("grid", "coefs")

    def __init__(self, grid: QuantileGrid, coefs):
        coefs = _frozen(coefs)
        if coefs.ndim != 2 or coefs.shape[0] != grid.K:
            raise DomainError(f"expected ({grid.K}, p) coefficients, got {coefs.shape}")
        self.grid = grid
        self.coefs = coefs

    @property
    def p(self) -> int:
        return self.coefs.shape[1]

    def __call__(self, tau: float) -> np.ndarray:
        return eval_path(self, tau)


def eval_path(path: BetaPath, tau: float) -> np.ndarray:
    """Value of the step path at ``tau`` in ``(0, tau_K]``.

    Returns ``coefs[k]`` for the largest ``k`` with ``tau_k <= tau``. On
    ``(0, tau_1)`` the first coefficient is returned.
    """
    taus = path.grid.taus
    if not (0.0 < tau <= taus[-1]):
        raise DomainError(f"tau={tau} outside (0, {taus[-1]}]")
    k = int(np.searchsorted(taus, tau, side="right")) - 1
    return path.coefs[max(k, 0)].copy()


class GammaPath:
    """Symmetric p x p weight matrices, one per grid level."""

    __slots__ = ("grid", "mats")

    def __init__(self, grid: QuantileGrid, mats):
        mats = _frozen(mats)
        if mats.ndim != 3 or mats.shape[0] != grid.K or mats.shape[1] != mats.shape[2]:
            raise DomainError(f"expected ({grid.K}, p, p) matrices, got {mats.shape}")
        self.grid = grid
        self.mats = mats
