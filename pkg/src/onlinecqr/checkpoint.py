"""Plain-text persistence of :class:`~onlinecqr.online.SummaryState`.

Every number is written at a fixed width, so the file size depends only on
the grid length ``K`` and the dimension ``p``. Floats carry 17 significant
digits and read back bit-exactly.

Layout::

    onlinecqr-checkpoint
    format_version 1
    p <int>
    K <int>
    seed <20 digits>
    batch_index <20 digits>
    cum_n <20 digits>
    level <k> tau <float>
    beta <p floats>
    gamma <p*p floats, row-major>
    gamma_tilde <p*p floats>
    mid_sum <p*p floats>
    ... one block per level ...
    end
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from .core import QuantileGrid
from .online import SummaryState

MAGIC = "onlinecqr-checkpoint"
FORMAT_VERSION = 1
_INT_WIDTH = 20


class CheckpointError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def format_float(x: float) -> str:
    """Fixed-width repr with 17 significant digits and a 3-digit exponent."""
    x = float(x)
    if not math.isfinite(x):
        raise CheckpointError(f"cannot store non-finite value {x}")
    mant, exp = f"{x:+.16e}".split("e")
    return f"{mant}e{int(exp):+04d}"


def _ints(value):
    if value < 0 or value >= 10 ** _INT_WIDTH:
        raise CheckpointError(f"integer {value} out of range")
    return f"{int(value):0{_INT_WIDTH}d}"


def dumps(state: SummaryState) -> str:
    lines = [
        MAGIC,
        f"format_version {FORMAT_VERSION}",
        f"p {state.p}",
        f"K {state.grid.K}",
        f"seed {_ints(state.seed)}",
        f"batch_index {_ints(state.batch_index)}",
        f"cum_n {_ints(state.cum_n)}",
    ]
    for k, tau in enumerate(state.grid.taus):
        lines.append(f"level {k + 1} tau {format_float(tau)}")
        for name in ("beta", "gamma", "gamma_tilde", "mid_sum"):
            values = np.asarray(getattr(state, name)[k]).ravel()
            lines.append(name + " " + " ".join(format_float(v) for v in values))
    lines.append("end")
    return "\n".join(lines) + "\n"


class _Reader:
    def __init__(self, text):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def next(self, key):
        if self.pos >= len(self.lines):
            raise CheckpointError(f"unexpected end of file, expected {key!r}", self.pos + 1)
        self.pos += 1
        parts = self.lines[self.pos - 1].split(" ")
        if parts[0] != key:
            raise CheckpointError(f"expected {key!r}, found {parts[0]!r}", self.pos)
        return parts[1:]

    def int(self, key):
        vals = self.next(key)
        try:
            (v,) = vals
            return int(v)
        except ValueError:
            raise CheckpointError(f"bad integer for {key!r}", self.pos) from None

    def floats(self, key, count):
        vals = self.next(key)
        if len(vals) != count:
            raise CheckpointError(f"{key!r} needs {count} values, found {len(vals)}", self.pos)
        try:
            return [float(v) for v in vals]
        except ValueError:
            raise CheckpointError(f"bad number in {key!r}", self.pos) from None


def loads(text: str) -> SummaryState:
    r = _Reader(text)
    if not r.lines or r.lines[0] != MAGIC:
        raise CheckpointError("not a checkpoint file", 1)
    r.pos = 1
    version = r.int("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {version}", r.pos)
    p = r.int("p")
    K = r.int("K")
    if p < 1 or K < 1:
        raise CheckpointError("p and K must be positive", r.pos)
    seed = r.int("seed")
    batch_index = r.int("batch_index")
    cum_n = r.int("cum_n")
    taus = np.empty(K)
    blocks = {name: [] for name in ("beta", "gamma", "gamma_tilde", "mid_sum")}
    for k in range(1, K + 1):
        head = r.next("level")
        if len(head) != 3 or head[0] != str(k) or head[1] != "tau":
            raise CheckpointError(f"malformed header for level {k}", r.pos)
        try:
            taus[k - 1] = float(head[2])
        except ValueError:
            raise CheckpointError("bad tau", r.pos) from None
        blocks["beta"].append(r.floats("beta", p))
        for name in ("gamma", "gamma_tilde", "mid_sum"):
            blocks[name].append(np.reshape(r.floats(name, p * p), (p, p)))
    r.next("end")
    if r.pos != len(r.lines):
        raise CheckpointError("trailing content after 'end'", r.pos + 1)
    try:
        grid = QuantileGrid(taus)
        return SummaryState(grid, p, cum_n, batch_index, seed,
                            *(np.array(blocks[n]) for n in ("beta", "gamma", "gamma_tilde", "mid_sum")))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def save(state: SummaryState, path) -> None:
    """Write atomically: a temporary file in the same directory is renamed over ``path``."""
    text = dumps(state)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> SummaryState:
    with open(path, newline="") as fh:
        return loads(fh.read())


class LockError(RuntimeError):
    pass


class CheckpointLock:
    """Advisory ``<path>.lock`` file held for the lifetime of a fit."""

    def __init__(self, path):
        self.path = str(path) + ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            raise LockError(f"{self.path} exists; another fit owns this checkpoint") from None
        os.write(self.fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)
        return False
