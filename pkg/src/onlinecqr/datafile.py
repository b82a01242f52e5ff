"""Reading record files and writing result tables."""

from __future__ import annotations

import csv
import math

import numpy as np

from .core import RecordBatch

RESULTS_HEADER = ("tau", "coef", "estimate", "se", "ci_lo", "ci_hi")
DIAGNOSTICS_HEADER = (
    "batch", "tau", "mm_iterations", "escalations", "omega", "stale",
    "rels_cond", "batch_rels_cond", "beta_norm", "resample_survivors",
)


class ParseError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:" if path else ""
        where += f"line {line}: " if line else (" " if where else "")
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line


def _number(text, what, path, line):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not a number", path, line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what} {text!r} is not finite", path, line)
    return value


def read_records(path, delimiter=","):
    """Parse a data file into ``(RecordBatch, covariate_names)``.

    The header names the time column, the status column and then the
    covariates; an intercept column is prepended to the covariates.
    """
    times, status, covs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path, 1) from None
        header = [h.strip() for h in header]
        if len(header) < 2:
            raise ParseError("header needs a time column and a status column", path, 1)
        names = header[2:]
        width = len(header)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, found {len(row)}", path, line)
            t = _number(row[0], "time", path, line)
            if t <= 0:
                raise ParseError(f"time {row[0]!r} must be positive", path, line)
            s = row[1].strip()
            if s not in ("0", "1"):
                raise ParseError(f"status {s!r} must be 0 or 1", path, line)
            times.append(t)
            status.append(int(s))
            covs.append([_number(c, f"covariate {names[j]!r}", path, line) for j, c in enumerate(row[2:])])
    if not times:
        raise ParseError("no records", path)
    n = len(times)
    z = np.column_stack([np.ones(n), np.array(covs, dtype=float).reshape(n, len(names))])
    return RecordBatch(np.array(times), np.array(status), z), names


def write_records(path, batch: RecordBatch, names=None, delimiter=","):
    names = names or [f"z{j}" for j in range(1, batch.p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["time", "status", *names])
        for x, d, z in zip(batch.x, batch.delta, batch.z):
            w.writerow([repr(float(x)), int(d), *(repr(float(v)) for v in z[1:])])


def coefficient_names(names):
    return ["intercept", *names]


def format_results(grid, beta, se, names, delimiter=",", z=1.959963984540054):
    lines = [delimiter.join(RESULTS_HEADER)]
    labels = coefficient_names(names)
    for k, tau in enumerate(grid.taus):
        for j, label in enumerate(labels):
            est, s = float(beta[k, j]), float(se[k, j])
            lines.append(delimiter.join([
                f"{tau:g}", label, repr(est), repr(s), repr(est - z * s), repr(est + z * s),
            ]))
    return "\n".join(lines) + "\n"


def format_diagnostics(rows, delimiter=",", header=True):
    """``rows`` are ``(batch_index, LevelDiagnostics)`` pairs."""
    lines = [delimiter.join(DIAGNOSTICS_HEADER)] if header else []
    for b, d in rows:
        lines.append(delimiter.join(str(v) for v in (
            b, f"{d.tau:g}", d.mm_iterations, d.escalations, f"{d.omega:.6g}", int(d.stale),
            f"{d.rels_cond:.6g}", f"{d.batch_rels_cond:.6g}", f"{d.beta_norm:.6g}",
            d.resample_survivors,
        )))
    return "\n".join(lines) + "\n"
