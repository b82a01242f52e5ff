"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` takes over. Set
``ONLINECQR_BACKEND=python`` to force the fallback.
"""

import os

from . import _pykernels
from ._pykernels import DEGENERATE, ITER_CAP, OK, RANK_DEFICIENT, UNBOUNDED, at_risk_slack

_forced = os.environ.get("ONLINECQR_BACKEND", "").lower()

if _forced == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _pykernels
        BACKEND = "python"

solve_l1 = _impl.solve_l1
fit_path = _impl.fit_path
loss_score = _impl.loss_score

STATUS_NAMES = {
    OK: "ok",
    UNBOUNDED: "unbounded",
    RANK_DEFICIENT: "rank deficient",
    ITER_CAP: "iteration cap",
    DEGENERATE: "degenerate vertex",
}


def backends():
    """Available kernel modules keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out

__all__ = [
    "BACKEND", "solve_l1", "at_risk_slack", "fit_path", "loss_score", "backends", "STATUS_NAMES",
    "OK", "UNBOUNDED", "RANK_DEFICIENT", "ITER_CAP", "DEGENERATE",
]
