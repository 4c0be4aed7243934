"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise, or
when ``COUINSEG_PURE_PYTHON=1``, the numpy implementations in ``_pykernels``
are used.  Both backends expose the same functions.
"""
import os

from . import _pykernels

if os.environ.get("COUINSEG_PURE_PYTHON") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

NAMES = (
    "scatter_mean",
    "scatter_add_rows",
    "trilinear_sample",
    "trilinear_sample_backward",
    "ball_query",
    "farthest_point_sample",
    "nearest_distances",
)

scatter_mean = _impl.scatter_mean
scatter_add_rows = _impl.scatter_add_rows
trilinear_sample = _impl.trilinear_sample
trilinear_sample_backward = _impl.trilinear_sample_backward
ball_query = _impl.ball_query
farthest_point_sample = _impl.farthest_point_sample
nearest_distances = _impl.nearest_distances


def backends():
    """Every importable backend module, keyed by name."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["compiled"] = _ckernels
    except ImportError:
        pass
    return found
