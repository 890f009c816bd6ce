"""Alignment kernels: compiled core with a pure-Python fallback.

The compiled extension is preferred when it imported cleanly; setting the
environment variable ``SPANFORGE_PURE_PYTHON=1`` before import forces the
fallback (useful for benchmarking and debugging).  Both implementations are
contractually identical — see tests for the equivalence suite.
"""

from __future__ import annotations

import os

from . import _nw_py

GAP_CODE = _nw_py.GAP_CODE

_impl = _nw_py
_backend = "python"

if os.environ.get("SPANFORGE_PURE_PYTHON") != "1":
    try:
        from . import _nw_cy

        _impl = _nw_cy
        _backend = "cython"
    except ImportError:
        pass


def backend_name() -> str:
    """Which implementation import selected: "cython" or "python"."""
    return _backend


def align_global(a, b, substitution, gap):
    """Dispatch to the selected backend; see _nw_py.align_global for the contract."""
    return _impl.align_global(a, b, substitution, gap)
