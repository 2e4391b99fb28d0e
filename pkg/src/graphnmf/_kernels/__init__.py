"""Hot numerical loops with a compiled backend and a pure-Python fallback.

The compiled module is used when it was built at install time; setting
``GRAPHNMF_PURE_PYTHON=1`` forces the fallback.

Attributes
----------
BACKEND : str
    ``"cython"`` or ``"python"``, whichever was selected at import.
"""
import os

from . import _fallback

if os.environ.get("GRAPHNMF_PURE_PYTHON"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

admm_rows = _impl.admm_rows
jacobi_sweeps = _impl.jacobi_sweeps

__all__ = ["BACKEND", "admm_rows", "jacobi_sweeps", "_fallback"]
