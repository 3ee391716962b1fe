"""Hot kernels: the compiled extension when available, else pure Python.

Set ``FODKIT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("FODKIT_PURE_PYTHON", "") not in ("", "0"):
    from ._pykernels import local_maxima, nnls
else:
    try:
        from ._ckernels import local_maxima, nnls
        BACKEND = "cython"
    except ImportError:
        from ._pykernels import local_maxima, nnls

__all__ = ["nnls", "local_maxima", "BACKEND", "_pykernels"]
