"""Selects the kernel implementation at import time.

The compiled Cython module is preferred; ``NPR_BACKEND=python`` forces the
pure-Python fallback, ``NPR_BACKEND=cython`` makes a missing extension an
error instead of a silent fallback.
"""
import os

from npr import _pykernels

_requested = os.environ.get("NPR_BACKEND", "").lower()

if _requested == "python":
    kernels = _pykernels
    BACKEND = "python"
else:
    try:
        from npr import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        kernels = _pykernels
        BACKEND = "python"


def available_backends():
    """Mapping of backend name -> kernel module for everything importable."""
    out = {"python": _pykernels}
    try:
        from npr import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
