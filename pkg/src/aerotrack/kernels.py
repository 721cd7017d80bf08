"""Backend selection for the hot kernels.

The compiled Cython module is used when it imports; otherwise the numpy
fallback. Set ``AEROTRACK_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

if os.environ.get("AEROTRACK_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

ncc_response = _impl.ncc_response
local_peaks = _impl.local_peaks
convex_intersection_area = _impl.convex_intersection_area


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
