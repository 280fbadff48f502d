"""Selects the compiled depthwise-conv kernels at import, numpy fallback otherwise.

Set XICPEAK_FORCE_NUMPY=1 to skip the extension (used by the kernel benchmark
and for debugging).
"""

import os

from . import kernels_py

if os.environ.get("XICPEAK_FORCE_NUMPY"):
    _impl = kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = kernels_py

BACKEND = _impl.BACKEND


def dwconv_forward(x, w):
    return _impl.dwconv_forward(x, w)


def dwconv_backward(x, w, dy):
    return _impl.dwconv_backward(x, w, dy)
