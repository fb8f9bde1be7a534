"""Kernel backend selection.

The compiled extension is used when it imports; setting ``REPOSE_PURE_PYTHON=1``
forces the numpy fallback (used by the benchmark and the parity tests).
"""
import os

import numpy as np

from . import _fallback

BACKEND = "numpy"
_compiled = None
if os.environ.get("REPOSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None


def im2col(x, k, stride, pad, ho, wo, backend=None):
    x = np.ascontiguousarray(x)
    if (backend or BACKEND) == "cython" and _compiled is not None:
        return _compiled.im2col(x, k, stride, pad, ho, wo)
    return _fallback.im2col(x, k, stride, pad, ho, wo)


def col2im(cols, B, C, H, W, k, stride, pad, ho, wo, backend=None):
    cols = np.ascontiguousarray(cols)
    if (backend or BACKEND) == "cython" and _compiled is not None:
        return _compiled.col2im(cols, B, C, H, W, k, stride, pad, ho, wo)
    return _fallback.col2im(cols, B, C, H, W, k, stride, pad, ho, wo)


def available_backends():
    return ["numpy"] + (["cython"] if _compiled is not None else [])
