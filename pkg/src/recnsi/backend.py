"""Convolution kernel backend selection.

The hot inner loops (conv forward and its kernel gradient) come in two
flavors: numba @njit loops and a pure-numpy im2col path. Set
``RECNSI_BACKEND=numpy`` or ``RECNSI_BACKEND=numba`` to force one; the
default is numba when importable, numpy otherwise.
"""

import os

_requested = os.environ.get("RECNSI_BACKEND", "").strip().lower()

if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(f"RECNSI_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    BACKEND = "numpy"
else:
    try:
        from . import _conv_numba  # noqa: F401
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        BACKEND = "numpy"

if BACKEND == "numba":
    from ._conv_numba import (conv2d_forward, conv2d_grad_input,
                              conv2d_grad_kernel)
else:
    from ._conv_numpy import (conv2d_forward, conv2d_grad_input,
                              conv2d_grad_kernel)

__all__ = ["BACKEND", "conv2d_forward", "conv2d_grad_input", "conv2d_grad_kernel"]
