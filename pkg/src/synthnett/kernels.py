"""Backend selection for the convolution kernels.

The compiled Cython module is preferred; the numpy implementation in
``_kernels_py`` is used when the extension was not built or when the
environment variable ``SYNTHNETT_PURE_PYTHON`` is set to a non-empty value
other than ``0``.
"""

import os

from . import _kernels_py

_force_python = os.environ.get("SYNTHNETT_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "col2im", "im2col"]
