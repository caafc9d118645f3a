"""Pick the compiled kernels when available, else the NumPy fallback."""

import os

from . import _pykernels

if os.environ.get("CHARCASCADE_PURE_PYTHON"):
    kernels = _pykernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        kernels = _pykernels

NAME = "python" if kernels is _pykernels else "cython"
