"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``RISKORACLE_PURE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("RISKORACLE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

pairwise_js = _impl.pairwise_js
pairwise_js_grad = _impl.pairwise_js_grad
