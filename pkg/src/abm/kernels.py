"""Hot-loop kernels, compiled when available.

The Cython extension ``abm._kernels`` is used if it was built; otherwise the
numpy implementations in :mod:`abm._kernels_py` are used.  Set
``ABM_PURE_PYTHON=1`` to force the fallback.
"""

import os

from abm import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("ABM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from abm import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

im2col = _impl.im2col
col2im = _impl.col2im
levenshtein = _impl.levenshtein
