"""Kernel backend selection.

The hot inner loops (conv2d and bilinear sampling, forward and backward) live
in a compiled Cython extension when available, with a NumPy fallback that
implements identical semantics.  Selection happens once at import:

    KPP_BACKEND=cython   require the extension (ImportError if missing)
    KPP_BACKEND=numpy    force the fallback
    unset                use the extension if importable, else fall back
"""

import os

from . import _kernels_np

_requested = os.environ.get("KPP_BACKEND", "").strip().lower()

if _requested == "numpy":
    kernels = _kernels_np
    BACKEND = "numpy"
elif _requested == "cython":
    from . import _kernels as _kernels_cy

    kernels = _kernels_cy
    BACKEND = "cython"
else:
    try:
        from . import _kernels as _kernels_cy

        kernels = _kernels_cy
        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_np
        BACKEND = "numpy"


def get_backends():
    """Return {name: module} for every importable backend (for benchmarks/tests)."""
    found = {"numpy": _kernels_np}
    try:
        from . import _kernels as cy

        found["cython"] = cy
    except ImportError:
        pass
    return found
