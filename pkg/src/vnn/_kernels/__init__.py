"""Hot-kernel backend selection.

The package ships two interchangeable implementations of its inner-loop
kernels: a compiled Cython extension (``vnn._kernels._core``) and a pure
numpy fallback (``vnn._kernels.numpy_backend``).  The compiled one is used
when it imported cleanly; set ``VNN_KERNELS=numpy`` (or ``cython``) to force
a backend.  ``active`` is the module actually in use.
"""

import os

from . import numpy_backend

_forced = os.environ.get("VNN_KERNELS", "").strip().lower()

if _forced == "numpy":
    active = numpy_backend
else:
    try:
        from . import _core as active  # type: ignore[no-redef]
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "VNN_KERNELS=cython but the compiled extension is not built; "
                "run `pip install -e .` or unset VNN_KERNELS"
            )
        active = numpy_backend

BACKEND = active.NAME


def backends():
    """All importable backends, for equivalence tests and benchmarks."""
    out = {"numpy": numpy_backend}
    try:
        from . import _core

        out["cython"] = _core
    except ImportError:
        pass
    return out
