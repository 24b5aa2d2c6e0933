"""Pick the compiled kernel when it is importable, else the numpy one.

Set ``STACKLQG_BACKEND=python`` to force the reference implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
riccati_rk4 = _kernels_py.riccati_rk4

if os.environ.get("STACKLQG_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        riccati_rk4 = _ckernels.riccati_rk4
        BACKEND = "cython"


def available_backends():
    names = {"python": _kernels_py.riccati_rk4}
    try:
        from . import _ckernels
    except ImportError:
        return names
    names["cython"] = _ckernels.riccati_rk4
    return names
