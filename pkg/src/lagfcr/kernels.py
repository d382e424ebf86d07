"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the NumPy
fallback. Set ``LAGFCR_KERNELS=python`` to force the fallback.
"""
import os

from lagfcr import _pykernels

python_backend = _pykernels

try:
    from lagfcr import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None


def select(name=None):
    name = name or os.environ.get("LAGFCR_KERNELS", "auto")
    if name == "python":
        return python_backend
    if name in ("cython", "compiled"):
        if compiled_backend is None:
            raise ImportError("compiled kernels requested but lagfcr._ckernels is not built")
        return compiled_backend
    if name != "auto":
        raise ValueError(f"unknown kernel backend {name!r}")
    return compiled_backend or python_backend


active = select()
BACKEND = active.BACKEND
