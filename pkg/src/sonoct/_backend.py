"""Pick the compiled kernel module when it is importable, else the numpy twin.

Set ``SONOCT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from sonoct import _pykernels as python_kernels

try:
    from sonoct import _ckernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("SONOCT_PURE_PYTHON", "") in ("", "0"):
    kernels = compiled_kernels
else:
    kernels = python_kernels

BACKEND = kernels.NAME


def available():
    """Names of the kernel backends importable in this environment."""
    names = ["python"]
    if compiled_kernels is not None:
        names.insert(0, "cython")
    return names


def get(name):
    if name == "python":
        return python_kernels
    if name == "cython":
        if compiled_kernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return compiled_kernels
    raise ValueError(f"unknown backend {name!r}")
