"""Hot loop kernels, compiled when available.

The Cython build (``owqf._ckernels``) is preferred; set ``OWQF_PURE_PYTHON=1``
to force the interpreted fallback.  ``BACKEND`` names the active choice.
"""
import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

if os.environ.get("OWQF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _impl is compiled_backend else "python"

linear_sum_assignment = _impl.linear_sum_assignment
greedy_match = _impl.greedy_match
peak_nms = _impl.peak_nms

__all__ = ["BACKEND", "linear_sum_assignment", "greedy_match", "peak_nms",
           "python_backend", "compiled_backend"]
