"""Numeric hot loops with two interchangeable backends.

The default backend is numba (JIT, parallel over rows). Set
``GRATINGSCOPE_KERNELS=numpy`` to force the pure-numpy fallback, or
``GRATINGSCOPE_KERNELS=numba`` to fail loudly if numba is unavailable.
Both backends implement the same functions and agree to float64 rounding;
``benchmarks/kernel_bench.py`` compares their throughput.
"""

from __future__ import annotations

import os

from . import numpy_impl

_requested = os.environ.get("GRATINGSCOPE_KERNELS", "auto").strip().lower() or "auto"

if _requested == "numpy":
    _impl = numpy_impl
    BACKEND = "numpy"
elif _requested == "numba":
    from . import numba_impl as _impl  # hard requirement, let ImportError surface

    BACKEND = "numba"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - depends on environment
        _impl = numpy_impl
        BACKEND = "numpy"

stepping_frame = _impl.stepping_frame
harmonic_sums = _impl.harmonic_sums

__all__ = ["BACKEND", "stepping_frame", "harmonic_sums", "numpy_impl"]
