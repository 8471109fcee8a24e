"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``PEAK2STRUCT_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
if os.environ.get("PEAK2STRUCT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

lattice_neighbors = _impl.lattice_neighbors
structure_factor_sum = _impl.structure_factor_sum

__all__ = ["BACKEND", "lattice_neighbors", "structure_factor_sum"]
