"""Kernel backend selection: numba-accelerated with a pure-numpy fallback.

The ``OTFS_CSEP_BACKEND`` environment variable picks the implementation at
import time: ``numba`` (default when numba imports cleanly), ``numpy`` to
force the fallback.  Both expose identical signatures and results.
"""

from __future__ import annotations

import os

_requested = os.environ.get("OTFS_CSEP_BACKEND", "auto").lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"OTFS_CSEP_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

HAS_NUMBA = False
if _requested in ("auto", "numba"):
    try:
        from otfs_csep._kernels_numba import path_effective, shift_index_table

        HAS_NUMBA = True
    except ImportError:
        if _requested == "numba":
            raise

if not HAS_NUMBA:
    from otfs_csep._kernels_numpy import path_effective, shift_index_table

BACKEND = "numba" if HAS_NUMBA else "numpy"

__all__ = ["BACKEND", "HAS_NUMBA", "path_effective", "shift_index_table"]
