"""Numba implementations of the dense effective-channel kernels.

Importing this module requires numba; :mod:`otfs_csep.backend` falls back
to the numpy twins when it is unavailable or disabled.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def shift_index_table(n: int, m: int) -> np.ndarray:
    size = n * m
    out = np.empty((size, size), dtype=np.int32)
    for r in range(size):
        rk = r // m
        rl = r - rk * m
        for c in range(size):
            ck = c // m
            cl = c - ck * m
            dk = (rk - ck) % n
            dl = (rl - cl) % m
            out[r, c] = dk * m + dl
    return out


@njit(cache=True)
def path_effective(
    kern_flat: np.ndarray, row_phase: np.ndarray, idx: np.ndarray
) -> np.ndarray:
    size = idx.shape[0]
    out = np.empty((size, size), dtype=np.complex128)
    for r in range(size):
        ph = row_phase[r]
        for c in range(size):
            out[r, c] = ph * kern_flat[idx[r, c]]
    return out
