"""Pure-numpy implementations of the dense effective-channel kernels."""

from __future__ import annotations

import numpy as np


def shift_index_table(n: int, m: int) -> np.ndarray:
    """Modular gather table for the dense effective channel.

    Entry ``(r, c)`` is the flat kernel index ``((k_r - k_c) mod n) * m +
    ((l_r - l_c) mod m)`` for row-major cells ``r = k_r * m + l_r``.
    """
    cells = np.arange(n * m)
    rk, rl = np.divmod(cells, m)
    dk = np.mod(rk[:, None] - rk[None, :], n)
    dl = np.mod(rl[:, None] - rl[None, :], m)
    return (dk * m + dl).astype(np.int32)


def path_effective(
    kern_flat: np.ndarray, row_phase: np.ndarray, idx: np.ndarray
) -> np.ndarray:
    """Dense single-path effective channel ``row_phase[r] * kern[idx[r, c]]``."""
    return row_phase[:, None] * kern_flat[idx]
