"""Frame geometry, Zadoff-Chu sequences, Dirichlet kernels, steering vectors.

Index conventions used throughout the package:

- Delay-Doppler grids are stored as ``(N, M)`` complex arrays; axis 0 is
  Doppler, axis 1 is delay.  Doppler indices ``k`` run over the centered
  range ``{-floor(N/2), ..., N - 1 - floor(N/2)}`` and map to storage row
  ``k mod N``.
- Guard-grid columns enumerate candidate taps ``(k', l')`` with
  ``l' in [0, M_g)`` and ``k'`` over the centered range of size ``N_g``;
  the flat column index is ``q = l' * N_g + (k' + floor(N_g/2))``
  (Doppler-fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from otfs_csep.exceptions import ParameterError

#: relative tolerance used to detect removable singularities of the
#: periodic Dirichlet kernel
XI_SINGULARITY_TOL = 1e-12


@dataclass(frozen=True)
class OtfsParams:
    """Static OTFS frame and array geometry.

    Parameters
    ----------
    m_delay : int
        Number of delay bins (subcarriers) ``M``.
    n_doppler : int
        Number of Doppler bins (symbols per frame) ``N``.
    m_cp : int
        Cyclic-prefix length in delay samples ``M_CP``.
    delta_f : float
        Subcarrier spacing in Hz.
    f_c : float
        Carrier frequency in Hz.
    n_bs : int
        Number of base-station antennas (uniform linear array).
    d_over_lambda : float
        Antenna spacing over carrier wavelength (default half-wavelength).
    """

    m_delay: int
    n_doppler: int
    m_cp: int
    delta_f: float = 60e3
    f_c: float = 15e9
    n_bs: int = 16
    d_over_lambda: float = 0.5

    def __post_init__(self) -> None:
        if self.m_delay < 2 or self.n_doppler < 2:
            raise ParameterError("frame needs at least 2 delay and 2 Doppler bins")
        if not 0 <= self.m_cp < self.m_delay:
            raise ParameterError("cyclic prefix must satisfy 0 <= M_CP < M")
        if self.delta_f <= 0 or self.f_c <= 0:
            raise ParameterError("delta_f and f_c must be positive")
        if self.n_bs < 1:
            raise ParameterError("need at least one receive antenna")
        if self.d_over_lambda <= 0:
            raise ParameterError("antenna spacing must be positive")

    @property
    def t_ofdm(self) -> float:
        """Useful OFDM symbol duration ``T = 1/delta_f`` in seconds."""
        return 1.0 / self.delta_f

    @property
    def t_cp(self) -> float:
        """Cyclic-prefix duration in seconds."""
        return self.m_cp * self.t_ofdm / self.m_delay

    @property
    def t_sym(self) -> float:
        """Full symbol duration including cyclic prefix."""
        return (self.m_delay + self.m_cp) * self.t_ofdm / self.m_delay

    @property
    def frame_duration(self) -> float:
        """Duration of one OTFS frame (``N`` symbols)."""
        return self.n_doppler * self.t_sym

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.n_doppler, self.m_delay)


def doppler_bins(n: int) -> np.ndarray:
    """Centered Doppler index values for a grid of size ``n``.

    Returns ``{-floor(n/2), ..., n - 1 - floor(n/2)}`` in storage-row order,
    i.e. ``out[r]`` is the Doppler index stored in row ``r``.
    """
    r = np.arange(n)
    return np.where(r < n - n // 2, r, r - n)


def centered_range(n: int) -> np.ndarray:
    """Centered index values ``-floor(n/2) .. n - 1 - floor(n/2)`` ascending."""
    return np.arange(n) - n // 2


def zc_sequence(length: int, shift: int = 0) -> np.ndarray:
    """Unit-norm root-1 Zadoff-Chu sequence, cyclically shifted.

    ``p[n] = exp(j pi x^2 / L) / sqrt(L)`` with ``x = (n - shift) mod L``
    for even ``L`` and ``exp(j pi x (x+1) / L) / sqrt(L)`` for odd ``L``.
    Distinct cyclic shifts are exactly orthonormal.

    Parameters
    ----------
    length : int
        Sequence length ``L >= 1``.
    shift : int
        Cyclic shift; any integer (reduced mod ``L``).
    """
    if length < 1:
        raise ParameterError("sequence length must be >= 1")
    x = np.mod(np.arange(length) - shift, length).astype(float)
    if length % 2 == 0:
        phase = np.pi * x * x / length
    else:
        phase = np.pi * x * (x + 1.0) / length
    return np.exp(1j * phase) / np.sqrt(length)


def dirichlet_xi(size: int, x) -> np.ndarray | complex:
    """Periodic Dirichlet kernel ``Xi_X(x)`` of period ``size``.

    ``Xi_X(x) = (exp(-j 2 pi x) - 1) / (X (exp(-j 2 pi x / X) - 1))`` with
    the removable singularity ``Xi_X(x) = 1`` at ``x = 0 (mod X)``; points
    within ``1e-12`` of a multiple of ``X`` take the limit value.  The
    magnitude satisfies ``|Xi_X(x)| = |sin(pi x)| / (X |sin(pi x / X)|)``.

    Accepts scalars or arrays; returns the matching shape.
    """
    if size < 1:
        raise ParameterError("kernel period must be >= 1")
    xa = np.asarray(x, dtype=float)
    d = xa - size * np.round(xa / size)
    singular = np.abs(d) < XI_SINGULARITY_TOL
    num = np.exp(-2j * np.pi * xa) - 1.0
    den = size * (np.exp(-2j * np.pi * xa / size) - 1.0)
    den = np.where(singular, 1.0, den)
    out = np.where(singular, 1.0 + 0.0j, num / den)
    if np.isscalar(x):
        return complex(out)
    return out


def steering_vector(theta, n_bs: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """Uniform-linear-array steering vector(s) for angle(s) of arrival.

    ``a[n] = exp(j 2 pi (d/lambda) n cos(theta))`` for ``n = 0..n_bs-1``.
    For an array of ``P`` angles the result has shape ``(n_bs, P)``.
    """
    th = np.asarray(theta, dtype=float)
    n = np.arange(n_bs)
    a = np.exp(2j * np.pi * d_over_lambda * np.outer(n, np.cos(np.atleast_1d(th))))
    if th.ndim == 0:
        return a[:, 0]
    return a


def guard_offsets(m_g: int, n_g: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-column tap offsets ``(k', l')`` of the guard grid.

    Column ``q`` of a measurement matrix corresponds to Doppler offset
    ``k'[q]`` and delay offset ``l'[q]``; ``q = l' * n_g + (k' + floor(n_g/2))``.
    """
    kg = centered_range(n_g)
    lg = np.arange(m_g)
    kk = np.tile(kg, m_g)
    ll = np.repeat(lg, n_g)
    return kk, ll


def guard_column(k_off, l_off, n_g: int) -> np.ndarray:
    """Flat guard-grid column index for tap offsets ``(k', l')``."""
    return np.asarray(l_off) * n_g + (np.asarray(k_off) + n_g // 2)
