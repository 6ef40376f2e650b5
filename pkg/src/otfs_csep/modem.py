"""OTFS modulation, time-frequency propagation and cube fixtures.

Propagation follows the time-frequency route: ISFFT of each user's
delay-Doppler frame, per-path subcarrier convolution with the sampled
cross-ambiguity kernel plus per-symbol Doppler phase, steering across the
array, additive noise, then SFFT per antenna back to delay-Doppler.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from otfs_csep.channel import UserChannel
from otfs_csep.core import OtfsParams, dirichlet_xi, steering_vector
from otfs_csep.exceptions import ParameterError

_CUBE_HEADER = struct.Struct("<8q")


def isfft(grid: np.ndarray) -> np.ndarray:
    """Delay-Doppler to time-frequency transform of an ``(N, M)`` grid.

    ``X_TF[n, m] = (1/sqrt(NM)) sum_{k,l} X_DD[k, l] exp(-j2pi(ml/M - nk/N))``.
    Unitary; inverse of :func:`sfft`.
    """
    n, m = grid.shape
    return np.fft.ifft(np.fft.fft(grid, axis=1), axis=0) * np.sqrt(n / m)


def sfft(grid: np.ndarray) -> np.ndarray:
    """Time-frequency to delay-Doppler transform of an ``(N, M)`` grid.

    ``Y_DD[k, l] = (1/sqrt(NM)) sum_{n,m} Y_TF[n, m] exp(-j2pi(nk/N - ml/M))``.
    """
    n, m = grid.shape
    return np.fft.fft(np.fft.ifft(grid, axis=1), axis=0) * np.sqrt(m / n)


def cross_ambiguity(tau: float, f_offset, params: OtfsParams):
    """Sampled transmit/receive pulse cross-ambiguity at delay ``tau``.

    The matched filter integrates exactly ``M`` samples of the received
    symbol, the window starting at sample ``ceil(M_CP - M delta_f tau)``,
    with the demodulation phase referenced to the window start.  The
    resulting value is the periodic Dirichlet kernel
    ``Xi_M(f_offset * T)`` and is independent of ``tau`` for any delay
    covered by the cyclic prefix.

    Parameters
    ----------
    tau : float
        Path delay in seconds; must satisfy ``0 <= tau <= T_CP``.
    f_offset : float or array
        Frequency mismatch in Hz (subcarrier offset minus Doppler).
    """
    if tau < 0 or tau > params.t_cp + 1e-15:
        raise ParameterError("delay must be covered by the cyclic prefix")
    return dirichlet_xi(params.m_delay, np.asarray(f_offset, float) * params.t_ofdm)


def propagate(
    frames: list[np.ndarray],
    channels: list[UserChannel],
    params: OtfsParams,
    snr_db: float | None,
    rng: np.random.Generator | None = None,
    noise_unit: np.ndarray | None = None,
) -> np.ndarray:
    """Propagate per-user DD frames through their channels to the array.

    Parameters
    ----------
    frames : list of (N, M) complex arrays
        One delay-Doppler frame per user, aligned with ``channels``.
    channels : list of UserChannel
        Per-user path sets; every delay tap must be covered by the CP.
    snr_db : float or None
        Per-sample SNR for the additive noise, ``None`` for noiseless.
        The noise variance is ``10**(-snr_db/10)`` per complex sample
        (unit signal power, unit path-loss normalization).
    rng : numpy Generator
        Source for the noise draw; required when ``snr_db`` is set and no
        pre-drawn noise is supplied.
    noise_unit : optional (n_bs, N, M) complex array
        Pre-drawn unit-variance noise, scaled internally; lets callers
        reuse one draw across an SNR sweep.

    Returns
    -------
    (n_bs, N, M) complex array
        Received delay-Doppler cube, antenna-major.
    """
    n, m = params.grid_shape
    if len(frames) != len(channels):
        raise ParameterError("frames and channels must align user by user")
    for frame in frames:
        if frame.shape != (n, m):
            raise ParameterError(f"frame shape {frame.shape} does not match grid {(n, m)}")

    y_tfs = np.zeros((params.n_bs, n, m), dtype=complex)
    d = np.arange(-(m - 1), m, dtype=float)
    nfft = 2 * m
    mm = np.arange(m, dtype=float)
    nn = np.arange(n, dtype=float)
    for frame, channel in zip(frames, channels):
        if not np.any(frame):
            continue
        x_tf = isfft(np.asarray(frame, dtype=complex))
        for path in channel.paths:
            if path.delay_taps > params.m_cp:
                raise ParameterError("path delay exceeds the cyclic prefix")
            dtaps = path.delay_taps
            ktaps = path.doppler_taps
            # subcarrier kernel: Xi_M(d - nu T) over offsets d
            nu_t = ktaps * m / (n * (m + params.m_cp))
            g = dirichlet_xi(m, d - nu_t)
            ramp = np.exp(-2j * np.pi * mm * dtaps / m)
            v = x_tf * ramp[None, :]
            conv = np.fft.ifft(np.fft.fft(v, nfft, axis=1) * np.fft.fft(g, nfft), axis=1)
            conv = conv[:, m - 1 : 2 * m - 1]
            # per-symbol Doppler phase accumulated to the data window start
            w = path.gain * np.exp(
                2j * np.pi * ktaps * (nn / n + (params.m_cp - dtaps) / (n * (m + params.m_cp)))
            )
            contrib = w[:, None] * conv
            a = steering_vector(path.theta, params.n_bs, params.d_over_lambda)
            y_tfs += a[:, None, None] * contrib[None, :, :]

    if snr_db is not None:
        sigma = 10.0 ** (-snr_db / 20.0)
        if noise_unit is None:
            if rng is None:
                raise ParameterError("rng required to draw noise")
            noise_unit = (
                rng.standard_normal(y_tfs.shape) + 1j * rng.standard_normal(y_tfs.shape)
            ) / np.sqrt(2.0)
        elif noise_unit.shape != y_tfs.shape:
            raise ParameterError("noise_unit shape must match the received cube")
        y_tfs = y_tfs + sigma * noise_unit

    cube = np.empty_like(y_tfs)
    for nb in range(params.n_bs):
        cube[nb] = sfft(y_tfs[nb])
    return cube


def save_cube(cube: np.ndarray, dest) -> None:
    """Write a received cube to a binary file.

    Layout: 8 little-endian int64 header values ``(n_bs, N, M, 0...0)``
    followed by C-ordered little-endian complex128 samples.
    """
    if cube.ndim != 3:
        raise ParameterError("cube must have shape (n_bs, N, M)")
    header = _CUBE_HEADER.pack(cube.shape[0], cube.shape[1], cube.shape[2], 0, 0, 0, 0, 0)
    data = np.ascontiguousarray(cube, dtype="<c16").tobytes()
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        with open(dest, "wb") as fh:
            fh.write(header)
            fh.write(data)
    else:
        dest.write(header)
        dest.write(data)


def load_cube(src) -> np.ndarray:
    """Read a cube written by :func:`save_cube`."""
    if isinstance(src, (str, bytes)) or hasattr(src, "__fspath__"):
        with open(src, "rb") as fh:
            raw = fh.read()
    else:
        raw = src.read()
    if len(raw) < _CUBE_HEADER.size:
        raise ParameterError("cube file too short for its header")
    n_bs, n, m, *reserved = _CUBE_HEADER.unpack_from(raw)
    if any(reserved):
        raise ParameterError("reserved header fields must be zero")
    expected = _CUBE_HEADER.size + n_bs * n * m * 16
    if n_bs < 1 or n < 1 or m < 1 or len(raw) != expected:
        raise ParameterError("cube payload does not match its header")
    flat = np.frombuffer(raw, dtype="<c16", offset=_CUBE_HEADER.size)
    return flat.reshape(n_bs, n, m).astype(complex)


def cube_to_bytes(cube: np.ndarray) -> bytes:
    """Serialize a cube to bytes (same layout as :func:`save_cube`)."""
    buf = io.BytesIO()
    save_cube(cube, buf)
    return buf.getvalue()
