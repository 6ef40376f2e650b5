"""Sparse delay-Doppler channel model: paths, sampling, DDS matrices.

Each propagation path is described by a delay tap ``l_int + iota`` (integer
plus fractional part), a Doppler tap ``k_int + kappa``, an angle of arrival
``theta`` seen by the base-station array and a complex gain.  On the
delay-Doppler grid a path appears as a separable product of two periodic
Dirichlet kernels, scaled per antenna by the steering vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from otfs_csep.core import (
    OtfsParams,
    dirichlet_xi,
    doppler_bins,
    guard_offsets,
    steering_vector,
)
from otfs_csep.exceptions import ParameterError

C_LIGHT = 299792458.0

#: fractional parts are kept this far away from +-1/2 when sampling
FRACTIONAL_MARGIN = 1e-6


@dataclass(frozen=True)
class PathParams:
    """One propagation path in delay-Doppler-angle coordinates."""

    l_int: int
    iota: float
    k_int: int
    kappa: float
    theta: float
    gain: complex

    def __post_init__(self) -> None:
        if self.l_int < 0:
            raise ParameterError("integer delay tap must be >= 0")
        if not -0.5 <= self.iota <= 0.5 or not -0.5 <= self.kappa <= 0.5:
            raise ParameterError("fractional taps must lie in [-1/2, 1/2]")
        if not 0.0 < self.theta < np.pi:
            raise ParameterError("angle of arrival must lie in (0, pi)")

    @property
    def delay_taps(self) -> float:
        return self.l_int + self.iota

    @property
    def doppler_taps(self) -> float:
        return self.k_int + self.kappa

    def tau(self, params: OtfsParams) -> float:
        """Path delay in seconds."""
        return self.delay_taps / (params.m_delay * params.delta_f)

    def nu(self, params: OtfsParams) -> float:
        """Path Doppler shift in Hz."""
        return self.doppler_taps / (params.n_doppler * params.t_sym)


@dataclass(frozen=True)
class UserChannel:
    """All paths of one user."""

    user: int
    paths: tuple[PathParams, ...]

    def __post_init__(self) -> None:
        taps = [(p.l_int, p.k_int) for p in self.paths]
        if len(set(taps)) != len(taps):
            raise ParameterError("paths must occupy distinct (l_int, k_int) taps")


def max_doppler_taps(speed_kmh: float, params: OtfsParams) -> float:
    """Maximum Doppler shift in Doppler-bin units at the given speed.

    ``nu_max = (v f_c / c) * N * T_sym`` for speed ``v`` in km/h.
    """
    if speed_kmh < 0:
        raise ParameterError("speed must be >= 0")
    doppler_hz = (speed_kmh / 3.6) * params.f_c / C_LIGHT
    return doppler_hz * params.n_doppler * params.t_sym


def sample_channel(
    user: int,
    params: OtfsParams,
    m_g: int,
    n_g: int,
    n_paths: int,
    rng: np.random.Generator,
    speed_kmh: float = 300.0,
) -> UserChannel:
    """Draw one user's sparse channel inside the guard region.

    Integer delay taps are uniform on ``{0..m_g-1}``, fractional parts
    uniform on ``(-1/2, 1/2)`` (kept a small margin away from the
    endpoints, reflected to keep total delay non-negative at tap zero),
    Doppler taps satisfy ``|k_int + kappa| <= min(nu_max, floor(n_g/2))``,
    angles are uniform on ``(0, pi)`` and gains are circularly-symmetric
    complex Gaussian with total mean power one.
    """
    if n_paths < 1:
        raise ParameterError("need at least one path")
    if n_paths > m_g * n_g:
        raise ParameterError("more paths than distinct guard taps")
    nu_max = min(max_doppler_taps(speed_kmh, params), n_g // 2)
    if nu_max <= FRACTIONAL_MARGIN:
        raise ParameterError("Doppler budget too small to place any path")
    taps: set[tuple[int, int]] = set()
    paths = []
    k_lim = n_g // 2
    attempts = 0
    while len(paths) < n_paths:
        attempts += 1
        if attempts > 10000 * n_paths:
            raise ParameterError("could not place the requested paths in the guard region")
        l_int = int(rng.integers(0, m_g))
        k_int = int(rng.integers(-k_lim, k_lim + 1))
        if (l_int, k_int) in taps:
            continue
        lo = -0.5 + FRACTIONAL_MARGIN
        hi = 0.5 - FRACTIONAL_MARGIN
        iota = float(rng.uniform(lo, hi))
        kappa = float(rng.uniform(lo, hi))
        if l_int == 0:
            iota = abs(iota)
        if abs(k_int + kappa) > nu_max:
            continue
        theta = float(rng.uniform(0.0, np.pi))
        gain = (rng.standard_normal() + 1j * rng.standard_normal()) * np.sqrt(0.5 / n_paths)
        taps.add((l_int, k_int))
        paths.append(
            PathParams(l_int=l_int, iota=iota, k_int=k_int, kappa=kappa, theta=theta, gain=complex(gain))
        )
    return UserChannel(user=user, paths=tuple(paths))


def sample_channels(
    params: OtfsParams,
    n_users: int,
    m_g: int,
    n_g: int,
    n_paths: int,
    rng: np.random.Generator,
    speed_kmh: float = 300.0,
) -> list[UserChannel]:
    """Draw independent channels for ``n_users`` users."""
    return [
        sample_channel(u, params, m_g, n_g, n_paths, rng, speed_kmh) for u in range(n_users)
    ]


def phase_factor(path: PathParams, l, params: OtfsParams):
    """Delay-dependent Doppler phase ``Phi(l)`` of the DDS relation.

    ``Phi(l) = exp(j 2 pi (k+kappa) (M_CP + l - l_int - iota) / (N (M + M_CP)))``
    where ``l`` is the absolute output delay index.
    """
    num = path.doppler_taps * (params.m_cp + np.asarray(l, dtype=float) - path.delay_taps)
    return np.exp(2j * np.pi * num / (params.n_doppler * (params.m_delay + params.m_cp)))


def path_kernel(path: PathParams, params: OtfsParams, k_off, l_off):
    """Per-path delay-Doppler spreading kernel at tap offsets ``(k', l')``.

    ``h[k', l'] = gain * Xi_N(k' - k - kappa) * Xi_M(-(l' - l - iota))``.
    Broadcasts over ``k_off`` and ``l_off`` of equal shape.
    """
    xi_k = dirichlet_xi(params.n_doppler, np.asarray(k_off, float) - path.doppler_taps)
    xi_l = dirichlet_xi(params.m_delay, -(np.asarray(l_off, float) - path.delay_taps))
    return path.gain * xi_k * xi_l


def path_kernel_grid(path: PathParams, params: OtfsParams) -> np.ndarray:
    """Full-frame spreading kernel, shape ``(N, M)`` in storage order.

    Row ``r`` holds Doppler offset ``doppler_bins(N)[r]``; the kernel is a
    separable outer product of the two Dirichlet kernels.
    """
    kk = doppler_bins(params.n_doppler).astype(float)
    ll = np.arange(params.m_delay, dtype=float)
    xi_k = dirichlet_xi(params.n_doppler, kk - path.doppler_taps)
    xi_l = dirichlet_xi(params.m_delay, -(ll - path.delay_taps))
    return path.gain * np.outer(xi_k, xi_l)


def dds_channel_matrix(
    channel: UserChannel, params: OtfsParams, m_g: int, n_g: int
) -> np.ndarray:
    """True DDS channel over the guard grid, shape ``(n_bs, m_g * n_g)``.

    Entry ``(n, q)`` is ``sum_i a_n(theta_i) h_i[k'(q), l'(q)]`` with the
    guard-grid column convention of :func:`otfs_csep.core.guard_offsets`.
    """
    kk, ll = guard_offsets(m_g, n_g)
    h = np.zeros((params.n_bs, m_g * n_g), dtype=complex)
    for path in channel.paths:
        a = steering_vector(path.theta, params.n_bs, params.d_over_lambda)
        h += np.outer(a, path_kernel(path, params, kk, ll))
    return h


def channels_to_text(channels: list[UserChannel]) -> str:
    """Serialize channels as one comma-separated path record per line.

    Fields: ``user, l_int, iota, k_int, kappa, theta, re_gain, im_gain``.
    Floats use ``repr`` so a round trip is exact.
    """
    lines = ["# user,l_int,iota,k_int,kappa,theta,re_gain,im_gain"]
    for ch in channels:
        for p in ch.paths:
            lines.append(
                f"{ch.user},{p.l_int},{p.iota!r},{p.k_int},{p.kappa!r},"
                f"{p.theta!r},{p.gain.real!r},{p.gain.imag!r}"
            )
    return "\n".join(lines) + "\n"


def channels_from_text(text: str) -> list[UserChannel]:
    """Parse the output of :func:`channels_to_text`."""
    per_user: dict[int, list[PathParams]] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise ParameterError(f"malformed path record: {line!r}")
        u = int(parts[0])
        path = PathParams(
            l_int=int(parts[1]),
            iota=float(parts[2]),
            k_int=int(parts[3]),
            kappa=float(parts[4]),
            theta=float(parts[5]),
            gain=complex(float(parts[6]), float(parts[7])),
        )
        per_user.setdefault(u, []).append(path)
    return [UserChannel(user=u, paths=tuple(ps)) for u, ps in sorted(per_user.items())]
