"""Pilot layouts, frame assembly, measurement and phase matrices.

Two pilot layouts are supported, both built from cyclically shifted
Zadoff-Chu sequences placed on a delay-Doppler subgrid:

- ``conventional``: every user gets a private delay segment.  Per user the
  footprint is ``[replica M_g][pilot M_p]`` and one trailing ``M_g`` guard
  closes the region, so ``K`` users occupy ``K (M_p + M_g) + M_g`` delay
  columns.
- ``csep`` (channel-statistics-enabled pilots): all users superimpose
  shifts of one long Zadoff-Chu sequence on a shared segment of
  ``K M_p + 2 M_g`` delay columns; users are separated by the shift
  orthogonality instead of guard bands.

In both layouts the pilot block spans ``N_p`` Doppler rows and is extended
by cyclic replication (``floor(N_g/2)`` rows below, ``ceil(N_g/2)`` rows
above in Doppler; the last ``M_g`` columns ahead of the block in delay) so
that every guard-grid tap sees an exact cyclic shift of the block inside
the observation window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from otfs_csep.core import OtfsParams, guard_offsets, zc_sequence
from otfs_csep.exceptions import LayoutError, ParameterError

LAYOUT_KINDS = ("conventional", "csep")


@dataclass(frozen=True)
class PilotLayout:
    """Geometry of one pilot layout; validated against a frame on use."""

    kind: str
    n_users: int
    m_p: int
    n_p: int
    m_g: int
    n_g: int
    k_p: int
    l_p1: int

    def __post_init__(self) -> None:
        if self.kind not in LAYOUT_KINDS:
            raise LayoutError(f"unknown layout kind {self.kind!r}")
        if self.n_users < 1:
            raise LayoutError("need at least one user")
        if self.m_g < 1 or self.n_g < 1:
            raise LayoutError("guard sizes must be >= 1")
        if self.m_p < self.m_g:
            raise LayoutError("pilot width must cover the delay guard (M_p >= M_g)")
        if self.n_p < self.n_g:
            raise LayoutError("pilot height must cover the Doppler guard (N_p >= N_g)")

    @property
    def region_width(self) -> int:
        """Delay columns occupied by pilots plus guards."""
        if self.kind == "conventional":
            return self.n_users * (self.m_p + self.m_g) + self.m_g
        return self.n_users * self.m_p + 2 * self.m_g

    @property
    def region_height(self) -> int:
        """Doppler rows occupied by pilots plus guards."""
        return self.n_p + self.n_g

    @property
    def footprint_start(self) -> int:
        """First delay column of the pilot region (may be negative, mod M)."""
        return self.l_p1 - self.m_g

    @property
    def zc_length(self) -> int:
        """Length of the delay-domain Zadoff-Chu sequence."""
        if self.kind == "conventional":
            return self.m_p
        return self.n_users * self.m_p

    @property
    def scale(self) -> float:
        """Amplitude that makes every pilot cell unit modulus."""
        return float(np.sqrt(self.zc_length * self.n_p))

    def green_start(self, user: int) -> int:
        """First delay column of ``user``'s pilot block (0-based user)."""
        self._check_user(user)
        if self.kind == "conventional":
            return self.l_p1 + user * (self.m_p + self.m_g)
        return self.l_p1

    def delay_shift(self, user: int) -> int:
        """Zadoff-Chu shift carrying ``user`` in the delay domain."""
        self._check_user(user)
        if self.kind == "conventional":
            return 0
        return user * self.m_p

    def observation_window(self, user: int) -> tuple[int, int]:
        """``(first delay column, width)`` of the user's observation window."""
        if self.kind == "conventional":
            return self.green_start(user), self.m_p
        self._check_user(user)
        return self.l_p1, self.n_users * self.m_p

    @property
    def n_atoms(self) -> int:
        return self.m_g * self.n_g

    def _check_user(self, user: int) -> None:
        if not 0 <= user < self.n_users:
            raise ParameterError(f"user {user} outside 0..{self.n_users - 1}")


def make_layout(
    kind: str,
    params: OtfsParams,
    n_users: int,
    m_p: int,
    n_p: int,
    m_g: int,
    n_g: int,
    k_p: int | None = None,
    l_p1: int | None = None,
) -> PilotLayout:
    """Build and validate a pilot layout for the given frame."""
    layout = PilotLayout(
        kind=kind,
        n_users=n_users,
        m_p=m_p,
        n_p=n_p,
        m_g=m_g,
        n_g=n_g,
        k_p=-(n_p // 2) if k_p is None else k_p,
        l_p1=m_g if l_p1 is None else l_p1,
    )
    check_fit(layout, params)
    return layout


def check_fit(layout: PilotLayout, params: OtfsParams) -> None:
    """Raise :class:`LayoutError` if the layout does not fit the frame."""
    if layout.region_width > params.m_delay:
        raise LayoutError(
            f"pilot region width {layout.region_width} exceeds M={params.m_delay}"
        )
    if layout.region_height > params.n_doppler:
        raise LayoutError(
            f"pilot region height {layout.region_height} exceeds N={params.n_doppler}"
        )


def pilot_block(layout: PilotLayout, user: int) -> np.ndarray:
    """The user's pilot block, shape ``(n_p, zc_length)``, unit-modulus cells.

    Row ``i`` / column ``j`` hold Doppler index ``k_p + i`` and delay column
    ``l_p1 + j`` (conventional blocks are indexed from their own green
    start).  The block is the outer product of the Doppler Zadoff-Chu
    sequence and the (shifted) delay sequence, scaled to unit modulus.
    """
    zd = zc_sequence(layout.zc_length, layout.delay_shift(user))
    zk = zc_sequence(layout.n_p, 0)
    return layout.scale * np.outer(zk, zd)


def _extended_block(layout: PilotLayout, user: int) -> np.ndarray:
    """Pilot block with cyclic Doppler extension, ``(n_p + n_g, zc_length)``."""
    block = pilot_block(layout, user)
    rows = np.arange(-(layout.n_g // 2), layout.n_p + (layout.n_g + 1) // 2)
    return block[np.mod(rows, layout.n_p), :]


def pilot_frame(layout: PilotLayout, params: OtfsParams, user: int) -> np.ndarray:
    """The user's transmitted frame with pilots only (data cells zero)."""
    check_fit(layout, params)
    n, m = params.grid_shape
    frame = np.zeros((n, m), dtype=complex)
    ext = _extended_block(layout, user)
    rows = np.mod(
        np.arange(layout.k_p - layout.n_g // 2, layout.k_p + layout.n_p + (layout.n_g + 1) // 2),
        n,
    )
    start = layout.green_start(user)
    cols = np.mod(np.arange(start, start + layout.zc_length), m)
    frame[np.ix_(rows, cols)] = ext
    # delay replication: the block's last m_g columns precede it
    rep_cols = np.mod(np.arange(start - layout.m_g, start), m)
    frame[np.ix_(rows, rep_cols)] = ext[:, -layout.m_g :]
    return frame


def footprint_mask(layout: PilotLayout, params: OtfsParams) -> np.ndarray:
    """Boolean ``(N, M)`` mask of the pilot-plus-guard region (all users)."""
    check_fit(layout, params)
    n, m = params.grid_shape
    mask = np.zeros((n, m), dtype=bool)
    rows = np.mod(
        np.arange(layout.k_p - layout.n_g // 2, layout.k_p + layout.n_p + (layout.n_g + 1) // 2),
        n,
    )
    cols = np.mod(
        np.arange(layout.footprint_start, layout.footprint_start + layout.region_width), m
    )
    mask[np.ix_(rows, cols)] = True
    return mask


def data_cell_count(layout: PilotLayout, params: OtfsParams) -> int:
    """Number of data cells per user frame."""
    check_fit(layout, params)
    return params.n_doppler * params.m_delay - layout.region_height * layout.region_width


def build_frame(
    layout: PilotLayout, params: OtfsParams, user: int, data: np.ndarray | None = None
) -> np.ndarray:
    """Assemble the user's transmitted frame: pilots plus data symbols.

    ``data`` must hold exactly :func:`data_cell_count` symbols; they fill
    the cells outside the pilot footprint in storage (row-major) order.
    """
    frame = pilot_frame(layout, params, user)
    if data is not None:
        mask = ~footprint_mask(layout, params)
        data = np.asarray(data)
        if data.size != int(mask.sum()):
            raise ParameterError(
                f"expected {int(mask.sum())} data symbols, got {data.size}"
            )
        frame[mask] = data.ravel()
    return frame


def extract_pilot_observations(
    cube: np.ndarray, layout: PilotLayout, params: OtfsParams, user: int
) -> np.ndarray:
    """Per-antenna pilot observations, shape ``(n_bs, window cells)``.

    Cells are vectorized delay-major / Doppler-fastest: observation ``p``
    is delay column ``l_start + p // n_p``, Doppler row ``k_p + p % n_p``.
    """
    check_fit(layout, params)
    n, m = params.grid_shape
    if cube.shape != (params.n_bs, n, m):
        raise ParameterError("cube shape does not match params")
    l_start, width = layout.observation_window(user)
    rows = np.mod(np.arange(layout.k_p, layout.k_p + layout.n_p), n)
    cols = np.mod(np.arange(l_start, l_start + width), m)
    # (n_bs, n_p, width) -> delay-major flattening
    window = cube[:, rows[:, None], cols[None, :]]
    return window.transpose(0, 2, 1).reshape(params.n_bs, width * layout.n_p)


def measurement_matrix(layout: PilotLayout, params: OtfsParams, user: int) -> np.ndarray:
    """Dictionary matrix mapping guard taps to pilot observations.

    Shape ``(window cells, m_g * n_g)``; column ``q = l' n_g + (k' +
    floor(n_g/2))`` is the Kronecker product of the delay sequence shifted
    by ``delay_shift(user) + l'`` and the Doppler sequence shifted by
    ``k'``, matching the observation vectorization of
    :func:`extract_pilot_observations`.  Columns are exactly orthonormal
    for one user.
    """
    check_fit(layout, params)
    length = layout.zc_length
    base_shift = layout.delay_shift(user)
    s_delay = np.stack(
        [zc_sequence(length, base_shift + lp) for lp in range(layout.m_g)], axis=1
    )
    s_dopp = np.stack(
        [
            zc_sequence(layout.n_p, kp)
            for kp in range(-(layout.n_g // 2), layout.n_g - layout.n_g // 2)
        ],
        axis=1,
    )
    a4 = np.einsum("iq,jp->ijqp", s_delay, s_dopp)
    rows = length * layout.n_p
    return a4.reshape(rows, layout.m_g * layout.n_g)


def observation_delays(layout: PilotLayout, params: OtfsParams, user: int) -> np.ndarray:
    """Absolute delay column (mod M) of each vectorized observation cell."""
    l_start, width = layout.observation_window(user)
    ll = l_start + np.repeat(np.arange(width), layout.n_p)
    return np.mod(ll, params.m_delay)


def phase_matrix_coarse(
    layout: PilotLayout, params: OtfsParams, user: int
) -> np.ndarray:
    """On-grid Doppler phase compensation, shape ``(window cells, atoms)``.

    Entry ``(p, q)`` is ``exp(j 2 pi k' (M_CP + l - l') / (N (M + M_CP)))``
    for observation delay ``l`` and tap ``(k', l')``.
    """
    ll = observation_delays(layout, params, user).astype(float)
    kk, lp = guard_offsets(layout.m_g, layout.n_g)
    num = np.outer(params.m_cp + ll, kk.astype(float)) - (kk * lp)[None, :].astype(float)
    return np.exp(
        2j * np.pi * num / (params.n_doppler * (params.m_delay + params.m_cp))
    )


def phase_matrix_refined(
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    paths: list[tuple[float, float, np.ndarray]],
) -> np.ndarray:
    """Phase compensation with per-path fractional refinement.

    ``paths`` holds ``(doppler_taps, delay_taps, support columns)`` per
    estimated path; the listed columns receive that path's fractional
    phase ``exp(j 2 pi (k+kappa) (M_CP + l - l' - iota) / (N (M+M_CP)))``
    and every other column keeps the on-grid compensation of
    :func:`phase_matrix_coarse`.
    """
    ll = observation_delays(layout, params, user).astype(float)
    out = phase_matrix_coarse(layout, params, user)
    denom = params.n_doppler * (params.m_delay + params.m_cp)
    for ktaps, ltaps, cols in paths:
        col = np.exp(2j * np.pi * ktaps * (params.m_cp + ll - ltaps) / denom)
        out[:, np.asarray(cols, dtype=int)] = col[:, None]
    return out


def overhead(layout: PilotLayout, params: OtfsParams) -> float:
    """Fraction of the frame spent on pilots and guards."""
    check_fit(layout, params)
    return layout.region_height * layout.region_width / (
        params.n_doppler * params.m_delay
    )


def describe_layout(layout: PilotLayout, params: OtfsParams) -> str:
    """Human-readable table of the layout geometry."""
    check_fit(layout, params)
    n, m = params.grid_shape
    k_lo = layout.k_p - layout.n_g // 2
    k_hi = layout.k_p + layout.n_p + (layout.n_g + 1) // 2 - 1
    lines = [
        f"pilot layout      : {layout.kind}",
        f"frame (N x M)     : {n} x {m}",
        f"users             : {layout.n_users}",
        f"pilot block       : N_p={layout.n_p} x M_p={layout.m_p}"
        f" (delay sequence length {layout.zc_length})",
        f"guards            : N_g={layout.n_g}, M_g={layout.m_g}",
        f"Doppler rows      : k={layout.k_p}..{layout.k_p + layout.n_p - 1}"
        f" (footprint {k_lo}..{k_hi})",
        f"region (cols x rows): {layout.region_width} x {layout.region_height}",
        f"overhead          : {overhead(layout, params):.4f}",
        f"data cells / user : {data_cell_count(layout, params)}",
    ]
    for u in range(layout.n_users):
        gs = layout.green_start(u)
        l_start, width = layout.observation_window(u)
        lines.append(
            f"user {u}            : block cols {gs}..{gs + layout.zc_length - 1},"
            f" replicas {gs - layout.m_g}..{gs - 1},"
            f" shift {layout.delay_shift(u)},"
            f" window {l_start}..{l_start + width - 1}"
        )
    return "\n".join(lines) + "\n"
