"""Channel estimation pipelines: ESPRIT, spatial projection, SOMP, refinement.

Both pipelines share the same building blocks:

- angles of arrival from the shift invariance of the array covariance
  (ESPRIT),
- a least-squares spatial projection that splits the multi-antenna
  observation into per-path delay-Doppler observations,
- simultaneous orthogonal matching pursuit (SOMP) over the guard-grid
  dictionary,
- a magnitude-ratio refinement of the fractional delay/Doppler parts and a
  complex gain fit at the refined taps.

The conventional pipeline runs ESPRIT on the raw per-user observation and
projects once; rounds re-run SOMP with the refined per-path phase matrix.
The superimposed (csep) pipeline first finds the joint support with SOMP
across all antennas, reconstructs the DDS channel on that support, and
then estimates angles, projects and refines per round.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from otfs_csep.analysis import nmse
from otfs_csep.channel import PathParams, UserChannel, dds_channel_matrix
from otfs_csep.core import (
    OtfsParams,
    dirichlet_xi,
    guard_column,
    guard_offsets,
    steering_vector,
)
from otfs_csep.exceptions import (
    DegenerateSubspaceError,
    EstimationError,
    NearCollinearAnglesError,
    NoPathError,
    ParameterError,
)
from otfs_csep.modem import propagate
from otfs_csep.pilots import (
    PilotLayout,
    build_frame,
    extract_pilot_observations,
    measurement_matrix,
    observation_delays,
    phase_matrix_coarse,
    phase_matrix_refined,
)

#: eigenvalue ratio below which the signal subspace counts as degenerate
SUBSPACE_RTOL = 1e-10

#: steering-matrix condition number above which projection is refused
COLLINEAR_COND = 1e8

#: relative truncation for pseudo-inverse / least-squares solves
PINV_RCOND = 1e-10

THETA_EPS = 1e-9

#: relative residual improvement a rescue replacement must deliver
RESCUE_IMPROVEMENT = 1e-3


@dataclass(frozen=True)
class EstimateReport:
    """Result of one user's channel estimation.

    ``error`` is ``None`` on success; a failed user carries the failure
    message, an empty path tuple and an all-zero channel so the other
    users' reports stay usable.
    """

    user: int
    paths: tuple[PathParams, ...]
    h_hat: np.ndarray
    residual_norms: tuple[float, ...]
    n_rounds: int
    error: str | None = None


def esprit_aoa(observations: np.ndarray, n_paths: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """Angles of arrival from a multi-antenna observation matrix.

    Eigendecomposes the forward-backward averaged covariance
    ``Y Y^H + J (Y Y^H)* J`` (the exchange matrix ``J`` preserves uniform
    linear array steering and decorrelates closely spaced paths), takes
    the ``n_paths`` dominant eigenvectors and solves the shift-invariance
    equation between the upper and lower subarrays; phases map to angles
    through the array geometry.  Returns angles in radians, sorted
    ascending.

    Raises
    ------
    DegenerateSubspaceError
        If the ``n_paths``-th eigenvalue is below ``1e-10`` of the first.
    """
    n_bs = observations.shape[0]
    if not 1 <= n_paths < n_bs:
        raise ParameterError("need 1 <= n_paths < n_bs antennas")
    r = observations @ observations.conj().T
    r = r + np.flipud(np.fliplr(r.conj()))
    w, v = np.linalg.eigh(r)
    w = w[::-1]
    v = np.fliplr(v)
    if w[0] <= 0 or w[n_paths - 1] < SUBSPACE_RTOL * w[0]:
        raise DegenerateSubspaceError(
            f"signal subspace rank < {n_paths} (eigenvalue ratio "
            f"{w[n_paths - 1] / w[0] if w[0] > 0 else 0:.2e})"
        )
    u = v[:, :n_paths]
    psi = np.linalg.pinv(u[:-1], rcond=PINV_RCOND) @ u[1:]
    phases = np.angle(np.linalg.eigvals(psi))
    cosines = np.clip(phases / (2 * np.pi * d_over_lambda), -1.0, 1.0)
    return np.sort(np.arccos(cosines))


def spatial_project(
    observations: np.ndarray, thetas: np.ndarray, d_over_lambda: float = 0.5
) -> np.ndarray:
    """Split a multi-antenna observation into per-path rows.

    Computes ``(A^H A)^{-1} A^H Y`` for the steering matrix ``A`` of the
    given angles; row ``i`` of the result is the delay-Doppler observation
    of the path arriving from ``thetas[i]``.

    Raises
    ------
    NearCollinearAnglesError
        If the steering matrix condition number exceeds ``1e8``.
    """
    a = steering_vector(np.asarray(thetas, float), observations.shape[0], d_over_lambda)
    if np.linalg.cond(a) > COLLINEAR_COND:
        raise NearCollinearAnglesError("steering vectors nearly collinear")
    gram = a.conj().T @ a
    return np.linalg.solve(gram, a.conj().T @ observations)


def tap_neighborhood(atom: int, m_g: int, n_g: int, radius: int = 1) -> np.ndarray:
    """Guard-grid columns within ``radius`` taps of ``atom`` (box, clipped)."""
    k0 = atom % n_g
    l0 = atom // n_g
    kk = np.arange(max(k0 - radius, 0), min(k0 + radius, n_g - 1) + 1)
    ll = np.arange(max(l0 - radius, 0), min(l0 + radius, m_g - 1) + 1)
    return (ll[:, None] * n_g + kk[None, :]).ravel()


def somp(
    dictionary: np.ndarray,
    observations: np.ndarray,
    n_paths: int,
    m_g: int,
    n_g: int,
    radius: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Simultaneous OMP with neighborhood-augmented support.

    Runs ``n_paths`` greedy iterations.  Each picks the atom maximizing the
    squared correlation magnitude with the residual summed across all
    observation columns (ties break toward the smallest column index),
    augments the support with the atom's ``+-radius`` tap neighborhood and
    re-fits all observations jointly by least squares.

    Parameters
    ----------
    dictionary : (cells, m_g * n_g) array
        Measurement matrix (optionally phase compensated).
    observations : (cells, n_obs) array
        One or more observation columns sharing the support.

    Returns
    -------
    support : int array
        Sorted selected columns (peaks plus neighborhoods).
    coef : (len(support), n_obs) array
        Joint least-squares coefficients on the final support.
    peaks : (n_paths,) int array
        The greedily selected atom of each iteration.
    """
    obs = np.atleast_2d(observations)
    if obs.shape[0] != dictionary.shape[0]:
        raise ParameterError("observations and dictionary row counts differ")
    if dictionary.shape[1] != m_g * n_g:
        raise ParameterError("dictionary columns do not match the guard grid")
    residual = obs
    in_support = np.zeros(dictionary.shape[1], dtype=bool)
    peaks: list[int] = []
    coef = np.zeros((0, obs.shape[1]), dtype=complex)
    for _ in range(n_paths):
        corr = dictionary.conj().T @ residual
        metric = np.sum(np.abs(corr) ** 2, axis=1)
        metric[peaks] = -1.0
        best = int(np.argmax(metric))
        if metric[best] <= 0:
            raise NoPathError("residual correlates with no dictionary atom")
        peaks.append(best)
        in_support[tap_neighborhood(best, m_g, n_g, radius)] = True
        support = np.flatnonzero(in_support)
        coef, *_ = np.linalg.lstsq(dictionary[:, support], obs, rcond=PINV_RCOND)
        residual = obs - dictionary[:, support] @ coef
    return np.flatnonzero(in_support), coef, np.asarray(peaks)


def _axis_neighbors(
    peak: int, layout: PilotLayout
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """In-grid ``(side, column)`` neighbors of a peak cell per axis."""
    kk, ll = guard_offsets(layout.m_g, layout.n_g)
    k0 = int(kk[peak])
    l0 = int(ll[peak])
    n_g, m_g = layout.n_g, layout.m_g
    dopp_cols = []
    if k0 + 1 <= n_g - 1 - n_g // 2:
        dopp_cols.append((+1, l0 * n_g + (k0 + 1 + n_g // 2)))
    if k0 - 1 >= -(n_g // 2):
        dopp_cols.append((-1, l0 * n_g + (k0 - 1 + n_g // 2)))
    delay_cols = []
    if l0 + 1 <= m_g - 1:
        delay_cols.append((+1, (l0 + 1) * n_g + (k0 + n_g // 2)))
    if l0 - 1 >= 0:
        delay_cols.append((-1, (l0 - 1) * n_g + (k0 + n_g // 2)))
    return delay_cols, dopp_cols


def _fractional_candidates(
    values: np.ndarray,
    support: np.ndarray,
    peak: int,
    layout: PilotLayout,
) -> tuple[list[float], list[float]]:
    """Fractional delay/Doppler candidates from peak-neighbor magnitude ratios.

    For each in-grid neighbor of the peak cell, the ratio
    ``rho = |h_nb| / |h_peak|`` yields one candidate pointing toward that
    neighbor, ``rho / (1 + rho)``, and one pointing away,
    ``rho / (1 - rho)`` (the same magnitude-ratio rule solved under the
    opposite-side hypothesis, capped at one half).  A toward candidate
    above one half arises when the neighbor outweighs the peak and
    re-anchors the path onto the neighbor cell.  Zero is always included.
    Returns the ``(delay, doppler)`` candidate lists.
    """
    pos = {int(c): i for i, c in enumerate(support)}
    if peak not in pos:
        raise ParameterError("peak not contained in support")
    mag = np.abs(values)
    peak_mag = mag[pos[peak]]
    if peak_mag <= 0:
        raise NoPathError("claimed peak has zero magnitude")

    def axis(nb_cols: list[tuple[int, int]]) -> list[float]:
        cands = {0.0}
        for side, col in nb_cols:
            if col not in pos:
                continue
            rho = float(mag[pos[col]]) / peak_mag
            cands.add(side * rho / (1.0 + rho))
            if rho < 1.0:
                cands.add(-side * min(rho / (1.0 - rho), 0.5))
        return sorted(cands)

    delay_cols, dopp_cols = _axis_neighbors(peak, layout)
    return axis(delay_cols), axis(dopp_cols)


def refine_path(
    values: np.ndarray,
    support: np.ndarray,
    peak: int,
    layout: PilotLayout,
    params: OtfsParams,
) -> tuple[PathParams, np.ndarray]:
    """Fractional refinement of one path from its support coefficients.

    ``values`` holds the path's complex coefficients aligned with
    ``support`` (guard-grid columns).  The fractional Doppler estimate is
    the magnitude ratio toward the stronger in-grid Doppler neighbor,
    ``kappa = sign(k_nb - k0) |h[k_nb]| / (|h[k0]| + |h[k_nb]|)``, and the
    fractional delay follows the same rule along delay.  The complex gain
    divides the peak coefficient by the pilot amplitude and the two
    Dirichlet kernel values at the refined fractional taps.

    Returns the refined path (angle left at ``pi/2`` for the caller to
    fill in) and the support columns of the path's neighborhood window.
    The estimation pipelines additionally disambiguate the fractional
    signs against the observation itself; see the pipeline docstrings.
    """
    values = np.asarray(values)
    support = np.asarray(support)
    if values.shape != support.shape:
        raise ParameterError("values must align with support")
    pos = {int(c): i for i, c in enumerate(support)}
    if peak not in pos:
        raise ParameterError("peak not contained in support")
    mag = np.abs(values)
    peak_mag = mag[pos[peak]]
    if peak_mag <= 0:
        raise NoPathError("claimed peak has zero magnitude")

    def ratio_rule(nb_cols: list[tuple[int, int]]) -> float:
        side, nb = 0, 0.0
        for s, col in nb_cols:
            if col in pos and mag[pos[col]] > nb:
                side, nb = s, float(mag[pos[col]])
        if side == 0:
            return 0.0
        return side * nb / (peak_mag + nb)

    delay_cols, dopp_cols = _axis_neighbors(peak, layout)
    iota = ratio_rule(delay_cols)
    kappa = ratio_rule(dopp_cols)
    kk, ll = guard_offsets(layout.m_g, layout.n_g)
    denom = (
        layout.scale
        * dirichlet_xi(params.n_doppler, -kappa)
        * dirichlet_xi(params.m_delay, iota)
    )
    gain = complex(values[pos[peak]] / denom)
    path = PathParams(
        l_int=int(ll[peak]), iota=iota, k_int=int(kk[peak]), kappa=kappa,
        theta=np.pi / 2, gain=gain,
    )
    window = np.asarray(
        [c for c in tap_neighborhood(peak, layout.m_g, layout.n_g) if c in pos],
        dtype=int,
    )
    return path, window


def _with_theta(path: PathParams, theta: float) -> PathParams:
    theta = float(np.clip(theta, THETA_EPS, np.pi - THETA_EPS))
    return PathParams(
        l_int=path.l_int,
        iota=path.iota,
        k_int=path.k_int,
        kappa=path.kappa,
        theta=theta,
        gain=path.gain,
    )


def _window_response(
    doppler_taps: float,
    delay_taps: float,
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    meas: np.ndarray,
) -> np.ndarray:
    """Modeled pilot-window response of a unit-gain path (steering-free).

    The guard-grid Dirichlet samples of the path pass through the
    measurement matrix and pick up the delay-dependent Doppler phase of
    the observation rows.
    """
    kk, ll = guard_offsets(layout.m_g, layout.n_g)
    samples = (
        layout.scale
        * dirichlet_xi(params.n_doppler, kk - doppler_taps)
        * dirichlet_xi(params.m_delay, -(ll - delay_taps))
    )
    obs_l = observation_delays(layout, params, user).astype(float)
    denom = params.n_doppler * (params.m_delay + params.m_cp)
    rows = np.exp(
        2j * np.pi * doppler_taps * (params.m_cp + obs_l - delay_taps) / denom
    )
    return (meas @ samples) * rows


def _best_path_fit(
    obs_row: np.ndarray,
    peak: int,
    delay_cands: list[float],
    dopp_cands: list[float],
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    meas: np.ndarray,
    claimed: set[int],
) -> tuple[PathParams, int, float]:
    """Pick the fractional candidate pair that best explains one path.

    Fits a unit-gain modeled window response per ``(iota, kappa)``
    candidate pair to the path's projected observation row by complex
    least squares and keeps the minimizer.  Fractions beyond one half
    re-anchor onto the neighboring cell (kept in place when that cell is
    already claimed by a stronger path).  Returns the refined path (angle
    still unset), its anchor column and the fit residual.
    """
    kk, ll = guard_offsets(layout.m_g, layout.n_g)
    k0 = int(kk[peak])
    l0 = int(ll[peak])
    obs_norm = float(np.vdot(obs_row, obs_row).real)
    best = (np.inf, 0.0, 0.0, 0j)
    for ic in delay_cands:
        for kc in dopp_cands:
            atom = _window_response(k0 + kc, l0 + ic, layout, params, user, meas)
            den = float(np.vdot(atom, atom).real)
            if den <= 0:
                continue
            num = complex(np.vdot(atom, obs_row))
            resid = obs_norm - abs(num) ** 2 / den
            if resid < best[0]:
                best = (resid, ic, kc, num / den)
    resid, iota, kappa, gain = best
    if not np.isfinite(resid):
        raise NoPathError("no candidate explains the path observation")

    # re-anchor fractions beyond one half onto the neighbor cell
    def anchor(base: int, frac: float, low: int, high: int) -> tuple[int, float]:
        if abs(frac) <= 0.5:
            return base, frac
        step = 1 if frac > 0 else -1
        if low <= base + step <= high:
            return base + step, frac - step
        return base, 0.5 * step

    raw_iota, raw_kappa = iota, kappa
    l_new, iota = anchor(l0, iota, 0, layout.m_g - 1)
    k_new, kappa = anchor(k0, kappa, -(layout.n_g // 2), layout.n_g - 1 - layout.n_g // 2)
    col = guard_column(k_new, l_new, layout.n_g)
    if col != peak and col in claimed:
        # fall back onto the peak cell, clipping the pre-anchor fractions:
        # clipping the re-anchored ones would shift the path by a full tap
        l_new, k_new, col = l0, k0, peak
        iota = float(np.clip(raw_iota, -0.5, 0.5))
        kappa = float(np.clip(raw_kappa, -0.5, 0.5))
    path = PathParams(
        l_int=l_new, iota=float(iota), k_int=k_new, kappa=float(kappa),
        theta=np.pi / 2, gain=complex(gain),
    )
    return path, col, float(max(resid, 0.0))


def _claim_paths(
    values: np.ndarray,
    support: np.ndarray,
    proj_rows: np.ndarray,
    thetas: np.ndarray,
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    meas: np.ndarray,
) -> tuple[list[PathParams], list[np.ndarray], float]:
    """Assign one distinct anchor cell per path and refine each path.

    ``values`` has shape ``(len(support), n_paths)`` with column ``i``
    holding path ``i``'s coefficients; ``proj_rows[i]`` is that path's
    projected window observation.  Paths claim peaks in order of
    decreasing coefficient magnitude so a strong path cannot lose its
    cell to a weak one; claimed cells are excluded for later paths.
    Fractional parts and gains come from the candidate fit of
    :func:`_best_path_fit`.  Returns the refined paths, their dictionary
    refinement windows and the total fit residual (2-norm).
    """
    n_paths = values.shape[1]
    order = np.argsort(-np.max(np.abs(values), axis=0), kind="stable")
    claimed: set[int] = set()
    paths: list[PathParams | None] = [None] * n_paths
    windows: list[np.ndarray | None] = [None] * n_paths
    total = 0.0
    for i in order:
        mags = np.abs(values[:, i]).copy()
        for j, col in enumerate(support):
            if int(col) in claimed:
                mags[j] = -1.0
        if mags.max() <= 0:
            raise NoPathError("no unclaimed support cell left for a path")
        peak = int(support[int(np.argmax(mags))])
        delay_cands, dopp_cands = _fractional_candidates(
            values[:, i], support, peak, layout
        )
        path, col, resid = _best_path_fit(
            proj_rows[i], peak, delay_cands, dopp_cands, layout, params, user,
            meas, claimed,
        )
        claimed.add(col)
        paths[i] = _with_theta(path, float(thetas[i]))
        windows[i] = tap_neighborhood(col, layout.m_g, layout.n_g)
        total += resid
    return list(paths), list(windows), float(np.sqrt(total))  # type: ignore[arg-type]


def _path_basis(
    paths: list[PathParams],
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    meas: np.ndarray,
) -> np.ndarray:
    """Stacked unit-gain antenna-by-window responses, one column per path."""
    cols = []
    for path in paths:
        resp = _window_response(
            path.doppler_taps, path.delay_taps, layout, params, user, meas
        )
        a = steering_vector(path.theta, params.n_bs, params.d_over_lambda)
        cols.append(np.outer(a, resp).ravel())
    return np.stack(cols, axis=1)


def _fit_gains(
    y: np.ndarray,
    paths: list[PathParams],
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    meas: np.ndarray,
) -> list[PathParams]:
    """Joint least-squares re-fit of all path gains of one user.

    The per-path spatial projections amplify noise when two angles come
    close; fitting every gain jointly against the raw multi-antenna
    window observation (taps and angles fixed) keeps the system
    conditioned through the tap structure instead.
    """
    basis = _path_basis(paths, layout, params, user, meas)
    gains, *_ = np.linalg.lstsq(basis, y.ravel(), rcond=PINV_RCOND)
    return [replace(p, gain=complex(g)) for p, g in zip(paths, gains)]


def _rescue_paths(
    y: np.ndarray,
    y_work: np.ndarray,
    paths: list[PathParams],
    windows: list[np.ndarray],
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    meas: np.ndarray,
    dictionary: np.ndarray,
) -> tuple[list[PathParams], list[np.ndarray]]:
    """Re-seed paths that do not pay for themselves from the fit residual.

    Two physical paths arriving at (numerically) the same angle defeat
    the subspace split: ESPRIT cannot return a duplicated angle, the
    projection funnels both contributions into one column and one tap is
    never claimed.  Walking the paths from weakest fitted gain upward,
    each is removed and re-seeded on the removal residual of the
    leakage-corrected observation ``y_work``: a rank-one angle estimate,
    a claim on the strongest unclaimed cell of the residual projection,
    and the usual fractional candidate fit.  A replacement must first
    shrink the dictionary-model residual and is then kept only when it
    also shrinks the exact forward-model residual against the raw
    observation ``y``; the double gate keeps the pass from trading a
    physical path for a better fit of the data leakage.
    """
    basis = _path_basis(paths, layout, params, user, meas)
    gains = np.array([p.gain for p in paths])
    model_resid = float(np.linalg.norm(y_work.ravel() - basis @ gains))
    exact_resid = _exact_residual(y, user, paths, layout, params)
    support = np.arange(layout.n_atoms)
    order = np.argsort(np.abs(gains), kind="stable")
    for i in order:
        keep = [j for j in range(len(paths)) if j != i]
        r_i = (y_work.ravel() - basis[:, keep] @ gains[keep]).reshape(y.shape)
        try:
            theta_new = float(esprit_aoa(r_i, 1, params.d_over_lambda)[0])
            proj = spatial_project(r_i, np.array([theta_new]), params.d_over_lambda)
        except (DegenerateSubspaceError, NearCollinearAnglesError):
            continue
        values = dictionary.conj().T @ proj.T
        claimed = {
            guard_column(paths[j].k_int, paths[j].l_int, layout.n_g) for j in keep
        }
        mags = np.abs(values[:, 0]).copy()
        mags[list(claimed)] = -1.0
        if mags.max() <= 0:
            continue
        peak = int(np.argmax(mags))
        # the rank-one angle of the mixed residual is biased when a kept
        # path lies angularly close; polish it on the claimed window and
        # re-project before fitting, or the candidate cannot pass the gate
        window = tap_neighborhood(peak, layout.m_g, layout.n_g)
        block = r_i @ np.linalg.pinv(dictionary[:, window], rcond=PINV_RCOND).T
        try:
            theta_new = float(esprit_aoa(block, 1, params.d_over_lambda)[0])
        except DegenerateSubspaceError:
            pass
        else:
            proj = spatial_project(r_i, np.array([theta_new]), params.d_over_lambda)
            values = dictionary.conj().T @ proj.T
            mags = np.abs(values[:, 0]).copy()
            mags[list(claimed)] = -1.0
            if mags.max() <= 0:
                continue
            peak = int(np.argmax(mags))
        delay_cands, dopp_cands = _fractional_candidates(
            values[:, 0], support, peak, layout
        )
        try:
            cand, col, _ = _best_path_fit(
                proj[0], peak, delay_cands, dopp_cands, layout, params, user,
                meas, claimed,
            )
        except NoPathError:
            continue
        cand = _with_theta(cand, theta_new)
        new_basis = basis.copy()
        new_basis[:, i] = _path_basis([cand], layout, params, user, meas)[:, 0]
        new_gains, *_ = np.linalg.lstsq(new_basis, y_work.ravel(), rcond=PINV_RCOND)
        resid = float(np.linalg.norm(y_work.ravel() - new_basis @ new_gains))
        if resid >= (1.0 - RESCUE_IMPROVEMENT) * model_resid:
            continue
        new_paths = list(paths)
        new_paths[i] = cand
        new_paths = [
            replace(p, gain=complex(g)) for p, g in zip(new_paths, new_gains)
        ]
        new_exact = _exact_residual(y, user, new_paths, layout, params)
        if new_exact < (1.0 - RESCUE_IMPROVEMENT) * exact_resid:
            paths = new_paths
            windows = list(windows)
            windows[i] = tap_neighborhood(col, layout.m_g, layout.n_g)
            basis, gains = new_basis, np.asarray(new_gains)
            model_resid, exact_resid = resid, new_exact
    return paths, windows


def _refined_dictionary(
    meas: np.ndarray,
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    paths: list[PathParams],
    windows: list[np.ndarray],
) -> np.ndarray:
    spec = [
        (p.doppler_taps, p.delay_taps, w) for p, w in zip(paths, windows)
    ]
    return meas * phase_matrix_refined(layout, params, user, spec)


def _reconstruct(
    user: int, paths: list[PathParams], layout: PilotLayout, params: OtfsParams
) -> np.ndarray:
    channel = UserChannel(user=user, paths=tuple(paths))
    return dds_channel_matrix(channel, params, layout.m_g, layout.n_g)


def _path_responses(
    user: int,
    paths: list[PathParams],
    layout: PilotLayout,
    params: OtfsParams,
    meas: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact and dictionary-modeled window responses of estimated paths.

    The exact response runs each path through the forward model on the
    user's pilot frame; the dictionary model is the path's guard-grid
    Dirichlet samples through the measurement matrix.  Their difference
    is the fractional leakage the guard-grid dictionary cannot represent
    (exactly zero for on-grid paths).  Both lists are antenna-major
    ``(n_bs, window cells)`` arrays aligned with ``paths``.
    """
    frame = build_frame(layout, params, user)
    exact = []
    model = []
    for path in paths:
        channel = UserChannel(user=user, paths=(path,))
        cube = propagate([frame], [channel], params, snr_db=None)
        exact.append(extract_pilot_observations(cube, layout, params, user))
        resp = _window_response(
            path.doppler_taps, path.delay_taps, layout, params, user, meas
        )
        a = steering_vector(path.theta, params.n_bs, params.d_over_lambda)
        model.append(np.outer(a, path.gain * resp))
    return exact, model


def _polish_round(
    y: np.ndarray,
    paths: list[PathParams],
    thetas: np.ndarray,
    layout: PilotLayout,
    params: OtfsParams,
    user: int,
    meas: np.ndarray,
    dictionary: np.ndarray,
    windows: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Leakage-corrected observation and per-path re-estimated angles.

    Subtracting the estimated fractional leakage (exact forward model
    minus dictionary model) removes the part of the response the
    guard-grid dictionary cannot represent.  For the angles, the other
    paths' full estimated responses are subtracted and the remainder is
    least-squares fitted onto the path's own window atoms before a
    rank-one re-estimate; the fit suppresses whatever the subtraction
    cannot touch (noise, and with shared pilot regions the other users'
    superimposed responses, attenuated by the dictionary coherence).
    """
    exact, model = _path_responses(user, paths, layout, params, meas)
    y_work = y - sum(e - m for e, m in zip(exact, model))
    polished = np.array(thetas, dtype=float)
    for i, window in enumerate(windows):
        y_i = y - sum(e for j, e in enumerate(exact) if j != i)
        block = y_i @ np.linalg.pinv(dictionary[:, window], rcond=PINV_RCOND).T
        try:
            polished[i] = esprit_aoa(block, 1, params.d_over_lambda)[0]
        except DegenerateSubspaceError:
            pass
    return y_work, polished


def _conventional_rounds(
    y: np.ndarray,
    user: int,
    layout: PilotLayout,
    params: OtfsParams,
    n_paths: int,
    n_rounds: int,
    rescue: bool = True,
) -> tuple[list[PathParams], list[float]]:
    thetas = esprit_aoa(y, n_paths, params.d_over_lambda)
    proj = spatial_project(y, thetas, params.d_over_lambda)
    meas = measurement_matrix(layout, params, user)
    dictionary = meas * phase_matrix_coarse(layout, params, user)
    support = np.arange(layout.n_atoms)
    paths: list[PathParams] = []
    windows: list[np.ndarray] = []
    residuals = []
    best: tuple[float, list[PathParams]] | None = None
    for _ in range(n_rounds):
        # two claim passes per round: nearly colliding fractional paths
        # need more than one polish to separate
        for _ in range(2):
            y_work = y
            if paths:
                y_work, thetas = _polish_round(
                    y, paths, thetas, layout, params, user, meas,
                    dictionary, windows,
                )
                proj = spatial_project(y_work, thetas, params.d_over_lambda)
            values = dictionary.conj().T @ proj.T
            paths, windows, resid = _claim_paths(
                values, support, proj, thetas, layout, params, user, meas
            )
            paths = _fit_gains(y_work, paths, layout, params, user, meas)
        if rescue:
            paths, windows = _rescue_paths(
                y, y_work, paths, windows, layout, params, user, meas, dictionary
            )
            thetas = np.array([p.theta for p in paths])
        # keep the best round: re-claiming can lose a good local minimum
        exact = _exact_residual(y, user, paths, layout, params)
        if best is None or exact < best[0]:
            best = (exact, paths)
        residuals.append(resid)
        dictionary = _refined_dictionary(meas, layout, params, user, paths, windows)
    assert best is not None
    return best[1], residuals


def _csep_rounds(
    y: np.ndarray,
    user: int,
    layout: PilotLayout,
    params: OtfsParams,
    n_paths: int,
    n_rounds: int,
    rescue: bool = True,
) -> tuple[list[PathParams], list[float]]:
    meas = measurement_matrix(layout, params, user)
    dictionary = meas * phase_matrix_coarse(layout, params, user)
    thetas: np.ndarray | None = None
    paths: list[PathParams] = []
    windows: list[np.ndarray] = []
    residuals = []
    best: tuple[float, list[PathParams]] | None = None
    for _ in range(n_rounds):
        # two claim passes per round, as in the conventional pipeline
        for _ in range(2):
            y_work = y
            if paths:
                y_work, thetas = _polish_round(
                    y, paths, thetas, layout, params, user, meas,
                    dictionary, windows,
                )
            support, coef, _ = somp(
                dictionary, y_work.T, n_paths, layout.m_g, layout.n_g
            )
            h_s = y_work @ np.linalg.pinv(
                dictionary[:, support], rcond=PINV_RCOND
            ).T
            if thetas is None:
                thetas = esprit_aoa(h_s, n_paths, params.d_over_lambda)
            proj_s = spatial_project(h_s, thetas, params.d_over_lambda)
            proj_w = spatial_project(y_work, thetas, params.d_over_lambda)
            paths, windows, resid = _claim_paths(
                proj_s.T, support, proj_w, thetas, layout, params, user, meas
            )
            paths = _fit_gains(y_work, paths, layout, params, user, meas)
        if rescue:
            paths, windows = _rescue_paths(
                y, y_work, paths, windows, layout, params, user, meas, dictionary
            )
            thetas = np.array([p.theta for p in paths])
        # keep the best round: re-claiming can lose a good local minimum
        exact = _exact_residual(y, user, paths, layout, params)
        if best is None or exact < best[0]:
            best = (exact, paths)
        residuals.append(resid)
        dictionary = _refined_dictionary(meas, layout, params, user, paths, windows)
    assert best is not None
    return best[1], residuals


def _user_response(
    user: int, paths: list[PathParams], layout: PilotLayout, params: OtfsParams
) -> np.ndarray:
    """Noiseless pilot-region response of one user's estimated paths."""
    frame = build_frame(layout, params, user)
    channel = UserChannel(user=user, paths=tuple(paths))
    cube = propagate([frame], [channel], params, snr_db=None)
    return extract_pilot_observations(cube, layout, params, user)


def _exact_residual(
    y: np.ndarray,
    user: int,
    paths: list[PathParams],
    layout: PilotLayout,
    params: OtfsParams,
) -> float:
    """Norm of the observation minus the exact forward response."""
    return float(np.linalg.norm(y - _user_response(user, paths, layout, params)))


def _solve_private(
    y: np.ndarray,
    user: int,
    layout: PilotLayout,
    params: OtfsParams,
    n_paths: int,
    n_rounds: int,
) -> tuple[list[PathParams], list[float]] | EstimationError:
    """Best of the two seedings for a user with a private observation.

    Strongly correlated path signatures occasionally mislead the initial
    eigendecomposition into a merged-angle local minimum, so the rounds
    run twice, once seeded by ESPRIT on the raw observation and once from
    the support-domain reconstruction; the result whose reconstructed
    response explains the observation better wins.
    """
    outcome: tuple[list[PathParams], list[float]] | EstimationError | None = None
    best = np.inf
    for solver in (_conventional_rounds, _csep_rounds):
        try:
            candidate = solver(y, user, layout, params, n_paths, n_rounds)
        except EstimationError as exc:
            if outcome is None:
                outcome = exc
            continue
        resid = np.linalg.norm(y - _user_response(user, candidate[0], layout, params))
        if resid < best:
            outcome, best = candidate, resid
    assert outcome is not None
    return outcome


def _report(
    user: int,
    layout: PilotLayout,
    params: OtfsParams,
    n_rounds: int,
    outcome: tuple[list[PathParams], list[float]] | EstimationError,
) -> EstimateReport:
    if isinstance(outcome, EstimationError):
        empty = np.zeros((params.n_bs, layout.m_g * layout.n_g), dtype=complex)
        return EstimateReport(
            user=user, paths=(), h_hat=empty, residual_norms=(),
            n_rounds=n_rounds, error=f"{type(outcome).__name__}: {outcome}",
        )
    paths, residuals = outcome
    return EstimateReport(
        user=user,
        paths=tuple(paths),
        h_hat=_reconstruct(user, paths, layout, params),
        residual_norms=tuple(residuals),
        n_rounds=n_rounds,
    )


def estimate_conventional(
    cube: np.ndarray,
    layout: PilotLayout,
    params: OtfsParams,
    n_paths: int,
    n_rounds: int = 2,
) -> list[EstimateReport]:
    """Per-user estimation with private pilot segments.

    Per user: ESPRIT on the raw observation, spatial projection into
    per-path window observations, then ``n_rounds`` rounds of per-path
    matching over the (phase-refined) dictionary: each path claims the
    strongest unclaimed cell of its own projection, fractional candidates
    come from the magnitude-ratio rule and the winning candidate pair is
    the one whose modeled window response best fits the path's
    observation.  Rounds after the first subtract the current estimate's
    unmodeled fractional leakage from the observation before
    re-projecting.  Each user is solved under two seedings (raw-observation
    ESPRIT and support-domain reconstruction) and the better-fitting result
    wins; a failing user yields a report with the ``error`` field set and
    the other users are still estimated.
    """
    if layout.kind != "conventional":
        raise ParameterError("layout kind must be 'conventional'")
    if n_rounds < 1:
        raise ParameterError("need at least one refinement round")
    reports = []
    for user in range(layout.n_users):
        y = extract_pilot_observations(cube, layout, params, user)
        outcome = _solve_private(y, user, layout, params, n_paths, n_rounds)
        reports.append(_report(user, layout, params, n_rounds, outcome))
    return reports


def estimate_csep(
    cube: np.ndarray,
    layout: PilotLayout,
    params: OtfsParams,
    n_paths: int,
    n_rounds: int = 2,
) -> list[EstimateReport]:
    """Per-user estimation with superimposed shared-region pilots.

    Per user and round: SOMP across all antenna observations finds the
    support, a pseudo-inverse fit reconstructs the DDS channel on it,
    ESPRIT (first round) yields the angles, spatial projection splits the
    support channel and the window observation per path, and each path is
    refined by the candidate fit of the conventional pipeline.  Rounds
    after the first subtract the current estimate's unmodeled fractional
    leakage from the observation.

    Because every user shares the same pilot region, a first pass over
    all users is followed by a cancellation sweep: each user is
    re-estimated on the observation minus the other users' reconstructed
    responses, which removes most of the cross-user coherence floor.  A
    user whose sweep fails keeps its first-pass result; a user failing
    both passes yields a report with the ``error`` field set.
    """
    if layout.kind != "csep":
        raise ParameterError("layout kind must be 'csep'")
    if n_rounds < 1:
        raise ParameterError("need at least one refinement round")
    users = range(layout.n_users)
    ys = [extract_pilot_observations(cube, layout, params, u) for u in users]
    if layout.n_users == 1:
        # a single user owns the whole pilot region, so the superimposed
        # structure degenerates to the private-segment pipeline
        solo = _solve_private(ys[0], 0, layout, params, n_paths, n_rounds)
        return [_report(0, layout, params, n_rounds, solo)]
    outcomes: list[tuple[list[PathParams], list[float]] | EstimationError] = []
    for user in users:
        try:
            # no rescue here: the raw shared observation still carries the
            # other users' responses, which a re-seed would latch onto
            outcomes.append(
                _csep_rounds(
                    ys[user], user, layout, params, n_paths, n_rounds,
                    rescue=False,
                )
            )
        except EstimationError as exc:
            outcomes.append(exc)
    if layout.n_users > 1:
        responses = [
            None if isinstance(out, EstimationError)
            else _user_response(user, out[0], layout, params)
            for user, out in zip(users, outcomes)
        ]
        for user in users:
            others = sum(
                r for v, r in enumerate(responses) if v != user and r is not None
            )
            # with the other users subtracted the observation is close to
            # private, so the sweep gets the dual-seeded solver as well
            swept = _solve_private(
                ys[user] - others, user, layout, params, n_paths, n_rounds
            )
            if not isinstance(swept, EstimationError) or isinstance(
                outcomes[user], EstimationError
            ):
                outcomes[user] = swept
    return [
        _report(user, layout, params, n_rounds, out)
        for user, out in zip(users, outcomes)
    ]


def match_paths(
    true_paths: tuple[PathParams, ...], est_paths: tuple[PathParams, ...]
) -> list[tuple[int, int]]:
    """Greedy nearest-tap pairing of true and estimated paths.

    Returns ``(true index, estimate index)`` pairs ordered by true index;
    distance is measured on the (delay, Doppler) tap plane.
    """
    pairs = []
    used: set[int] = set()
    for ti, tp in enumerate(true_paths):
        best_j, best_d = -1, np.inf
        for j, ep in enumerate(est_paths):
            if j in used:
                continue
            d = abs(tp.delay_taps - ep.delay_taps) + abs(tp.doppler_taps - ep.doppler_taps)
            if d < best_d:
                best_j, best_d = j, d
        if best_j >= 0:
            used.add(best_j)
            pairs.append((ti, best_j))
    return pairs


ESTIMATE_CSV_HEADER = (
    "seed,user,path,true_delay_taps,true_doppler_taps,true_theta,true_re_gain,"
    "true_im_gain,est_delay_taps,est_doppler_taps,est_theta,est_re_gain,"
    "est_im_gain,user_nmse"
)


def estimate_report_rows(
    reports: list[EstimateReport],
    true_channels: list[UserChannel],
    layout: PilotLayout,
    params: OtfsParams,
    seed: int,
) -> list[str]:
    """CSV rows pairing true and estimated paths, one row per true path."""
    rows = []
    for report, channel in zip(reports, true_channels):
        h_true = dds_channel_matrix(channel, params, layout.m_g, layout.n_g)
        user_nmse = nmse([report.h_hat], [h_true])
        for ti, ei in match_paths(channel.paths, report.paths):
            tp = channel.paths[ti]
            ep = report.paths[ei]
            rows.append(
                f"{seed},{report.user},{ti},{tp.delay_taps!r},{tp.doppler_taps!r},"
                f"{tp.theta!r},{tp.gain.real!r},{tp.gain.imag!r},"
                f"{ep.delay_taps!r},{ep.doppler_taps!r},{ep.theta!r},"
                f"{ep.gain.real!r},{ep.gain.imag!r},{user_nmse!r}"
            )
    return rows
