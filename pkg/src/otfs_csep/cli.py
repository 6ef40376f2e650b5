"""Seeded Monte-Carlo experiment runner emitting stable CSV files.

Subcommands sweep SNR (``nmse``, ``ber``, ``se``), path count (``paths``)
or the pilot-column coherence surface (``coherence``), and ``layout``
prints the geometry and overhead report of both pilot structures.

Every trial draws its randomness from streams keyed by ``(base seed,
trial index)`` only, so all SNR points and both pilot kinds of one trial
see the same channels and the same unit noise (scaled per SNR).  That
common-randomness scheme makes the sweep curves paired comparisons, and
results do not depend on the worker count: cells are computed in a pool
but aggregated in fixed trial order.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from otfs_csep.analysis import (
    DENSE_GRID_LIMIT,
    LsDetector,
    bit_error_rate,
    coherence_admissible,
    coherence_closed_form,
    empirical_sinr,
    nmse,
    qam16_demodulate,
    qam16_modulate,
    spectral_efficiency,
)
from otfs_csep.channel import UserChannel, dds_channel_matrix, sample_channels
from otfs_csep.core import OtfsParams
from otfs_csep.estimator import estimate_conventional, estimate_csep
from otfs_csep.exceptions import ParameterError
from otfs_csep.modem import propagate
from otfs_csep.pilots import (
    LAYOUT_KINDS,
    PilotLayout,
    build_frame,
    data_cell_count,
    describe_layout,
    make_layout,
    overhead,
)

log = logging.getLogger("otfs_csep")

#: reduced frame used for the dense-detection experiments
DESK_SCALE = {
    "m_delay": 64, "n_doppler": 16, "m_cp": 16,
    "m_p": 10, "n_p": 5, "m_g": 8, "n_g": 5,
}


@dataclass(frozen=True)
class RunConfig:
    """Effective physical configuration of one run (defaults: Table-II scale)."""

    m_delay: int = 1024
    n_doppler: int = 31
    m_cp: int = 72
    delta_f: float = 60e3
    f_c: float = 15e9
    n_bs: int = 16
    d_over_lambda: float = 0.5
    n_users: int = 4
    n_paths: int = 5
    m_p: int = 83
    n_p: int = 7
    m_g: int = 72
    n_g: int = 7
    speed_kmh: float = 300.0
    n_rounds: int = 2


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path: str) -> dict:
    """Read a flat ``key = value`` file ('#' starts a comment)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_TYPES:
                raise ParameterError(f"{path}:{lineno}: unknown config key {key!r}")
            caster = int if _CONFIG_TYPES[key] == "int" else float
            try:
                out[key] = caster(value.strip())
            except ValueError as exc:
                raise ParameterError(f"{path}:{lineno}: {exc}") from None
    return out


def parse_span(text: str) -> list[float]:
    """Parse ``a:step:b`` (inclusive), a comma list, or a single number."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ParameterError(f"span {text!r} must be a:step:b")
        a, step, b = (float(p) for p in parts)
        if step <= 0 or b < a:
            raise ParameterError(f"span {text!r} needs step > 0 and b >= a")
        count = int(np.floor((b - a) / step + 1e-9)) + 1
        return [a + i * step for i in range(count)]
    return [float(p) for p in text.split(",")]


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = replace(cfg, **parse_config_file(args.config))
    if getattr(args, "desk_scale", False):
        cfg = replace(cfg, **DESK_SCALE)
    return cfg


def params_of(cfg: RunConfig) -> OtfsParams:
    return OtfsParams(
        m_delay=cfg.m_delay, n_doppler=cfg.n_doppler, m_cp=cfg.m_cp,
        delta_f=cfg.delta_f, f_c=cfg.f_c, n_bs=cfg.n_bs,
        d_over_lambda=cfg.d_over_lambda,
    )


def layout_of(cfg: RunConfig, kind: str) -> PilotLayout:
    return make_layout(
        kind, params_of(cfg), n_users=cfg.n_users,
        m_p=cfg.m_p, n_p=cfg.n_p, m_g=cfg.m_g, n_g=cfg.n_g,
    )


def config_hash(cfg: RunConfig, **extras) -> str:
    """First 12 hex digits of the canonical config digest."""
    items = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    items.update(extras)
    canon = "\n".join(f"{k}={items[k]!r}" for k in sorted(items))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _parse_pilots(text: str) -> list[str]:
    kinds = [p.strip() for p in text.split(",") if p.strip()]
    if not kinds:
        raise ParameterError("need at least one pilot kind")
    for kind in kinds:
        if kind not in LAYOUT_KINDS:
            raise ParameterError(f"unknown pilot kind {kind!r}")
    if len(set(kinds)) != len(kinds):
        raise ParameterError("duplicate pilot kind")
    return kinds


_ESTIMATORS = {"conventional": estimate_conventional, "csep": estimate_csep}


def _trial_rngs(seed: int, trial: int, extra: tuple[int, ...] = ()):
    return np.random.default_rng(np.random.SeedSequence([seed, trial, *extra]))


def _draw_frames(cfg, params, layout, kind_index, seed, trial):
    """Pilot frames filled with Gray-mapped 16-QAM data symbols."""
    rng = _trial_rngs(seed, trial, (1, kind_index))
    n_sym = data_cell_count(layout, params)
    frames, bits, syms = [], [], []
    for user in range(cfg.n_users):
        b = rng.integers(0, 2, size=4 * n_sym)
        s = qam16_modulate(b)
        frames.append(build_frame(layout, params, user, s))
        bits.append(b)
        syms.append(s)
    return frames, bits, syms


def _unit_noise(params: OtfsParams, seed: int, trial: int) -> np.ndarray:
    rng = _trial_rngs(seed, trial, (2,))
    shape = (params.n_bs, *params.grid_shape)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _nmse_trial(payload) -> tuple[int, dict]:
    """One trial of the NMSE sweep; returns per-cell value or error text."""
    cfg, kinds, snrs, seed, trial = payload
    params = params_of(cfg)
    rng_ch = _trial_rngs(seed, trial, (0,))
    channels = sample_channels(
        params, cfg.n_users, cfg.m_g, cfg.n_g, cfg.n_paths, rng_ch, cfg.speed_kmh
    )
    truths = [dds_channel_matrix(ch, params, cfg.m_g, cfg.n_g) for ch in channels]
    noise = _unit_noise(params, seed, trial)
    out = {}
    for ki, kind in enumerate(kinds):
        layout = layout_of(cfg, kind)
        frames, _, _ = _draw_frames(cfg, params, layout, ki, seed, trial)
        for snr in snrs:
            cube = propagate(frames, channels, params, snr, noise_unit=noise)
            reports = _ESTIMATORS[kind](cube, layout, params, cfg.n_paths, cfg.n_rounds)
            bad = [r.error for r in reports if r.error]
            if bad:
                out[(kind, snr)] = (None, bad[0])
            else:
                out[(kind, snr)] = (nmse([r.h_hat for r in reports], truths), None)
    return trial, out


def _paths_trial(payload) -> tuple[int, dict]:
    """One trial of the NMSE-versus-path-count sweep at fixed SNR."""
    cfg, kinds, p_grid, snr, seed, trial = payload
    params = params_of(cfg)
    noise = _unit_noise(params, seed, trial)
    out = {}
    for p in p_grid:
        rng_ch = _trial_rngs(seed, trial, (0, p))
        channels = sample_channels(
            params, cfg.n_users, cfg.m_g, cfg.n_g, p, rng_ch, cfg.speed_kmh
        )
        truths = [dds_channel_matrix(ch, params, cfg.m_g, cfg.n_g) for ch in channels]
        for ki, kind in enumerate(kinds):
            layout = layout_of(cfg, kind)
            frames, _, _ = _draw_frames(cfg, params, layout, ki, seed, trial)
            cube = propagate(frames, channels, params, snr, noise_unit=noise)
            reports = _ESTIMATORS[kind](cube, layout, params, p, cfg.n_rounds)
            bad = [r.error for r in reports if r.error]
            if bad:
                out[(kind, p)] = (None, bad[0])
            else:
                out[(kind, p)] = (nmse([r.h_hat for r in reports], truths), None)
    return trial, out


def _detect_trial(payload) -> tuple[int, dict]:
    """One trial of a detection sweep; yields BER and SE per cell."""
    cfg, kinds, snrs, csis, seed, trial = payload
    params = params_of(cfg)
    rng_ch = _trial_rngs(seed, trial, (0,))
    channels = sample_channels(
        params, cfg.n_users, cfg.m_g, cfg.n_g, cfg.n_paths, rng_ch, cfg.speed_kmh
    )
    noise = _unit_noise(params, seed, trial)
    out = {}
    for ki, kind in enumerate(kinds):
        layout = layout_of(cfg, kind)
        frames, bits, syms = _draw_frames(cfg, params, layout, ki, seed, trial)
        perfect = LsDetector(channels, layout, params) if "perfect" in csis else None
        for snr in snrs:
            cube = propagate(frames, channels, params, snr, noise_unit=noise)
            noise_var = 10.0 ** (-snr / 10.0)
            for csi in csis:
                cell = (kind, snr, csi)
                if csi == "perfect":
                    detector = perfect
                else:
                    reports = _ESTIMATORS[kind](
                        cube, layout, params, cfg.n_paths, cfg.n_rounds
                    )
                    bad = [r.error for r in reports if r.error]
                    if bad:
                        out[cell] = (None, bad[0])
                        continue
                    try:
                        # estimated paths may land on one integer tap
                        estimated = [
                            UserChannel(user=u, paths=r.paths)
                            for u, r in enumerate(reports)
                        ]
                        detector = LsDetector(estimated, layout, params)
                    except ParameterError as exc:
                        out[cell] = (None, f"{type(exc).__name__}: {exc}")
                        continue
                detected = detector.detect(cube, noise_var)
                bers, ses = [], []
                for u in range(cfg.n_users):
                    decided = qam16_demodulate(detected[u])
                    bers.append(bit_error_rate(bits[u], decided))
                    sinr = empirical_sinr(syms[u], detected[u])
                    ses.append(spectral_efficiency(layout, params, sinr))
                out[cell] = ((float(np.mean(bers)), float(np.mean(ses))), None)
    return trial, out


def _run_pool(task, payloads, workers: int):
    """Run trial payloads, returning ``{trial: celldict}`` in any order."""
    results = {}
    if workers <= 1:
        for payload in payloads:
            trial, cells = task(payload)
            results[trial] = cells
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for trial, cells in pool.map(task, payloads):
                results[trial] = cells
    return results


def _aggregate(results: dict, cells: list, trials: int, pick=None):
    """Per-cell mean/stderr/failures, accumulated in fixed trial order."""
    rows = {}
    for cell in cells:
        values = []
        failures = 0
        for trial in range(trials):
            value, error = results[trial][cell]
            if value is None:
                failures += 1
                log.warning("trial %d cell %s failed: %s", trial, cell, error)
                continue
            values.append(pick(value) if pick else value)
        if values:
            arr = np.asarray(values, dtype=float)
            mean = float(arr.mean())
            stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        else:
            mean = float("nan")
            stderr = float("nan")
        rows[cell] = (mean, stderr, failures)
    return rows


def _write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.10e}"


def cmd_nmse(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    kinds = _parse_pilots(args.pilot)
    snrs = parse_span(args.snr)
    for kind in kinds:
        layout_of(cfg, kind)
    digest = config_hash(
        cfg, experiment="nmse", snr=snrs, trials=args.trials, seed=args.seed,
        pilot=kinds,
    )
    payloads = [(cfg, kinds, snrs, args.seed, t) for t in range(args.trials)]
    results = _run_pool(_nmse_trial, payloads, args.workers)
    cells = [(kind, snr) for kind in kinds for snr in snrs]
    stats = _aggregate(results, cells, args.trials)
    rows = [
        [kind, _fmt(snr), _fmt(stats[(kind, snr)][0]), _fmt(stats[(kind, snr)][1]),
         str(args.trials), str(stats[(kind, snr)][2]), digest]
        for kind, snr in cells
    ]
    _write_csv(
        args.output,
        ["pilot", "snr_db", "nmse_mean", "nmse_stderr", "trials", "failures",
         "config_hash"],
        rows,
    )
    return 0


def cmd_paths(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    kinds = _parse_pilots(args.pilot)
    snr = parse_span(args.snr)
    if len(snr) != 1:
        raise ParameterError("the path sweep takes a single SNR value")
    p_grid = [int(p) for p in parse_span(args.paths)]
    if any(p < 1 for p in p_grid):
        raise ParameterError("path counts must be >= 1")
    for kind in kinds:
        layout_of(cfg, kind)
    digest = config_hash(
        cfg, experiment="paths", snr=snr, trials=args.trials, seed=args.seed,
        pilot=kinds, paths=p_grid,
    )
    payloads = [(cfg, kinds, p_grid, snr[0], args.seed, t) for t in range(args.trials)]
    results = _run_pool(_paths_trial, payloads, args.workers)
    cells = [(kind, p) for kind in kinds for p in p_grid]
    stats = _aggregate(results, cells, args.trials)
    rows = [
        [kind, str(p), _fmt(snr[0]), _fmt(stats[(kind, p)][0]),
         _fmt(stats[(kind, p)][1]), str(args.trials), str(stats[(kind, p)][2]),
         digest]
        for kind, p in cells
    ]
    _write_csv(
        args.output,
        ["pilot", "n_paths", "snr_db", "nmse_mean", "nmse_stderr", "trials",
         "failures", "config_hash"],
        rows,
    )
    return 0


def _parse_csi(text: str) -> list[str]:
    csis = [c.strip() for c in text.split(",") if c.strip()]
    if not csis:
        raise ParameterError("need at least one CSI mode")
    for csi in csis:
        if csi not in ("perfect", "estimated"):
            raise ParameterError(f"unknown CSI mode {csi!r}")
    if len(set(csis)) != len(csis):
        raise ParameterError("duplicate CSI mode")
    return csis


def _cmd_detection(args: argparse.Namespace, metric: str) -> int:
    cfg = build_config(args)
    kinds = _parse_pilots(args.pilot)
    snrs = parse_span(args.snr)
    csis = _parse_csi(args.csi)
    for kind in kinds:
        layout_of(cfg, kind)
    if cfg.m_delay * cfg.n_doppler > DENSE_GRID_LIMIT:
        raise ParameterError(
            f"grid {cfg.n_doppler}x{cfg.m_delay} is too large for dense "
            f"detection (limit {DENSE_GRID_LIMIT} cells); pass --desk-scale"
        )
    digest = config_hash(
        cfg, experiment=metric, snr=snrs, trials=args.trials, seed=args.seed,
        pilot=kinds, csi=csis,
    )
    payloads = [(cfg, kinds, snrs, csis, args.seed, t) for t in range(args.trials)]
    results = _run_pool(_detect_trial, payloads, args.workers)
    cells = [(kind, snr, csi) for kind in kinds for snr in snrs for csi in csis]
    pick = (lambda v: v[0]) if metric == "ber" else (lambda v: v[1])
    stats = _aggregate(results, cells, args.trials, pick=pick)
    rows = [
        [kind, _fmt(snr), csi, _fmt(stats[cell][0]), _fmt(stats[cell][1]),
         str(args.trials), str(stats[cell][2]), digest]
        for cell in cells
        for kind, snr, csi in [cell]
    ]
    _write_csv(
        args.output,
        ["pilot", "snr_db", "csi", f"{metric}_mean", f"{metric}_stderr", "trials",
         "failures", "config_hash"],
        rows,
    )
    return 0


def cmd_ber(args: argparse.Namespace) -> int:
    return _cmd_detection(args, "ber")


def cmd_se(args: argparse.Namespace) -> int:
    return _cmd_detection(args, "se")


def cmd_coherence(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    layout = layout_of(cfg, "csep")
    try:
        user_s, user_t = (int(p) for p in args.pair.split(","))
    except ValueError:
        raise ParameterError("--pair takes two comma-separated user indices") from None
    for u in (user_s, user_t):
        if not 0 <= u < cfg.n_users:
            raise ParameterError(f"user {u} outside 0..{cfg.n_users - 1}")
    dnu_grid = parse_span(args.dnu)
    dl_grid = [int(v) for v in parse_span(args.dl)]
    digest = config_hash(
        cfg, experiment="coherence", pair=(user_s, user_t), dnu=dnu_grid, dl=dl_grid,
    )
    params = params_of(cfg)
    rows = []
    for dnu in dnu_grid:
        for dl in dl_grid:
            mu = coherence_closed_form(
                layout, params, user_s, dnu, 0, user_t, 0.0, dl
            )
            rows.append(
                [f"{user_s}-{user_t}", _fmt(dnu), str(dl), _fmt(mu), digest]
            )
    _write_csv(
        args.output,
        ["pair", "dnu_taps", "dl_bins", "mu", "config_hash"],
        rows,
    )
    return 0


def cmd_layout(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    params = params_of(cfg)
    conv = layout_of(cfg, "conventional")
    csep = layout_of(cfg, "csep")
    eta_i = overhead(conv, params)
    eta_o = overhead(csep, params)
    parts = [
        describe_layout(conv, params),
        describe_layout(csep, params),
        f"overhead eta_i (conventional): {eta_i:.4f}",
        f"overhead eta_o (csep)        : {eta_o:.4f}",
        f"eta_o / eta_i                : {eta_o / eta_i:.4f}",
    ]
    for eps in (1e-2, 1e-3):
        ok = coherence_admissible(csep, params, eps)
        parts.append(
            f"coherence admissible (eps={eps:g}): {'yes' if ok else 'no'}"
            f"  (K M_p = {csep.zc_length}, bound "
            f"{eps * cfg.n_doppler * (cfg.m_delay + cfg.m_cp) / cfg.n_g:.1f})"
        )
    text = "\n".join(parts) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _add_common(sub: argparse.ArgumentParser, trials: bool = True) -> None:
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--desk-scale", action="store_true",
                     help="use the reduced frame for dense detection")
    sub.add_argument("-o", "--output", required=True, help="output CSV path")
    if trials:
        sub.add_argument("--trials", type=int, default=200)
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--workers", type=int, default=1)
        sub.add_argument("--pilot", default="csep,conventional",
                         help="comma list of pilot kinds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otfs-csep",
        description="Multi-user MIMO-OTFS channel estimation experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("nmse", help="channel-estimation NMSE versus SNR")
    _add_common(p)
    p.add_argument("--snr", default="-10:5:20", help="SNR grid a:step:b in dB")
    p.set_defaults(func=cmd_nmse)

    p = subs.add_parser("ber", help="data bit error rate versus SNR")
    _add_common(p)
    p.add_argument("--snr", default="-10:5:20")
    p.add_argument("--csi", default="estimated",
                   help="comma list of perfect,estimated")
    p.set_defaults(func=cmd_ber)

    p = subs.add_parser("se", help="spectral efficiency versus SNR")
    _add_common(p)
    p.add_argument("--snr", default="-10:5:20")
    p.add_argument("--csi", default="estimated")
    p.set_defaults(func=cmd_se)

    p = subs.add_parser("paths", help="NMSE versus path count at fixed SNR")
    _add_common(p)
    p.add_argument("--snr", default="15")
    p.add_argument("--paths", default="2:1:6", help="path-count grid a:step:b")
    p.set_defaults(func=cmd_paths)

    p = subs.add_parser("coherence", help="cross-user pilot coherence surface")
    _add_common(p, trials=False)
    p.add_argument("--pair", default="0,1", help="two user indices u,v")
    p.add_argument("--dnu", default="-3:0.1:3",
                   help="Doppler-difference grid in taps")
    p.add_argument("--dl", default="-8:1:8", help="delay-difference grid in bins")
    p.set_defaults(func=cmd_coherence)

    p = subs.add_parser("layout", help="print layout geometry and overheads")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--desk-scale", action="store_true")
    p.add_argument("-o", "--output", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_layout)

    return parser


#: value flags that accept tokens starting with '-' (e.g. ``--snr -10:5:20``)
_SPAN_FLAGS = ("--snr", "--dnu", "--dl", "--paths")


def _merge_span_flags(argv: list[str]) -> list[str]:
    """Join span flags with their value so argparse keeps negative spans."""
    out = []
    i = 0
    while i < len(argv):
        if argv[i] in _SPAN_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(_merge_span_flags(
        list(sys.argv[1:] if argv is None else argv)
    ))
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
