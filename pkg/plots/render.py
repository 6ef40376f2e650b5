#!/usr/bin/env python3
"""Render experiment CSV files into byte-stable figures.

Reads the CSV schemas written by the ``otfs-csep`` CLI and regenerates
the corresponding figure shapes: NMSE/BER versus SNR on a log y-axis,
spectral efficiency on a linear one, NMSE versus path count, and the
cross-user coherence surface as a heatmap.  Rendering is a pure function
of the CSV bytes: style is pinned in ``otfs.mplstyle``, SVG ids are
salted with a constant, and no timestamps are embedded, so the same
input always yields identical image bytes.

Each render writes both a raster (PNG) and a vector (SVG) file next to
each other; the vector path is the raster path with its suffix swapped.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import LogNorm

STYLE = Path(__file__).resolve().parent / "otfs.mplstyle"

KINDS = ("nmse", "ber", "se", "coherence")

#: columns every kind needs before anything is drawn
REQUIRED_COLUMNS = {
    "nmse": ("pilot", "nmse_mean"),
    "ber": ("pilot", "snr_db", "csi", "ber_mean"),
    "se": ("pilot", "snr_db", "csi", "se_mean"),
    "coherence": ("pair", "dnu_taps", "dl_bins", "mu"),
}

MARKERS = ("o", "s", "^", "d", "v", "x")

Y_LABEL = {"nmse": "NMSE", "ber": "BER", "se": "spectral efficiency (bit/s/Hz)"}


class SchemaError(ValueError):
    """The CSV lacks a column the requested figure kind needs."""


class NoDataError(ValueError):
    """The CSV contains a header but no data rows."""


def _read_rows(path: Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        rows = list(reader)
    return header, rows


def _check_schema(kind: str, header: list[str], rows: list[dict], path: Path) -> None:
    for col in REQUIRED_COLUMNS[kind]:
        if col not in header:
            raise SchemaError(f"{path}: missing column '{col}' for kind '{kind}'")
    if not rows:
        raise NoDataError(f"{path}: no data rows to render")


def _series(rows: list[dict], x_col: str, y_col: str, label_cols: list[str]):
    """Group rows into ordered series keyed by the label columns."""
    out: dict[str, tuple[list[float], list[float]]] = {}
    for row in rows:
        label = ", ".join(row[c] for c in label_cols)
        xs, ys = out.setdefault(label, ([], []))
        xs.append(float(row[x_col]))
        ys.append(float(row[y_col]))
    return out


def _draw_sweep(ax, kind: str, header: list[str], rows: list[dict], path: Path):
    if kind == "nmse":
        x_col = "snr_db" if "snr_db" in header else "n_paths"
        if x_col not in header:
            raise SchemaError(f"{path}: missing column 'snr_db' for kind 'nmse'")
    else:
        x_col = "snr_db"
    label_cols = ["pilot"]
    if kind in ("ber", "se") and len({r["csi"] for r in rows}) > 1:
        label_cols.append("csi")
    series = _series(rows, x_col, f"{kind}_mean", label_cols)
    for (label, (xs, ys)), marker in zip(series.items(), MARKERS * 8):
        if kind in ("nmse", "ber"):
            # log y-axis cannot show exact zeros (noiseless BER floors)
            shown = [(x, y) for x, y in zip(xs, ys) if y > 0]
            if not shown:
                continue
            ax.semilogy(*zip(*shown), marker=marker, label=label)
        else:
            ax.plot(xs, ys, marker=marker, label=label)
    ax.set_xlabel("SNR (dB)" if x_col == "snr_db" else "number of paths")
    ax.set_ylabel(Y_LABEL[kind])
    ax.legend()


def _draw_coherence(fig, ax, rows: list[dict]):
    dnu = sorted({float(r["dnu_taps"]) for r in rows})
    dl = sorted({float(r["dl_bins"]) for r in rows})
    grid = np.full((len(dnu), len(dl)), np.nan)
    ii = {v: i for i, v in enumerate(dnu)}
    jj = {v: j for j, v in enumerate(dl)}
    for r in rows:
        grid[ii[float(r["dnu_taps"])], jj[float(r["dl_bins"])]] = float(r["mu"])
    positive = grid[grid > 0]
    vmin = float(positive.min()) if positive.size else 1e-6
    mesh = ax.pcolormesh(
        dl, dnu, np.clip(grid, vmin, None),
        norm=LogNorm(vmin=vmin, vmax=max(float(np.nanmax(grid)), vmin * 10)),
        cmap="viridis", shading="nearest",
    )
    fig.colorbar(mesh, ax=ax, label="column coherence")
    ax.set_xlabel("delay offset (bins)")
    ax.set_ylabel("Doppler offset (taps)")
    ax.set_title(f"pilot pair {rows[0]['pair']}")


def render(csv_path: str | Path, kind: str, out_path: str | Path) -> list[Path]:
    """Render one CSV into a raster and a vector figure.

    Parameters
    ----------
    csv_path : path of a CLI-written CSV
    kind : one of ``nmse``, ``ber``, ``se``, ``coherence``
    out_path : raster output path; the vector file swaps the suffix to .svg

    Returns
    -------
    list of written paths ``[raster, vector]``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown figure kind {kind!r}; expected one of {KINDS}")
    csv_path = Path(csv_path)
    header, rows = _read_rows(csv_path)
    _check_schema(kind, header, rows, csv_path)

    raster = Path(out_path)
    vector = raster.with_suffix(".svg")
    with plt.style.context(STYLE):
        plt.rcParams["svg.hashsalt"] = "otfs-plots"
        fig, ax = plt.subplots()
        if kind == "coherence":
            _draw_coherence(fig, ax, rows)
        else:
            _draw_sweep(ax, kind, header, rows, csv_path)
        fig.tight_layout()
        fig.savefig(raster, format="png", metadata={"Software": None})
        fig.savefig(vector, format="svg", metadata={"Date": None})
        plt.close(fig)
    return [raster, vector]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="Render otfs-csep experiment CSVs into figures"
    )
    parser.add_argument("csv", help="input CSV file")
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("-o", "--output", required=True,
                        help="raster output path (vector twin written as .svg)")
    args = parser.parse_args(argv)
    try:
        written = render(args.csv, args.kind, args.output)
    except (SchemaError, NoDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
