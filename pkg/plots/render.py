#!/usr/bin/env python3
"""Render publication-style figures from a simulation run directory.

Usage:
    python plots/render.py RUNDIR [--times T ...] [--format png|svg] [--out DIR]

Produces one fixed-frame snapshot panel per requested time (all panels share
the (-4,4)^2 axes) and an energy-over-time plot annotated with any interval
where the energy increases beyond tolerance.  Missing snapshot times are
listed and skipped; the run directory itself is never written to unless it
is also the output directory.
"""

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from artifacts import RunArtifacts, monotonicity_flags

PANEL_SIZE = 4.0
CURVE_COLORS = ["tab:blue", "tab:red", "tab:green", "tab:orange", "tab:purple", "tab:brown"]


def plot_snapshots(rundir, times, out=None, fmt="png"):
    """One image per requested time; returns (written paths, skipped times)."""
    art = RunArtifacts(rundir)
    outdir = Path(out) if out else Path(rundir) / "figures"
    written, skipped = [], []
    if not times:
        return written, skipped
    outdir.mkdir(parents=True, exist_ok=True)
    for t in times:
        if not art.snapshot_path(t).exists():
            skipped.append(t)
            continue
        curves = art.load_snapshot(t)
        fig, ax = plt.subplots(figsize=(PANEL_SIZE, PANEL_SIZE))
        for i, (closed, pts) in enumerate(curves):
            xy = pts
            if closed:
                xy = list(pts) + [pts[0]]
                xy = [[p[0] for p in xy], [p[1] for p in xy]]
            else:
                xy = [pts[:, 0], pts[:, 1]]
            ax.plot(xy[0], xy[1], lw=1.4, color=CURVE_COLORS[i % len(CURVE_COLORS)])
        ax.set_xlim(-4, 4)
        ax.set_ylim(-4, 4)
        ax.set_aspect("equal")
        ax.set_title(f"t = {t:g}")
        fig.tight_layout()
        path = outdir / f"snapshot_t{t:g}.{fmt}"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written, skipped


def plot_energy(rundir, out=None, fmt="png", tol=1e-9):
    """Energy-vs-time plot; returns (path, flagged interval indices)."""
    art = RunArtifacts(rundir)
    table = art.energy_table()
    t, E = table["t"], table["energy"]
    flags = monotonicity_flags(E, tol)
    outdir = Path(out) if out else Path(rundir) / "figures"
    outdir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(1.6 * PANEL_SIZE, PANEL_SIZE))
    ax.plot(t, E, lw=1.2, color="black")
    for i in flags:
        ax.axvspan(t[i], t[i + 1], color="tab:red", alpha=0.4)
    ax.set_xlabel("t")
    ax.set_ylabel("discrete energy")
    if flags:
        ax.set_title(f"{len(flags)} non-monotone interval(s) flagged")
    fig.tight_layout()
    path = outdir / f"energy.{fmt}"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path, flags


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("rundir")
    ap.add_argument("--times", nargs="*", type=float, default=None,
                    help="snapshot times to render (default: all available)")
    ap.add_argument("--format", choices=("png", "svg"), default="png")
    ap.add_argument("--out", default=None, help="output directory (default RUNDIR/figures)")
    args = ap.parse_args(argv)

    art = RunArtifacts(args.rundir)
    times = args.times if args.times is not None else art.snapshot_times()
    written, skipped = plot_snapshots(args.rundir, times, args.out, args.format)
    for p in written:
        print(p)
    for t in skipped:
        print(f"missing snapshot for t={t:g}; skipped", file=sys.stderr)
    epath, flags = plot_energy(args.rundir, args.out, args.format)
    print(epath)
    if flags:
        print(f"energy increases flagged on {len(flags)} interval(s)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
