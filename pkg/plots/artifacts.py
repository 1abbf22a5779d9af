"""Readers for simulation run directories.

Parses the delimited outputs a run produces: ``energy.csv`` diagnostics,
``snapshots/curves_t{T}.txt`` polyline dumps, ``junctions.txt`` matched
triples and the legacy-VTK ASCII potential fields under ``bulk/``.  Nothing
here imports the simulator; the file formats are the only contract.
"""

import csv
import re
from pathlib import Path

import numpy as np

SNAPSHOT_RE = re.compile(r"curves_t(.+)\.txt$")


class RunArtifacts:
    """Lazy view of one run directory."""

    def __init__(self, rundir):
        self.root = Path(rundir)
        if not (self.root / "energy.csv").exists():
            raise FileNotFoundError(f"{rundir} does not look like a run directory")

    def energy_table(self):
        """Columns of energy.csv as a dict of float arrays (plus 'step')."""
        with open(self.root / "energy.csv") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ValueError("energy.csv holds no rows")
        out = {}
        for key in rows[0]:
            vals = [r[key] for r in rows]
            out[key] = np.array(
                [int(v) for v in vals] if key in ("step", "solver_iterations")
                else [float(v) for v in vals]
            )
        return out

    def snapshot_times(self):
        times = []
        snapdir = self.root / "snapshots"
        if snapdir.is_dir():
            for p in snapdir.iterdir():
                m = SNAPSHOT_RE.match(p.name)
                if m:
                    times.append(float(m.group(1)))
        return sorted(times)

    def snapshot_path(self, t):
        return self.root / "snapshots" / f"curves_t{t:g}.txt"

    def load_snapshot(self, t):
        """List of (closed, (n, 2) vertex array) in curve order."""
        curves = []
        closed = None
        pts = []
        with open(self.snapshot_path(t)) as f:
            for line in f:
                line = line.strip()
                if line.startswith("curve "):
                    if pts:
                        curves.append((closed, np.array(pts)))
                        pts = []
                    closed = line.endswith("closed=1")
                elif line:
                    x, y = line.split()
                    pts.append((float(x), float(y)))
        if pts:
            curves.append((closed, np.array(pts)))
        return curves

    def load_junctions(self):
        """List of (junction id, [(curve, vertex)] triples)."""
        path = self.root / "junctions.txt"
        out = []
        if not path.exists():
            return out
        for line in path.read_text().splitlines():
            nums = [int(v) for v in line.split()]
            if len(nums) == 7:
                out.append((nums[0], list(zip(nums[1::2], nums[2::2]))))
        return out

    def load_bulk(self, t):
        """(points, triangles, {field: values}) from a legacy-VTK ASCII dump."""
        path = self.root / "bulk" / f"w_t{t:g}.vtk"
        lines = path.read_text().splitlines()
        i = 0
        points = tris = None
        fields = {}
        while i < len(lines):
            line = lines[i]
            if line.startswith("POINTS"):
                n = int(line.split()[1])
                data = [lines[i + 1 + j].split() for j in range(n)]
                points = np.array(data, dtype=float)[:, :2]
                i += n
            elif line.startswith("CELLS"):
                n = int(line.split()[1])
                tris = np.array(
                    [lines[i + 1 + j].split()[1:] for j in range(n)], dtype=int
                )
                i += n
            elif line.startswith("SCALARS"):
                name = line.split()[1]
                n = points.shape[0]
                vals = [float(lines[i + 2 + j]) for j in range(n)]
                fields[name] = np.array(vals)
                i += n + 1
            i += 1
        return points, tris, fields


def monotonicity_flags(energy, tol=1e-9):
    """Index pairs (i, i+1) where the energy increases beyond tolerance."""
    E = np.asarray(energy, dtype=float)
    scale = np.maximum(1.0, np.abs(E[:-1]))
    return [int(i) for i in np.flatnonzero(E[1:] > E[:-1] + tol * scale)]
