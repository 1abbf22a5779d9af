"""Tests for the figure-rendering component.

The unit tests synthesize conforming run-directory files by hand; the
acceptance test produces a fresh run directory through the simulator's CLI
and renders from it, touching the primary package only through its
command-line and file interfaces.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from artifacts import RunArtifacts, monotonicity_flags
from render import main as render_main, plot_energy, plot_snapshots


def synth_rundir(root, energies=(3.0, 2.5, 2.0), times=(0.0, 0.5)):
    root = Path(root)
    (root / "snapshots").mkdir(parents=True)
    header = "step,t,gamma_length,energy,area_0,area_1,slack,solver_iterations,solver_residual"
    rows = [header]
    for i, E in enumerate(energies):
        rows.append(f"{i},{0.1 * i:g},{E:g},{E:g},1,63,0,5,1e-12")
    (root / "energy.csv").write_text("\n".join(rows) + "\n")
    for t in times:
        lines = ["curve 0 closed=1"]
        th = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        for x, y in zip(np.cos(th), np.sin(th)):
            lines.append(f"{x:.6g} {y:.6g}")
        lines.append("curve 1 closed=0")
        lines += ["-2 -2", "-1 -1.5", "0 -1.8"]
        (root / "snapshots" / f"curves_t{t:g}.txt").write_text("\n".join(lines) + "\n")
    (root / "junctions.txt").write_text("0 0 0 1 0 1 2\n")
    return root


def test_snapshot_parser(tmp_path):
    run = synth_rundir(tmp_path / "run")
    art = RunArtifacts(run)
    assert art.snapshot_times() == [0.0, 0.5]
    curves = art.load_snapshot(0.0)
    assert len(curves) == 2
    assert curves[0][0] is True and curves[0][1].shape == (8, 2)
    assert curves[1][0] is False and curves[1][1].shape == (3, 2)
    assert art.load_junctions() == [(0, [(0, 0), (1, 0), (1, 2)])]


def test_energy_table_and_flags(tmp_path):
    run = synth_rundir(tmp_path / "run", energies=(3.0, 2.0, 2.5, 1.0))
    art = RunArtifacts(run)
    table = art.energy_table()
    assert table["step"].tolist() == [0, 1, 2, 3]
    assert monotonicity_flags(table["energy"]) == [1]
    assert monotonicity_flags([2.0, 2.0, 2.0]) == []
    assert monotonicity_flags([3.0, 2.0, 1.0]) == []


def test_plot_snapshots_fixed_frame(tmp_path):
    run = synth_rundir(tmp_path / "run")
    written, skipped = plot_snapshots(run, [0.0, 0.5], out=tmp_path / "figs")
    assert len(written) == 2 and not skipped
    for p in written:
        assert p.exists() and p.stat().st_size > 0


def test_plot_snapshots_empty_times_no_files(tmp_path):
    run = synth_rundir(tmp_path / "run")
    written, skipped = plot_snapshots(run, [], out=tmp_path / "figs")
    assert written == [] and skipped == []
    assert not (tmp_path / "figs").exists()


def test_plot_snapshots_missing_time_skipped(tmp_path):
    run = synth_rundir(tmp_path / "run")
    written, skipped = plot_snapshots(run, [0.0, 9.9], out=tmp_path / "figs")
    assert len(written) == 1
    assert skipped == [9.9]


def test_plot_energy_flags_rendered(tmp_path):
    run = synth_rundir(tmp_path / "run", energies=(3.0, 2.0, 2.6, 1.0))
    path, flags = plot_energy(run, out=tmp_path / "figs")
    assert path.exists()
    assert flags == [1]
    # constant energy: flat line, no flags
    run2 = synth_rundir(tmp_path / "run2", energies=(2.0, 2.0, 2.0))
    _, flags2 = plot_energy(run2, out=tmp_path / "figs2")
    assert flags2 == []


def test_rendering_does_not_mutate_rundir(tmp_path):
    run = synth_rundir(tmp_path / "run")
    before = {p: p.read_bytes() for p in run.rglob("*") if p.is_file()}
    plot_snapshots(run, [0.0], out=tmp_path / "figs")
    plot_energy(run, out=tmp_path / "figs")
    after = {p: p.read_bytes() for p in run.rglob("*") if p.is_file()}
    assert before == after


FIG2_TIMES = [0.0, 0.2, 0.4, 1.0]


@pytest.mark.slow
def test_acceptance_plot_pipeline(tmp_path):
    """[SECONDARY] acceptance: render example1 panels at the published
    figure times plus an energy plot with zero monotonicity flags, from a
    fresh run directory produced by the simulator CLI."""
    rundir = tmp_path / "ex1"
    cmd = [
        sys.executable, "-m", "msflow.cli_io", "run", "--preset", "example1",
        "--out", str(rundir),
        "--override=time.tau=0.01",
        "--override=resolution.vertices_per_curve=16",
        "--override=mesh.h_fine=0.5",
        "--override=mesh.h_coarse=1.0",
        "--override=mesh.band_width=1.0",
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr

    figdir = tmp_path / "figs"
    code = render_main([str(rundir), "--times", *map(str, FIG2_TIMES), "--out", str(figdir)])
    assert code == 0
    for t in FIG2_TIMES:
        assert (figdir / f"snapshot_t{t:g}.png").exists()
    _, flags = plot_energy(rundir, out=figdir)
    assert flags == [], f"energy increased on intervals {flags}"
    print("ACCEPTANCE plot pipeline: PASS (4 panels + energy plot, zero flags)")
