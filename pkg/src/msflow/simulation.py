"""Time stepping for the coupled curve-network / bulk-diffusion flow.

One step assembles the block system on the current curves and mesh, solves
it, moves the curve vertices by the projected displacement, and records
diagnostics including the per-step energy-stability slack, which must stay
nonnegative up to solver accuracy no matter the step size.  Surgery (the
removal of curves that have become too short) and mesh adaptation happen
after the move.

Initial data builders produce the standard multi-bubble configurations:
circular arcs meeting at 120-degree junctions, scaled to requested areas,
with orientation matrices wired to the documented normal convention.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import bulk_mesh
from .anisotropy import Mobility, from_config as anisotropy_from_config
from .bulk_mesh import AdaptParams, BoundarySpec, BulkMesh, build_initial, transfer_nodal
from .curve_network import (
    Curve,
    CurveNetwork,
    JunctionMap,
    apply_surgery,
    surgery_scan,
)
from .solver import SolverConfig, build_lsq_preconditioner, solve_step  # noqa: F401
from .system_assembly import assemble_blocks, expand_potentials, _assemble_curve_stiffness

logger = logging.getLogger(__name__)

__all__ = [
    "SimulationState",
    "StepRecord",
    "RunResult",
    "Simulation",
    "DissipationError",
    "SimulationAborted",
    "make_initial",
    "standalone_curvature",
    "build_simulation",
    "first_step_blocks",
    "run",
]


class DissipationError(RuntimeError):
    """The per-step stability inequality was violated beyond tolerance."""


class SimulationAborted(RuntimeError):
    """A step failed; carries everything recorded up to the failure.

    ``partial`` is a RunResult with the last accepted state, so callers can
    dump the trajectory for post-mortem inspection.
    """

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass
class SimulationState:
    m: int
    t: float
    network: CurveNetwork
    mesh: BulkMesh
    W: np.ndarray                  # (bulk vertices, phases), rows sum to zero
    kappa: np.ndarray | None = None


@dataclass
class StepRecord:
    m: int
    t: float
    gamma_length: float
    energy: float
    areas: np.ndarray
    slack: float
    solver_method: str = ""
    iterations: int = 0
    residual: float = 0.0
    wall_ms: float = 0.0
    surgeries: list = field(default_factory=list)
    deferred: list = field(default_factory=list)
    curve_areas: dict = field(default_factory=dict)
    areas_suspicious: bool = False


@dataclass
class RunResult:
    records: list
    snapshots: dict                # time -> CurveNetwork
    bulk_snapshots: dict           # time -> (mesh, W)
    extinctions: list              # (time, label, last_area)
    final_state: SimulationState
    slack_tolerance: float = 1e-9


class Simulation:
    """Holds the per-run immutable context and advances states."""

    def __init__(
        self,
        network: CurveNetwork,
        anisotropies,
        mobilities,
        boundary: BoundarySpec,
        tau: float,
        adapt_params: AdaptParams | None = None,
        solver: SolverConfig | None = None,
        surgery_min_length=None,
        surgery_min_vertices: int = 4,
        lumped: bool = False,
        slack_tolerance: float = 1e-9,
    ):
        if tau <= 0.0:
            raise ValueError("tau must be positive")
        self.tau = float(tau)
        self.anisotropies = list(anisotropies)
        self.mobilities = list(mobilities)
        self.boundary = boundary
        self.adapt_params = adapt_params or AdaptParams()
        self.solver = solver or SolverConfig()
        self.lumped = lumped
        self.slack_tolerance = slack_tolerance
        self.surgery_min_vertices = surgery_min_vertices
        if surgery_min_length is None:
            self.surgery_eps = [
                5.0 * c.length() / c.segments.shape[0] for c in network.curves
            ]
        else:
            eps = np.broadcast_to(
                np.asarray(surgery_min_length, dtype=float), (network.n_curves,)
            )
            self.surgery_eps = list(eps)
        self._moved_since_adapt = math.inf  # force adapt on the first state
        self._precond = None
        self._precond_key = None
        self._steps_since_factor = 0
        self._warm_start = None

    # -- state construction -------------------------------------------------

    def initial_state(self, network: CurveNetwork) -> SimulationState:
        mesh = bulk_mesh.adapt(build_initial(2), network, self.adapt_params)
        W = np.zeros((mesh.n_vertices, network.n_phases))
        self._moved_since_adapt = 0.0
        return SimulationState(0, 0.0, network, mesh, W, np.zeros(network.n_dofs))

    # -- diagnostics ---------------------------------------------------------

    def energy(self, network: CurveNetwork):
        L = network.anisotropic_length(self.anisotropies)
        areas, suspicious = network.region_areas()
        w = self.boundary.w_values
        E = L - float(w @ areas) if w.size else L
        return L, E, areas, suspicious

    def record_state(self, state: SimulationState) -> StepRecord:
        L, E, areas, susp = self.energy(state.network)
        return StepRecord(
            state.m,
            state.t,
            L,
            E,
            areas,
            slack=math.nan,
            curve_areas={
                state.network.curves[i].label or str(i): a
                for i, a in state.network.closed_curve_areas().items()
            },
            areas_suspicious=susp,
        )

    # -- the step -------------------------------------------------------------

    def step(self, state: SimulationState) -> tuple:
        """Advance one time step; returns (new_state, StepRecord)."""
        t0 = time.perf_counter()
        net = state.network
        mesh = state.mesh

        blocks = assemble_blocks(
            mesh,
            net,
            self.anisotropies,
            self.mobilities,
            self.tau,
            self.boundary,
            lumped=self.lumped,
        )
        # the factorized preconditioner stays useful while the mesh and the
        # curve layout persist; the slowly moving curves only perturb it
        key = (id(mesh), blocks.n_unknowns)
        if (
            self.solver.method == "gmres+lsq-precond"
            and (key != self._precond_key or self._steps_since_factor >= 12)
        ):
            self._precond = build_lsq_preconditioner(blocks)
            self._precond_key = key
            self._steps_since_factor = 0
        x0 = self._warm_start if (
            self._warm_start is not None and self._warm_start.size == blocks.n_unknowns
        ) else None
        W_red, kappa, dX, stats = solve_step(blocks, self.solver, self._precond, x0=x0)
        if self._steps_since_factor == 0:
            self._fresh_iters = stats.iterations
        self._steps_since_factor += 1
        if stats.fallback or stats.iterations > getattr(self, "_fresh_iters", 40) + 20:
            self._precond_key = None  # force refactorization next step
        self._warm_start = np.concatenate((W_red, kappa, dX))
        W_full = expand_potentials(W_red.reshape(net.n_phases - 1, mesh.n_vertices).T)

        X_new = net.all_vertices() + dX.reshape(-1, 2)
        net_moved = net.with_vertices(X_new)

        slack = self.dissipation_slack(net, net_moved, W_full, blocks, dX)
        L_new, E_new, areas, susp = self.energy(net_moved)
        if not math.isfinite(E_new):
            raise RuntimeError("non-finite energy; aborting")
        L_old = net.anisotropic_length(self.anisotropies)
        if slack < -self.slack_tolerance * max(1.0, L_old):
            raise DissipationError(
                f"stability slack {slack:.3e} negative beyond tolerance at step {state.m}"
            )

        # surgery after the step that detects it
        events = surgery_scan(net_moved, self.surgery_eps, self.surgery_min_vertices)
        applied, deferred = [], []
        net_final = net_moved
        kappa_next = kappa
        if events:
            net_final, applied, deferred, parents = apply_surgery(net_moved, events)
            if applied:
                self.surgery_eps = [
                    max(self.surgery_eps[i] for i in group) for group in parents
                ]
                for group in parents:
                    firsts = {id(self.anisotropies[i]) for i in group}
                    if len(firsts) > 1:
                        logger.warning(
                            "glued curves carry different densities; keeping the first"
                        )
                self.anisotropies = [self.anisotropies[g[0]] for g in parents]
                self.mobilities = [self.mobilities[g[0]] for g in parents]
                kappa_next = None
                self._moved_since_adapt = math.inf  # retriangulate around the new topology

        # adapt the bulk mesh once the curves have drifted far enough that
        # the refined band no longer brackets them comfortably
        self._moved_since_adapt += float(np.max(np.abs(dX))) if dX.size else 0.0
        if self._moved_since_adapt > 0.45 * self.adapt_params.band_width:
            new_mesh = bulk_mesh.adapt(mesh, net_final, self.adapt_params)
            W_next = transfer_nodal(mesh, W_full, new_mesh)
            self._moved_since_adapt = 0.0
        else:
            new_mesh, W_next = mesh, W_full

        new_state = SimulationState(
            state.m + 1, state.t + self.tau, net_final, new_mesh, W_next, kappa_next
        )
        rec = StepRecord(
            new_state.m,
            new_state.t,
            L_new,
            E_new,
            areas,
            slack=slack,
            solver_method=stats.method,
            iterations=stats.iterations,
            residual=stats.residual,
            wall_ms=1e3 * (time.perf_counter() - t0),
            surgeries=applied,
            deferred=deferred,
            curve_areas={
                net_final.curves[i].label or str(i): a
                for i, a in net_final.closed_curve_areas().items()
            },
            areas_suspicious=susp,
        )
        return new_state, rec

    # -- stability ------------------------------------------------------------

    def dissipation_slack(self, before, after, W_full, blocks, dX) -> float:
        """Slack of the per-step energy inequality, >= 0 up to solver error.

        The inequality bounds the new anisotropic length plus the boundary
        volume term plus the bulk gradient energy plus the kinetic term by
        the old anisotropic length; every term is evaluated with exactly the
        quadratures the assembled blocks use.
        """
        L_old = before.anisotropic_length(self.anisotropies)
        L_new = after.anisotropic_length(self.anisotropies)

        tau = self.tau
        grad = tau * float(np.einsum("pl,pl->", W_full, blocks.A @ W_full))

        w = self.boundary.w_values
        wd_term = 0.0
        if w.size and np.any(w != 0.0):
            sweep = blocks.masses * np.einsum(
                "ki,ki->k", dX.reshape(-1, 2), blocks.omega
            )
            off = before.offsets()
            per_curve = np.add.reduceat(sweep, off[:-1])
            wO = w @ before.orientation  # (I_S,)
            wd_term = -float(wO @ per_curve)

        kin = 0.0
        if blocks.Dbeta.nnz:
            s = np.einsum("ki,ki->k", dX.reshape(-1, 2), blocks.omega)
            kin = float((blocks.Dbeta @ dX) @ s)

        return L_old - L_new - wd_term - grad - kin

    def check_dissipation(self, before: SimulationState, after: SimulationState) -> float:
        """Recompute the slack from two consecutive states of one step.

        Requires ``after.W`` to live on ``before``-compatible bulk vertices
        (true when the step did not retriangulate), and no surgery in
        between; the in-step bookkeeping always evaluates the slack before
        either happens.
        """
        if after.network.n_dofs != before.network.n_dofs:
            raise ValueError("states are separated by a surgery; slack undefined")
        blocks = assemble_blocks(
            before.mesh,
            before.network,
            self.anisotropies,
            self.mobilities,
            self.tau,
            self.boundary,
            lumped=self.lumped,
        )
        dX = (after.network.all_vertices() - before.network.all_vertices()).ravel()
        if after.W.shape[0] != before.mesh.n_vertices:
            raise ValueError("potential field does not match the step mesh")
        return self.dissipation_slack(before.network, after.network, after.W, blocks, dX)


def standalone_curvature(network: CurveNetwork, anisotropies) -> np.ndarray:
    """Discrete anisotropic curvature from the curvature-vector equation alone.

    Tests the equation with normal-directed nodal fields: at each vertex,
    kappa = -(stiffness @ coordinates) . omega / (mass * |omega|^2).  With
    the perpendicular-normal convention a counterclockwise unit circle
    (inward normal) yields kappa close to +1.
    """
    E = _assemble_curve_stiffness(network, anisotropies)
    r = (E @ network.all_vertices().ravel()).reshape(-1, 2)
    omega = network.vertex_normals()
    m = network.lumped_masses()
    return -np.einsum("ki,ki->k", r, omega) / (m * np.einsum("ki,ki->k", omega, omega))


# -- initial data -------------------------------------------------------------


def _segment_area_factor(phi: float) -> float:
    """Area between a chord of half-length 1 and its arc with chord-tangent angle phi."""
    if abs(phi) < 1e-14:
        return 0.0
    return (phi - math.sin(phi) * math.cos(phi)) / math.sin(phi) ** 2


def _double_bubble_shape(a_left: float, a_right: float):
    """Junction half-height and middle tilt for target areas (left, right)."""
    if a_left <= 0.0 or a_right <= 0.0:
        raise ValueError("bubble areas must be positive")
    target = a_right / a_left

    def ratio(d):
        A1 = _segment_area_factor(2 * math.pi / 3 - d) + _segment_area_factor(d)
        A2 = _segment_area_factor(2 * math.pi / 3 + d) - _segment_area_factor(d)
        return A2 / A1

    lo, hi = -math.pi / 3 + 1e-9, math.pi / 3 - 1e-9
    if not ratio(lo) <= target <= ratio(hi):
        raise ValueError("area ratio out of the reachable range")
    d = 0.0
    if abs(target - 1.0) > 1e-15:
        for _ in range(200):
            d = 0.5 * (lo + hi)
            if ratio(d) < target:
                lo = d
            else:
                hi = d
        d = 0.5 * (lo + hi)
    A1u = _segment_area_factor(2 * math.pi / 3 - d) + _segment_area_factor(d)
    y = math.sqrt(a_left / A1u)
    return y, d


def _arc_points(y: float, phi: float, n: int, bulge: int, center) -> np.ndarray:
    """Sample an arc from (0, y) to (0, -y) bulging toward bulge * x.

    ``phi`` is the chord-tangent angle; phi = 0 degenerates to the straight
    chord.  The traversal always runs top to bottom, which gives the normal
    convention (perp of the travel direction) a +x-pointing normal on the
    straight chord and the matching sense on every arc.
    """
    cx, cy = center
    if abs(phi) < 1e-14:
        ts = np.linspace(0.0, 1.0, n + 1)
        pts = np.column_stack((np.zeros(n + 1), y * (1.0 - 2.0 * ts)))
    else:
        r = y / math.sin(phi)
        xc = -y / math.tan(phi)
        th = np.linspace(phi, -phi, n + 1)
        pts = np.column_stack((xc + r * np.cos(th), r * np.sin(th)))
        if bulge < 0:
            pts[:, 0] = -pts[:, 0]
    pts[0] = (0.0, y)
    pts[-1] = (0.0, -y)
    pts[:, 0] += cx
    pts[:, 1] += cy
    return pts


def _circle_points(radius: float, n: int, center) -> np.ndarray:
    """Counterclockwise circle (normal convention points inward)."""
    th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return np.column_stack(
        (center[0] + radius * np.cos(th), center[1] + radius * np.sin(th))
    )


_DB_COLUMNS = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]])


def _double_bubble_curves(a_left, a_right, center, n_for, labels=("right", "left", "mid")):
    y, d = _double_bubble_shape(a_left, a_right)
    phi_l = 2 * math.pi / 3 - d
    phi_r = 2 * math.pi / 3 + d
    right = _arc_points(y, phi_r, n_for(2 * phi_r * y / math.sin(phi_r)), +1, center)
    left = _arc_points(y, phi_l, n_for(2 * phi_l * y / math.sin(phi_l)), -1, center)
    mid_len = 2 * y if abs(d) < 1e-14 else 2 * abs(d) * y / math.sin(abs(d))
    mid = _arc_points(
        y, abs(d), max(2, n_for(mid_len)), +1 if d >= 0 else -1, center
    )
    curves = [
        Curve(right, False, labels[0]),
        Curve(left, False, labels[1]),
        Curve(mid, False, labels[2]),
    ]
    junctions = [
        JunctionMap((0, 1, 2), ((0,), (0,), (0,))),
        JunctionMap(
            (0, 1, 2),
            tuple((c.n_vertices - 1,) for c in curves),
        ),
    ]
    return curves, junctions


def make_initial(geometry: dict, resolution: dict | None = None) -> CurveNetwork:
    """Build a named initial configuration.

    ``geometry["kind"]`` selects among ``double_bubble``,
    ``double_bubble_plus_disk``, ``two_double_bubbles``,
    ``seed_double_bubble`` and ``polylines``; see the configuration schema
    in the README for the per-kind parameters.  ``resolution`` holds
    ``vertices_per_unit_length`` (default 128) or an overriding
    ``vertices_per_curve``.
    """
    resolution = resolution or {}
    vpl = float(resolution.get("vertices_per_unit_length", 128))
    vpc = resolution.get("vertices_per_curve")

    def n_for(length: float) -> int:
        if vpc is not None:
            return int(vpc)
        return max(8, int(round(vpl * length)))

    kind = geometry.get("kind")
    exterior = int(geometry.get("exterior_phase", 2))
    if kind == "double_bubble":
        a1, a2 = geometry["areas"]
        center = tuple(geometry.get("center", (0.0, 0.0)))
        curves, junctions = _double_bubble_curves(a1, a2, center, n_for)
        return CurveNetwork(curves, junctions, _DB_COLUMNS.copy(), exterior)

    if kind == "seed_double_bubble":
        a = float(geometry["area"])
        center = tuple(geometry.get("center", (0.0, 0.0)))
        curves, junctions = _double_bubble_curves(a, a, center, n_for)
        return CurveNetwork(curves, junctions, _DB_COLUMNS.copy(), exterior)

    if kind == "double_bubble_plus_disk":
        a1, a2 = geometry["areas"]
        r = float(geometry["radius"])
        center = tuple(geometry.get("center", (-0.7, 0.0)))
        disk_center = tuple(geometry.get("disk_center", (2.2, 0.0)))
        curves, junctions = _double_bubble_curves(a1, a2, center, n_for)
        disk_n = max(12, n_for(2 * math.pi * r))
        curves.append(Curve(_circle_points(r, disk_n, disk_center), True, "disk"))
        O = np.column_stack((_DB_COLUMNS, [0, -1, 1]))
        return CurveNetwork(curves, junctions, O, exterior)

    if kind == "two_double_bubbles":
        (a1, a2), (a3, a4) = geometry["areas"]  # (left, right) per bubble
        c1, c2 = geometry.get("centers", ((0.0, -1.9), (0.0, 1.9)))
        curves1, junctions1 = _double_bubble_curves(
            a1, a2, tuple(c1), n_for, labels=("right1", "left1", "mid1")
        )
        curves2, junctions2 = _double_bubble_curves(
            a3, a4, tuple(c2), n_for, labels=("right2", "left2", "mid2")
        )
        curves = curves1 + curves2
        junctions = junctions1 + [
            JunctionMap(tuple(c + 3 for c in jm.curves), jm.vertex_lists)
            for jm in junctions2
        ]
        O = np.hstack((_DB_COLUMNS, _DB_COLUMNS))
        return CurveNetwork(curves, junctions, O, exterior)

    if kind == "polylines":
        curves = [
            Curve(np.asarray(c["vertices"], dtype=float), bool(c["closed"]), c.get("label", ""))
            for c in geometry["curves"]
        ]
        junctions = [
            JunctionMap(tuple(j["curves"]), tuple(tuple(v) for v in j["vertices"]))
            for j in geometry.get("junctions", [])
        ]
        return CurveNetwork(
            curves,
            junctions,
            np.asarray(geometry["orientation"], dtype=int),
            int(geometry.get("exterior_phase", len(geometry["orientation"]) - 1)),
        )

    raise ValueError(f"unknown geometry kind {kind!r}")


# -- driver -------------------------------------------------------------------


def build_simulation(config):
    """Construct (Simulation, initial network) from a RunConfig-like object."""
    network = make_initial(config.geometry, config.resolution)
    anis = _anisotropies_for(config, network.n_curves)
    mobs = _mobilities_for(config, network.n_curves)
    boundary = BoundarySpec(config.boundary["dirichlet"], np.asarray(config.boundary["w_D"], dtype=float))
    if boundary.w_values.size != network.n_phases:
        raise ValueError("boundary value count does not match the phase count")
    sim = Simulation(
        network,
        anis,
        mobs,
        boundary,
        tau=config.time["tau"],
        adapt_params=AdaptParams(
            config.mesh["h_fine"], config.mesh["h_coarse"], config.mesh["band_width"]
        ),
        solver=SolverConfig(**config.solver),
        surgery_min_length=config.surgery.get("min_length"),
        surgery_min_vertices=config.surgery.get("min_vertices", 4),
        lumped=(config.quadrature == "lumped"),
    )
    return sim, network


def first_step_blocks(config):
    """Assemble the step system of the initial state (for offline dumps)."""
    sim, network = build_simulation(config)
    state = sim.initial_state(network)
    return assemble_blocks(
        state.mesh,
        state.network,
        sim.anisotropies,
        sim.mobilities,
        sim.tau,
        sim.boundary,
        lumped=sim.lumped,
    )


def run(config) -> RunResult:
    """Execute a full run described by a RunConfig-like object."""
    sim, network = build_simulation(config)
    state = sim.initial_state(network)
    tau = sim.tau
    T = float(config.time["T"])
    n_steps = int(round(T / tau))
    out_times = sorted(config.output.get("times", []))

    records = [sim.record_state(state)]
    snapshots, bulk_snapshots = {}, {}
    extinctions = []

    def maybe_snapshot(st):
        for t_req in out_times:
            if abs(st.t - t_req) <= 0.5 * tau and t_req not in snapshots:
                snapshots[t_req] = st.network
                bulk_snapshots[t_req] = (st.mesh, st.W.copy())

    maybe_snapshot(state)
    for _ in range(n_steps):
        try:
            state, rec = sim.step(state)
        except Exception as err:
            snapshots[state.t] = state.network
            bulk_snapshots[state.t] = (state.mesh, state.W.copy())
            partial = RunResult(
                records, snapshots, bulk_snapshots, extinctions, state, sim.slack_tolerance
            )
            raise SimulationAborted(
                f"step {state.m + 1} failed at t={state.t:g}: {err}", partial
            ) from err
        records.append(rec)
        for ev in rec.surgeries:
            if ev.kind == "discard":
                extinctions.append((state.t, ev.label, ev.area))
            else:
                extinctions.append((state.t, ev.label, 0.0))
        maybe_snapshot(state)
    return RunResult(records, snapshots, bulk_snapshots, extinctions, state, sim.slack_tolerance)


def _anisotropies_for(config, n_curves: int):
    spec = config.anisotropy
    if isinstance(spec, dict):
        spec = [spec] * n_curves
    if len(spec) != n_curves:
        raise ValueError("anisotropy list length does not match the curve count")
    return [anisotropy_from_config(s) for s in spec]


def _mobilities_for(config, n_curves: int):
    mob = config.mobility
    rho = mob.get("rho", 0.0)
    rhos = np.broadcast_to(np.asarray(rho, dtype=float), (n_curves,))
    beta = mob.get("beta", 1.0)
    if isinstance(beta, dict):
        beta_obj = anisotropy_from_config(beta)
        return [Mobility(beta_obj, r) for r in rhos]
    return [Mobility(float(beta), r) for r in rhos]
