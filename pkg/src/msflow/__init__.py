"""2D simulator for anisotropic multi-phase Mullins-Sekerka flow.

Curve networks with triple junctions evolve under quasi-static bulk
diffusion, an anisotropic Gibbs-Thomson condition with kinetic
undercooling, and junction force balance.  The discretization is an
unconditionally stable, unfitted finite element scheme: polygonal curves
carry piecewise-linear fields, the chemical potentials live on an adaptive
bulk triangulation that is independent of the curves, and the two are tied
together by exact quadrature over clipped sub-segments.
"""

from .anisotropy import Anisotropy, AnisotropyComponent, Mobility, dual_metric, hexagonal, isotropic
from .curve_network import Curve, CurveNetwork, JunctionMap, SurgeryEvent, segment_normal, surgery_scan
from .bulk_mesh import BoundarySpec, BulkMesh, adapt, assemble_stiffness, build_initial, transfer_nodal
from .simulation import SimulationState, Simulation, make_initial, run

__version__ = "0.1.0"
