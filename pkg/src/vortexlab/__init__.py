"""vortexlab: Ginzburg-Landau vortex filaments pinned to an unstable geodesic.

A desk-scale numerical laboratory on a metric 3-torus: heat-flow evolution of
complex order parameters, vortex-filament extraction as lattice 1-currents,
flat-norm distances by linear programming, minmax trajectory selection, and
varifold-style diagnostics.
"""

__version__ = "0.1.0"
