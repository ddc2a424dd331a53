"""flowlab: spectral laboratory for probability-density flows on periodic boxes.

Builds exact and integrated density/phase trajectories, assembles their
entropy-production and Fisher information matrices, and certifies matrix
Riccati comparison bounds and the functional inequalities they imply.
"""

from .grid import (
    Grid,
    ScalarField,
    VectorField,
    Density,
    GridError,
    DensityFloorError,
    gradient,
    divergence,
    laplacian,
    hessian,
    integrate,
    heat_propagate,
    bohm_potential,
    log_density,
    seam_mass,
)

__version__ = "0.1.0"
