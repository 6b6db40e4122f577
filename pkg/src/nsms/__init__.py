"""Incompressible flow coupled to Maxwell-Stefan cross-diffusion, posed in
entropy variables so that densities stay on the open simplex by construction.

The package is a library plus a CLI (`nsms`).  Submodules:

* mixture  - pointwise algebra (densities, fractions, entropy variables,
             the small dense matrices of the diffusion operator)
* grid     - uniform cell-centered grids
* msfield  - species transport: Neumann operators, implicit entropy-stable
             stepping, entropy and dissipation functionals
* nsfield  - incompressible flow on a MAC grid: implicit step with exact
             discrete incompressibility, energy diagnostics
* coupled  - the full time loop, steady states, relative entropy, decay
             fits, Csiszar-Kullback and mass-drift checks, CSV output
* config   - flat key=value run configuration and shipped presets
* report   - matplotlib figures rendered from run outputs
* cli      - `run`, `check`, `presets`, `report` subcommands
"""

from .errors import (
    ConfigError,
    FixedPointError,
    InvalidStateError,
    NonConvergenceError,
    SimulationAbort,
    SolverError,
)

__version__ = "0.1.0"
