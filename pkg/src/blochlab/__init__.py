"""Bloch band structure, semiclassical wave dynamics, phase-space diagnostics.

The package is organized bottom-up: ``planewave`` solves the periodic
eigenproblem fiber by fiber, ``bandstructure`` differentiates bands and
hunts critical sets, ``blochdata`` carries semiclassical fields and band
projections on the simulation grid, ``dynamics`` integrates the flows,
``wigner`` measures them in phase space, and ``harness`` wires everything
into reproducible convergence experiments.  The command line front end
lives in ``cli`` and is installed as ``blochlab``.
"""

from .bandstructure import (
    BlochBandOracle,
    band_gradient,
    band_hessian,
    compute_band_grid,
    find_critical_points,
)
from .blochdata import (
    BandFiberTable,
    WaveField,
    build_band_data,
    make_envelope,
    project_band,
)
from .dynamics import (
    DensityOperator,
    ExtPotential,
    MultiplierSymbol,
    evolve_effective_mass,
    evolve_full,
    evolve_heisenberg,
    evolve_multiplier,
)
from .harness import ExperimentConfig, default_config, fit_rate, run_experiment
from .planewave import (
    DegenerateBandError,
    PeriodicPotential,
    PlaneWaveBasis,
    solve_fiber,
)
from .wigner import weyl_apply, wigner_pair, wigner_transform

__version__ = "0.1.0"

__all__ = [
    "BandFiberTable",
    "BlochBandOracle",
    "DegenerateBandError",
    "DensityOperator",
    "ExperimentConfig",
    "ExtPotential",
    "MultiplierSymbol",
    "PeriodicPotential",
    "PlaneWaveBasis",
    "WaveField",
    "band_gradient",
    "band_hessian",
    "build_band_data",
    "compute_band_grid",
    "default_config",
    "evolve_effective_mass",
    "evolve_full",
    "evolve_heisenberg",
    "evolve_multiplier",
    "find_critical_points",
    "fit_rate",
    "make_envelope",
    "project_band",
    "run_experiment",
    "solve_fiber",
    "weyl_apply",
    "wigner_pair",
    "wigner_transform",
    "__version__",
]
