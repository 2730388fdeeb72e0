"""Desk-scale spectral toolkit for translation-invariant polaron-type
Hamiltonians below the two-boson threshold."""

from .model import (
    CouplingSpec,
    ModelSpec,
    OneBodyDispersion,
    ParticleDispersion,
    check_minimal_conditions,
    evaluate,
    nelson_preset,
    polaron_preset,
)
from .fock import (
    FockBasis,
    MomentumGrid,
    OperatorMatrix,
    assemble_H,
    assemble_H1,
    build_dGamma,
    build_field,
    enumerate_basis,
)
from .spectra import (
    MassShellAtlas,
    ShellBranch,
    analytic_shell_source,
    ground_energy,
    lowest_eigs,
    trace_shells,
)
from .thresholds import (
    ThresholdReport,
    essential_bottom,
    exc_set,
    full_report,
    sigma_n_fn,
    sigma_n_min,
    threshold_hash,
    threshold_parallel,
    threshold_shell,
)
from .conjugate import (
    VectorFieldBundle,
    build_conjugate,
    build_vector_field,
    calibrate,
    crossing_momenta,
    flow_map,
)

__version__ = "0.1.0"
