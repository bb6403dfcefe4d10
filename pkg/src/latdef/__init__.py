"""Point defects in multilattice crystals.

Library + CLI for site-potential energies on multilattices, defect
relaxation, dynamical-matrix spectral analysis, Cauchy-Born tensors,
lattice Green's function blocks, and decay-exponent measurement.
"""

from .lattice import (
    BondTriplet,
    InteractionRange,
    LatticeError,
    LatticeWindow,
    MultilatticeSpec,
    build_multilattice,
    make_triplet,
    validate_range,
)
from .potential import (
    DefectModel,
    PotentialError,
    make_harmonic,
    make_morse_pair,
)
from .energy import (
    DisplacementField,
    energy_renormalized,
    gradient,
    hessian_apply,
    load_field,
    norm_a1,
    norm_a2,
    norm_a3,
    save_field,
)
from .spectral import (
    BrillouinGrid,
    SpectralError,
    assemble_H,
    phonons,
    predict_exponent,
    schur_inverse,
    stability_certificate,
)
from .cauchyborn import (
    CBError,
    W_hat,
    assemble_J,
    cb_consistency,
    claimant_check,
    elastic_tensor,
    shift_equilibrium,
)
from .relax import (
    RelaxError,
    ResidualField,
    SolveReport,
    relax,
    residual_f,
)
from .greens import (
    DecayFit,
    GreensBlocks,
    GreensError,
    Reconstruction,
    decay_fit,
    greens_blocks,
    reconstruct_solution,
    solution_decay_report,
)
from .crystals import (
    Crystal,
    CrystalError,
    available_presets,
    load_crystal,
)

__version__ = "0.1.0"
