"""Weighted-Dirac curves for the inhomogeneous continuity equation.

Cone-space metrics, the Wasserstein-Fisher-Rao curve energy, characteristic
integration, superposition and lifting of grid solutions, and a sparse
conditional-gradient solver for dynamic inverse problems.
"""
from .cone_space import (
    ConeAtom,
    DomainBox,
    WeightedCurve,
    flat_distance,
    hk_cone_distance,
    sup_distance,
    support_components,
    validate_curve,
)
from .energy import (
    EnergyParams,
    b_delta,
    coercivity_bounds,
    curve_energy,
    curve_energy_localized,
    normalize_to_unit_energy,
    psi_delta,
)
from .characteristics import (
    FieldGrid,
    cutoff,
    integrate_characteristic,
    integrate_many,
    ode_residual,
    vanishing_time,
)
from .superposition import (
    CurveEnsemble,
    continuity_residual,
    grid_solution_from_ensemble,
    lift,
    mollify,
    superpose,
)
from .inverse import (
    ObservationModel,
    SolverConfig,
    SparseSolution,
    coefficient_step,
    dual_certificate,
    extremality_check,
    gcg_solve,
    insertion_step,
    minimal_tv_select,
    observe,
    tikhonov_value,
)
from .config import RunConfig, parse_config
from .errors import (
    EmptyInput,
    InvalidCurve,
    InvalidEpsilon,
    InvalidInterval,
    MismatchedGrids,
    NoImprovingCurve,
    NonAbsolutelyContinuous,
    NonFiniteField,
    RangeError,
    SchemaError,
    ValidationError,
    WFRError,
    ZeroEnergy,
)

__version__ = "0.1.0"

__all__ = [
    "ConeAtom",
    "DomainBox",
    "WeightedCurve",
    "flat_distance",
    "hk_cone_distance",
    "sup_distance",
    "support_components",
    "validate_curve",
    "EnergyParams",
    "b_delta",
    "coercivity_bounds",
    "curve_energy",
    "curve_energy_localized",
    "normalize_to_unit_energy",
    "psi_delta",
    "FieldGrid",
    "cutoff",
    "integrate_characteristic",
    "integrate_many",
    "ode_residual",
    "vanishing_time",
    "CurveEnsemble",
    "continuity_residual",
    "grid_solution_from_ensemble",
    "lift",
    "mollify",
    "superpose",
    "ObservationModel",
    "SolverConfig",
    "SparseSolution",
    "coefficient_step",
    "dual_certificate",
    "extremality_check",
    "gcg_solve",
    "insertion_step",
    "minimal_tv_select",
    "observe",
    "tikhonov_value",
    "RunConfig",
    "parse_config",
    "EmptyInput",
    "InvalidCurve",
    "InvalidEpsilon",
    "InvalidInterval",
    "MismatchedGrids",
    "NoImprovingCurve",
    "NonAbsolutelyContinuous",
    "NonFiniteField",
    "RangeError",
    "SchemaError",
    "ValidationError",
    "WFRError",
    "ZeroEnergy",
    "__version__",
]
