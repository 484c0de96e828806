"""Explicit FEM for quasilinear viscoelastic solids and dataset generation."""

from .material import (
    ElementInversionError,
    Material,
    MaterialError,
    QLVState,
    derive_bulk_modulus,
    elastic_stress,
    hereditary_stress_reference,
    qlv_update,
    relaxation_modulus,
    small_strain_moduli,
    strain_energy_density,
)
from .solver import (
    BodyState,
    ExplicitSolver,
    NumericalBlowupError,
    SolverError,
    explicit_step,
    momentum,
    shape_gradients,
    stable_timestep,
)
from .datasets import (
    Contact,
    DATASET_SCHEMA,
    DatasetError,
    Scenario,
    ScenarioConfig,
    Sequence,
    SequenceDataset,
    generate_dataset,
    sample_scenario,
    simulate_scenario,
)

__all__ = [
    "BodyState",
    "Contact",
    "DATASET_SCHEMA",
    "DatasetError",
    "ElementInversionError",
    "ExplicitSolver",
    "Material",
    "MaterialError",
    "NumericalBlowupError",
    "QLVState",
    "Scenario",
    "ScenarioConfig",
    "Sequence",
    "SequenceDataset",
    "SolverError",
    "derive_bulk_modulus",
    "elastic_stress",
    "explicit_step",
    "generate_dataset",
    "hereditary_stress_reference",
    "momentum",
    "qlv_update",
    "relaxation_modulus",
    "sample_scenario",
    "shape_gradients",
    "simulate_scenario",
    "small_strain_moduli",
    "stable_timestep",
    "strain_energy_density",
]
