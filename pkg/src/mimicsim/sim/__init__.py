from .character import CharacterSpec, SpecError, bundled_characters, load_character, spec_from_dict
from .dynamics import (
    CONTROL_DT,
    DT,
    SUBSTEPS,
    SimState,
    SimulationError,
    contact_force,
    contact_forces,
    control_step,
    feature_jacobian,
    kinematic_features,
    pack,
    simulate,
    state_jacobians,
    unpack,
    link_states,
    pd_torque,
    soft_limit_torque,
    step,
)

__all__ = [
    "CharacterSpec",
    "SpecError",
    "bundled_characters",
    "load_character",
    "spec_from_dict",
    "CONTROL_DT",
    "DT",
    "SUBSTEPS",
    "SimState",
    "SimulationError",
    "contact_force",
    "contact_forces",
    "control_step",
    "feature_jacobian",
    "kinematic_features",
    "pack",
    "simulate",
    "state_jacobians",
    "unpack",
    "link_states",
    "pd_torque",
    "soft_limit_torque",
    "step",
]
