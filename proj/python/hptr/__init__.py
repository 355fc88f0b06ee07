"""Hierarchical pairwise-relative trajectory prediction."""

from ._hptr import (
    CapacityError,
    ContractError,
    CorruptionError,
    DimensionError,
    DomainError,
    EmptyGroupError,
    Model,
    NumericalError,
    ParseError,
    Scenario,
    Session,
    cos_loss,
    generate_scenario,
    huber,
    knn_indices,
    relative_pose,
    rpe,
    softmax_temperature,
    toy_train,
    wrap_angle,
)

__all__ = [
    "CapacityError",
    "ContractError",
    "CorruptionError",
    "DimensionError",
    "DomainError",
    "EmptyGroupError",
    "Model",
    "NumericalError",
    "ParseError",
    "Scenario",
    "Session",
    "cos_loss",
    "generate_scenario",
    "huber",
    "knn_indices",
    "relative_pose",
    "rpe",
    "softmax_temperature",
    "toy_train",
    "wrap_angle",
]
