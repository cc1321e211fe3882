"""Collaborative diffusion on procedurally rendered toy faces.

Two uni-modal conditional noise predictors (segmentation mask and a two-value
attribute vector) are fused per pixel by small dynamic-diffuser networks.
"""
from .collab import (
    CollabEnsemble,
    Collaborator,
    DynamicDiffuser,
    InfluenceStack,
    collaborative_sample,
    combine_eps,
    export_influence_trace,
    normalize_influences,
    train_dynamic_diffusers,
)
from .diffcore import RngStream, Schedule, make_linear_schedule, reverse_chain
from .editkit import EditConfig, EditSession, collaborative_edit, prepare_session
from .estimators import CollaborativeDiffusion, CollaborativeEditor, UnimodalDiffusion
from .exceptions import (
    ArgumentError,
    CollabError,
    ConfigurationError,
    ContractViolation,
    DivergenceError,
    InvariantViolation,
    StateError,
    UsageError,
)
from .unimodal import ConditionEmbedding, EpsModel, ModelConfig, TrainConfig, train_unimodal

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "CollabEnsemble", "CollabError", "Collaborator", "CollaborativeDiffusion",
    "CollaborativeEditor", "ConditionEmbedding", "ConfigurationError", "ContractViolation", "DivergenceError",
    "DynamicDiffuser", "EditConfig", "EditSession", "EpsModel", "InfluenceStack", "InvariantViolation",
    "ModelConfig", "RngStream", "Schedule", "StateError", "TrainConfig", "UnimodalDiffusion", "UsageError",
    "collaborative_edit", "collaborative_sample", "combine_eps", "export_influence_trace", "make_linear_schedule",
    "normalize_influences", "prepare_session", "reverse_chain", "train_dynamic_diffusers", "train_unimodal",
]
