"""Ultrasound B-mode reconstruction and zeroth-order attacks on its parameters."""

__version__ = "0.1.0"

from .errors import (DegenerateProbeError, ExternalModelError, InitiallyMisclassifiedError,
                     InvalidInputError)
from .rfcore import (BModeImage, ConvexGeometry, ReconParams, Reconstructor, RfFrame,
                     reconstruct)
from .phantom import PhantomSpec, generate_dataset, generate_frame
from .classifier import (ConstantModel, ExternalModel, LogisticModel, MeanIntensityModel,
                         bce_loss, extract_features, fit_logistic)
from .attack import AttackConfig, AttackResult, grid_oracle, zoo_attack

__all__ = [
    "AttackConfig", "AttackResult", "BModeImage", "ConstantModel", "ConvexGeometry",
    "DegenerateProbeError", "ExternalModel", "ExternalModelError",
    "InitiallyMisclassifiedError", "InvalidInputError", "LogisticModel",
    "MeanIntensityModel", "PhantomSpec", "ReconParams", "Reconstructor", "RfFrame",
    "bce_loss", "extract_features", "fit_logistic", "generate_dataset", "generate_frame",
    "grid_oracle", "reconstruct", "zoo_attack",
]
