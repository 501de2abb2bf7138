"""Infidelity and sensitivity measures for saliency explanations."""
from .explainers import (
    Attribution,
    ConstantExplainer,
    GaussianKernel,
    GlobalExplainer,
    GradientExplainer,
    IntegratedGradientsExplainer,
    MaskedOptimalExplainer,
    Occlusion1Explainer,
    OptimalExplainer,
    ShapleyExplainer,
    SmoothedExplainer,
    UniformBoxKernel,
)
from .measures import MeasureConfig, MeasureReport, infidelity, sens_max
from .models import MlpModel, QuadraticModel, ToyFunction, linear_model, load_model
from .numerics import RngStream, derive_stream

__version__ = "0.1.0"

__all__ = [
    "Attribution",
    "ConstantExplainer",
    "GaussianKernel",
    "GlobalExplainer",
    "GradientExplainer",
    "IntegratedGradientsExplainer",
    "MaskedOptimalExplainer",
    "MeasureConfig",
    "MeasureReport",
    "MlpModel",
    "Occlusion1Explainer",
    "OptimalExplainer",
    "QuadraticModel",
    "RngStream",
    "ShapleyExplainer",
    "SmoothedExplainer",
    "ToyFunction",
    "UniformBoxKernel",
    "derive_stream",
    "infidelity",
    "linear_model",
    "load_model",
    "sens_max",
]
