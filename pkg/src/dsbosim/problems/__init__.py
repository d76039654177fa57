"""Benchmark bilevel problem instances and gradient oracles."""

from .base import BilevelProblem, NoiseModel, measure_dissimilarity, sample_grad_f, sample_grad_g
from .logistic import (
    AgentDataset,
    LogisticHyperoptInstance,
    export_datasets_csv,
    generate_logistic_data,
)
from .quadratic import REPORTED_REFERENCE_TRIPLE, QuadraticToyInstance, toy_reference_solution

__all__ = [
    "BilevelProblem",
    "NoiseModel",
    "measure_dissimilarity",
    "sample_grad_f",
    "sample_grad_g",
    "QuadraticToyInstance",
    "toy_reference_solution",
    "REPORTED_REFERENCE_TRIPLE",
    "LogisticHyperoptInstance",
    "AgentDataset",
    "generate_logistic_data",
    "export_datasets_csv",
]
