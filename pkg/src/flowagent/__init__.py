"""Spectral 2D flow simulation, perturbative ensembles and a critic-gated reasoning agent."""

__version__ = "0.1.0"

from .fields import FlowState, GridSpec, ScalarField, VectorField  # noqa: E402
from .simulator import SimulatorConfig, ensemble_rollout, ensemble_spread  # noqa: E402

__all__ = ["FlowState", "GridSpec", "ScalarField", "VectorField", "SimulatorConfig", "ensemble_rollout",
           "ensemble_spread", "__version__"]
