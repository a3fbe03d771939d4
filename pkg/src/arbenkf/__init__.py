"""Adaptive reduced-basis multilevel and multifidelity ensemble Kalman filters.

Modules
-------
fem       P1 finite elements on the unit square.
qge       Full-order quasi-geostrophic model.
priors    Initial-ensemble samplers.
rom       POD, reduced Galerkin model, inflation and deflation.
filters   EnKF, ML-EnKF and MF-EnKF analysis and prediction.
harness   Twin experiments, result files and the snapshot store.
"""

from .fem import FemOperators, Mesh, apply_trilinear, assemble_operators, build_mesh, observe, v_inner, v_norm
from .filters import EnsembleSet, HierarchicalEnKF, LevelConfig, LevelEnsembles
from .harness import ExperimentConfig
from .qge import NonConvergence, QgeParams, Trajectory, flow, solve_stationary, step_implicit_midpoint
from .rom import POD, ReducedSpace, deflate, inflate, pod

__version__ = "0.1.0"

__all__ = [
    "FemOperators",
    "Mesh",
    "apply_trilinear",
    "assemble_operators",
    "build_mesh",
    "observe",
    "v_inner",
    "v_norm",
    "EnsembleSet",
    "HierarchicalEnKF",
    "LevelConfig",
    "LevelEnsembles",
    "ExperimentConfig",
    "NonConvergence",
    "QgeParams",
    "Trajectory",
    "flow",
    "solve_stationary",
    "step_implicit_midpoint",
    "POD",
    "ReducedSpace",
    "deflate",
    "inflate",
    "pod",
]
