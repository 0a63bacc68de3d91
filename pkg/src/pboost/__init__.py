"""Parallel booster for coarse narrow-band DOA estimation.

Library modules:

* :mod:`pboost.array_model` geometry, noise, codebook and snapshot synthesis
* :mod:`pboost.subspace` covariance, whitening and subspace split
* :mod:`pboost.core` the three-step booster
* :mod:`pboost.baselines` MUSIC, OMP, FOCUSS/MAP-SBS and a robust MV beamformer
* :mod:`pboost.detection` peak picking and AIC validation
* :mod:`pboost.evaluation` pairing, metrics and the Monte-Carlo driver
"""

from .array_model import (ArrayGeometry, NoiseModel, Scenario, SnapshotBatch, SteeringCodebook,
                          build_codebook, fixed_scenario, generate_matern_scenario, synthesize_snapshots,
                          uniform_grid)
from .core import PBoostConfig, run_pboost
from .subspace import subspace_from_snapshots, whiten_and_eig

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry",
    "NoiseModel",
    "Scenario",
    "SnapshotBatch",
    "SteeringCodebook",
    "build_codebook",
    "fixed_scenario",
    "generate_matern_scenario",
    "synthesize_snapshots",
    "uniform_grid",
    "PBoostConfig",
    "run_pboost",
    "subspace_from_snapshots",
    "whiten_and_eig",
]
