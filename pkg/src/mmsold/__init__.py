"""Training-free generative sampling with moment-matched particles.

An interacting particle system evolves under a Monte Carlo smoothed mixture
score while its empirical mean and covariance stay pinned to the training
moments at every iteration, via a centered, scaled Stiefel-type constraint
on the whitened particle matrix.  The package bundles the sampler, its score
estimators (full and nearest-neighbor), the exponential-tilting analysis of
its limiting target, baseline samplers, evaluation metrics, synthetic 2D
datasets, and a CLI.
"""

from . import errors
from .baselines import (KineticLangevinBAOAB, SigmaCFDM, TimeIndexedGMM,
                        time_indexed_score)
from .datasets import (Dataset2DSpec, PartialWhitening, generate_2d, load_csv,
                       load_matrix, partial_whiten, save_csv)
from .gmm import (SmoothingConfig, TrainingSet, log_density, score,
                  score_batch, smoothed_potential, smoothed_score)
from .manifold import (WhiteningMap, is_on_manifold, manifold_residuals,
                       project_tangent, retract)
from .metrics import MetricReport, dup_rate, kid_poly, recall_knn, sliced_w2
from .nn_score import (LocalSubset, NeighborIndex, build_index,
                       corrected_sums, nn_smoothed_score, select_local_subset)
from .numerics import cholesky_spd, lyapunov_solve, reduced_qr_signfix, sym_eig
from .rng import SubstreamKey
from .sampler import MMSOLD, ParticleState, init_particles, run, step
from .tilting import (EnergyModel, GridDensity2D, GridSpec,
                      MinimumEnergyClassifier, TiltingParams, build_energy_model,
                      calibrate_biases, ecm_classify, estimate_tilting,
                      grid_density_2d, solve_tilting_selfconsistent_2d,
                      tilting_from_scores)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "KineticLangevinBAOAB", "SigmaCFDM", "TimeIndexedGMM", "time_indexed_score",
    "Dataset2DSpec", "PartialWhitening", "generate_2d", "load_csv",
    "load_matrix", "partial_whiten", "save_csv",
    "SmoothingConfig", "TrainingSet", "log_density", "score", "score_batch",
    "smoothed_potential", "smoothed_score",
    "WhiteningMap", "is_on_manifold", "manifold_residuals", "project_tangent",
    "retract",
    "MetricReport", "dup_rate", "kid_poly", "recall_knn", "sliced_w2",
    "LocalSubset", "NeighborIndex", "build_index", "corrected_sums",
    "nn_smoothed_score", "select_local_subset",
    "cholesky_spd", "lyapunov_solve", "reduced_qr_signfix", "sym_eig",
    "SubstreamKey",
    "MMSOLD", "ParticleState", "init_particles", "run", "step",
    "EnergyModel", "GridDensity2D", "GridSpec", "MinimumEnergyClassifier",
    "TiltingParams", "build_energy_model", "calibrate_biases", "ecm_classify",
    "estimate_tilting", "grid_density_2d", "solve_tilting_selfconsistent_2d",
    "tilting_from_scores",
    "__version__",
]
