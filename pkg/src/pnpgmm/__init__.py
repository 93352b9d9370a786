"""Plug-and-play ADMM with a scene-adapted, frozen-weight GMM patch denoiser."""

from .denoiser import (DenoiserReport, FixedWeightPlan, apply_fixed, denoise_mmse,
                       dense_operator, freeze_weights, prox_defect, scalar_mmse_map,
                       spectrum_report)
from .gmm import EMOptions, GMMModel, load_gmm, log_likelihood, responsibilities, save_gmm, train_em
from .metrics import MetricReport, evaluate
from .patches import (PatchGeometry, PatchSet, aggregate_patches, build_partition,
                      extract_patches)
from .sharpening import DegradationModel, SolverParams, learn_subspace, solve

__version__ = "0.1.0"
