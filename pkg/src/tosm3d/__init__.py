"""2.5D (tri-orthogonal) score-based priors for sparse-view CT and undersampled MRI.

A 2D noise-conditioned score network trained on transaxial slices is applied
along all three orthogonal slice directions; the weighted sum approximates the
3D score and drives an annealed Langevin sampler interleaved with a data
consistency step (SIRT for CT, k-space replacement for MRI).
"""
__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig
from .metrics import evaluate, histogram_similarity, nps, psnr, rmse, ssim
from .mri import KSpaceData, MaskSpec, make_mask, undersample, zero_filled
from .projector import Geometry, GeometryError, Sinogram, back_project, fbp_reconstruct, forward_project
from .score import GaussianScore, GMMScore, LearnedScore, TrainConfig, dsm_train, load_model, make_schedule, save_model
from .sirt import SirtConfig, sirt_solve
from .tosm import SamplerConfig, ablation_config, combined_score_3d, reconstruct_ct, reconstruct_mri
from .volume import PhantomSpec, SpecificationError, Volume3D, make_phantom

__all__ = [
    "ConfigError", "ExperimentConfig", "evaluate", "histogram_similarity", "nps", "psnr", "rmse", "ssim",
    "KSpaceData", "MaskSpec", "make_mask", "undersample", "zero_filled", "Geometry", "GeometryError",
    "Sinogram", "back_project", "fbp_reconstruct", "forward_project", "GaussianScore", "GMMScore",
    "LearnedScore", "TrainConfig", "dsm_train", "load_model", "make_schedule", "save_model", "SirtConfig",
    "sirt_solve", "SamplerConfig", "ablation_config", "combined_score_3d", "reconstruct_ct",
    "reconstruct_mri", "PhantomSpec", "SpecificationError", "Volume3D", "make_phantom",
]
