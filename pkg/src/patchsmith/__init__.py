"""Naturalistic adversarial patches sampled from a diffusion model.

The attack optimizes a clean latent; each step re-noises it, runs a short
deterministic DDIM chain back to a clean estimate, decodes it and pastes
the patch onto person boxes in training scenes. The objective is the
detector's strongest person confidence plus a total-variation penalty.
"""

from .diffusion import (
    LatentState,
    NoiseSchedule,
    SamplerConfig,
    aps_sample,
    build_schedule,
    cfg_predict,
    ddim_step,
    ddpm_sample,
    forward_diffuse,
)
from .errors import (
    ConfigError,
    MissingAssetError,
    NumericError,
    ReferenceMismatchError,
    ShapeMismatchError,
)
from .evaluation import (
    EvalReport,
    average_precision,
    cross_model_matrix,
    embedding_similarity,
    evaluate_map,
    generate_reference_labels,
    random_noise_patch,
)
from .generator import ConditionRef, IdentityCodec, adapt_pretrained_generator, make_pointmass_oracle
from .objective import AttackStack, Detection, LossBreakdown, batch_objective, detector_loss, tv_loss
from .optimize import OptimizeConfig, OptimizeTrace, init_patch, optimize_patch, resample_patch
from .render import BoundingBox, PlacementPolicy, SceneSample, TransformRanges, place_patch, render_scene
from .sweeps import SweepGrid, sweep_noise_step

__version__ = "0.1.0"

__all__ = [
    "AttackStack",
    "BoundingBox",
    "ConditionRef",
    "ConfigError",
    "Detection",
    "EvalReport",
    "IdentityCodec",
    "LatentState",
    "LossBreakdown",
    "MissingAssetError",
    "NoiseSchedule",
    "NumericError",
    "OptimizeConfig",
    "OptimizeTrace",
    "PlacementPolicy",
    "ReferenceMismatchError",
    "SamplerConfig",
    "SceneSample",
    "ShapeMismatchError",
    "SweepGrid",
    "TransformRanges",
    "adapt_pretrained_generator",
    "aps_sample",
    "average_precision",
    "batch_objective",
    "build_schedule",
    "cfg_predict",
    "cross_model_matrix",
    "ddim_step",
    "ddpm_sample",
    "detector_loss",
    "embedding_similarity",
    "evaluate_map",
    "forward_diffuse",
    "generate_reference_labels",
    "init_patch",
    "make_pointmass_oracle",
    "optimize_patch",
    "place_patch",
    "random_noise_patch",
    "render_scene",
    "resample_patch",
    "sweep_noise_step",
    "tv_loss",
]
