"""Triple-consistent diffusion sampling for small-scale inverse problems."""

from .autodiff import Tensor, check_gradient, gradient
from .diffusion import (TrainBatch, dsm_loss, forward_diffuse, pf_ode_denoise, resample,
                        ddpm_reverse_step, score_form_reverse_step, train_score_model,
                        tweedie_denoise)
from .metrics import MetricReport, psnr, residual_norm, ssim
from .models import GMMScoreOracle, ScoreMLP, load_gmm_prior
from .operators import (ProblemInstance, blur, box_mask, downsample, dynamic_range_clip,
                        fourier_mask, phase_retrieval, random_mask, synthesize_measurements)
from .samplers import (DDPMSampler, DPSResampleSampler, DPSSampler, NoBackwardSampler,
                       OdeTripleConsistentSampler, RunResult, TripleConsistentSampler,
                       adam_step, consistency_objective, inner_optimize, make_sampler)
from .schedule import NoiseSchedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "Tensor", "check_gradient", "gradient",
    "NoiseSchedule", "make_schedule",
    "TrainBatch", "forward_diffuse", "tweedie_denoise", "ddpm_reverse_step",
    "score_form_reverse_step", "resample", "pf_ode_denoise", "dsm_loss",
    "train_score_model",
    "ScoreMLP", "GMMScoreOracle", "load_gmm_prior",
    "ProblemInstance", "synthesize_measurements", "box_mask", "random_mask", "blur",
    "downsample", "fourier_mask", "phase_retrieval", "dynamic_range_clip",
    "TripleConsistentSampler", "OdeTripleConsistentSampler", "NoBackwardSampler",
    "DPSSampler", "DPSResampleSampler", "DDPMSampler", "RunResult",
    "adam_step", "consistency_objective", "inner_optimize", "make_sampler",
    "MetricReport", "psnr", "ssim", "residual_norm",
]
