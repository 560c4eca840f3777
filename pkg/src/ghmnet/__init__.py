"""Generative hierarchical models, exact tree inference and their ReLU network realizations."""

__version__ = "0.1.0"

from .bp import bp_classify, bp_denoise
from .diffusion import DiffusionConfig, denoiser_at, eval_recovery, sample_sde
from .errors import (
    ConfigurationError, DivergenceError, EnumerationLimitError, GhmError, InvalidNoiseError,
    InvalidParamsError, InvalidSampleError, InvalidTopologyError, NoSiblingsError, NumericError,
)
from .ghm import GhmParams, Sample, copy_chain_params, corrupt, generate_params, load_tables, sample, save_tables
from .mp import amp_run, exact_fns, log_evidence, mp_classify, mp_denoise, normalize
from .nets import NetWeights, construct_classifier, construct_denoiser, convnet_forward, random_init, unet_forward
from .topology import TreeTopology, build
from .train import TrainConfig, d2_classify, d2_denoise, fit, gradient

__all__ = [
    "bp_classify", "bp_denoise", "DiffusionConfig", "denoiser_at", "eval_recovery",
    "sample_sde", "ConfigurationError", "DivergenceError", "EnumerationLimitError", "GhmError",
    "InvalidNoiseError", "InvalidParamsError", "InvalidSampleError", "InvalidTopologyError",
    "NoSiblingsError", "NumericError", "GhmParams", "Sample", "copy_chain_params", "corrupt",
    "generate_params", "load_tables", "sample", "save_tables", "amp_run", "exact_fns",
    "log_evidence", "mp_classify", "mp_denoise", "normalize", "NetWeights",
    "construct_classifier", "construct_denoiser", "convnet_forward", "random_init",
    "unet_forward", "TreeTopology", "build", "TrainConfig", "d2_classify", "d2_denoise", "fit",
    "gradient",
]
