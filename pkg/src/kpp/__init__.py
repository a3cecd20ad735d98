"""Block-allocated latent-memory generative model, desk scale."""

from . import backend
from .autodiff import GraphError, NonFiniteError, Tensor
from .data import Dataset, EpisodeSampler, binarize, inject_noise, load_idx, synth_shapes
from .distributions import (
    DiagGaussian,
    bernoulli_log_prob,
    gaussian_log_prob,
    kl_diag_gaussians,
    kl_to_standard_normal,
    reparam_sample,
)
from .nets import Episode, Memory, MemoryVAE, ModelConfig, load_checkpoint, save_checkpoint
from .objective import ElboBreakdown, denoise, elbo, elbo_graph, generate, iterative_read, perturbed_generate
from .stn import KeyTriple, TraceSet, affine_grid, bilinear_sample, read_traces
from .trainer import DivergenceError, MetricsRow, TrainConfig, adam_step, eval_conditional, lr_at, train

__version__ = "0.1.0"
