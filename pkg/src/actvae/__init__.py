"""Action-conditional temporal VAE for 2-D pose sequences.

The model alternates a recurrent encoder, which emits a diagonal Gaussian
over the next latent given the previous pose, the action label and the
previous latent, with a recurrent decoder that turns the sampled latent
into the next pose.  Training and sampling share the same free-running
rollout.
"""
__version__ = "0.1.0"

from .core import DiagonalGaussian, Rng, kl_to_standard_normal, sample_gaussian
from .model import ABLATIONS, ACTVAE, LAMBDA_DIS, LAMBDA_DIV, ModelConfig, RolloutTrace, vae_loss
from .recurrent import backend, set_backend
from .training import Checkpoint, Hyper, load_checkpoint, save_checkpoint, train
from .metrics import MetricReport, diversity_std, l2_best_of_k

__all__ = [
    "__version__", "Rng", "DiagonalGaussian", "kl_to_standard_normal", "sample_gaussian",
    "ABLATIONS", "ACTVAE", "LAMBDA_DIS", "LAMBDA_DIV", "ModelConfig", "RolloutTrace", "vae_loss",
    "backend", "set_backend", "Checkpoint", "Hyper", "load_checkpoint", "save_checkpoint",
    "train", "MetricReport", "diversity_std", "l2_best_of_k",
]
