"""Latent-space adaptation toolkit for toy diffusion transformers.

Train a flow-matching diffusion transformer in one autoencoder latent space,
then migrate it to a more aggressively compressed space with three stages:
patch-embedder alignment, output-head alignment, and LoRA fine-tuning. A
corrected training objective keeps guidance-distilled models trainable with
plain flow targets. Everything runs on a self-contained numpy autodiff stack
with counter-based RNG so runs, resumes, and checkpoints are bitwise
reproducible.
"""

from .errors import (
    ConfigError,
    ContractViolation,
    DcgenError,
    FormatError,
    InputError,
    NumericError,
    ParseError,
    StateError,
    TrainingError,
    VersionError,
)
from .rng import Rng
from .tensor import Tensor, eval_with_grad
from .optim import AdamW, EmaState, OptimizerState, adamw_step, ema_update

__version__ = "0.1.0"
