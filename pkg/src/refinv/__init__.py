"""Training-free conditional image generation by referee-model inversion with
augmentation smoothing, balanced against a diffusion fidelity prior."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    LatentState, PixelDecoder, Prompt, RunRecord, ScheduleConfig, decode, init_latent,
)
from .augment import AugmentationSpec, regularized_loss, sample_transform  # noqa: F401
from .engine import run_inversion  # noqa: F401
from .errors import RefinvError  # noqa: F401
