"""Desk-scale testbed for text-guided satellite image editing.

Covers two denoiser families (conv U-Net, patch-token transformer) under
five source-image conditioning layouts, a windowed transformer variant,
conditional diffusion training with dual classifier-free guidance, and
change-aware F1 evaluation on a synthetic editing corpus.
"""

__version__ = "0.1.0"

from .tensor import Tensor, GradTape, backward, no_grad
from .conditioning import ConditioningLayout
from .denoisers import BlockConfig, build_dit, build_ditplus, build_unet
from .diffusion import GuidanceConfig, make_schedule, q_sample
from .config import RunConfig

__all__ = [
    "Tensor", "GradTape", "backward", "no_grad", "ConditioningLayout",
    "BlockConfig", "build_dit", "build_ditplus", "build_unet",
    "GuidanceConfig", "make_schedule", "q_sample", "RunConfig", "__version__",
]
