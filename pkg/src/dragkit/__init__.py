"""dragkit: point-drag image editing over a toy deterministic diffusion
backend with analytically differentiable features."""

from .engine import DragConfig, mean_distance, run_drag_edit
from .softmask import PointPair, SoftMask, generate_soft_mask

__all__ = [
    "DragConfig",
    "PointPair",
    "SoftMask",
    "generate_soft_mask",
    "mean_distance",
    "run_drag_edit",
]

__version__ = "0.1.0"
