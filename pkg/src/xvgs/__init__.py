"""Cross-view 3D Gaussian splatting with per-group densification.

Modules: ``scene`` (primitives, cameras, voxels, checkpoints), ``render``
(tiled forward/backward rasterizer), ``losses``, ``adc`` (density control),
``pipeline`` (training stages, evaluation), ``datagen`` (synthetic data and
dataset I/O), ``experiment`` and ``cli``.
"""

from .adc import DensifyMode, DensifyPolicy
from .losses import LossWeights
from .pipeline import PipelineConfig
from .render import render, render_backward
from .scene import Camera, Gaussian3D, GaussianModel, load_model, save_model

__all__ = ["Camera", "DensifyMode", "DensifyPolicy", "Gaussian3D", "GaussianModel",
           "LossWeights", "PipelineConfig", "load_model", "render", "render_backward",
           "save_model"]
__version__ = "0.1.0"
