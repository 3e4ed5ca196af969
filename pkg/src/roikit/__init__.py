"""roikit: explicit region-of-interest instance control at desk scale.

Crop-and-paste ROI kernels (align + unpool) with exact sub-pixel handling,
attention-based caption injection, learnable blending, a trainable toy
denoiser, a rule-based evaluator, and a compute-cost benchmark.
"""
from .precision import precision, precision_name, set_precision
from .roi_ops import RoiBox, RoiBoxBatch, quantized_mask, roi_align, roi_unpool
from .tensor import Tensor

__all__ = [
    "RoiBox", "RoiBoxBatch", "Tensor",
    "precision", "precision_name", "set_precision",
    "quantized_mask", "roi_align", "roi_unpool",
]
__version__ = "0.1.0"
