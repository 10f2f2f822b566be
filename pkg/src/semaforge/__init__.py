"""semaforge: manipulated-face detection from semantic face fragments.

Pipeline: 81-point landmarks -> six region fragments -> per-fragment
attention-gated classifiers -> learned fragment weights -> fused verdict.
Ships with a procedural face generator, four manipulation families, and an
experiment harness (evaluation, leave-one-family-out, ablations).
"""

__version__ = "0.1.0"

from .config import DatasetConfig, ModelConfig, RunConfig, TrainConfig  # noqa: F401
from .model import DetectorModel, Prediction  # noqa: F401
from .segmentation import FRAGMENTS, segment_image  # noqa: F401
from .synthetic import (DatasetManifest, FaceParams, ManipulationFamily,  # noqa: F401
                        apply_manipulation, generate_dataset, generate_face)
from .tensor import Tensor, backward, gradient_check, no_grad  # noqa: F401
