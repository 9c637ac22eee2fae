"""SL-YOLO small-object detector toolkit.

Model assembly for the PAN/BiFPN/HEPAN + P2 + C2fDCB + SCDown design space,
analytical complexity auditing, deploy-time re-parameterization, VisDrone-format
data handling, COCO-style evaluation, and desk-scale training.
"""

from .blocks import LayerSpec, TensorSpec
from .complexity import (
    ComplexityReport,
    audit_model,
    flops_dsconv,
    flops_standard_conv,
    params_dsconv,
    params_standard_conv,
)
from .model import (
    DetectionModel,
    ModelConfig,
    RawPrediction,
    build_model,
    fuse_model,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ComplexityReport",
    "DetectionModel",
    "LayerSpec",
    "ModelConfig",
    "RawPrediction",
    "TensorSpec",
    "audit_model",
    "build_model",
    "flops_dsconv",
    "flops_standard_conv",
    "fuse_model",
    "load_checkpoint",
    "params_dsconv",
    "params_standard_conv",
    "save_checkpoint",
    "__version__",
]
