"""A cross-encoder re-ranker whose depth and per-layer sequence width are
configurable at inference time, trained with cascaded self-distillation and
post-trained with factorized low-rank compensation, evaluated on a synthetic
retrieval benchmark with cost-versus-precision sweeps."""

from .model import (
    DOC_TOKEN,
    QRY_TOKEN,
    SCORE_TOKEN,
    LayerState,
    ModelConfig,
    RankerInput,
    RerankerModel,
    load_checkpoint,
    params_checksum,
    render_input,
    save_checkpoint,
)
from .shapes import (
    CompressionPlan,
    FlopsReport,
    ShapeConfig,
    ShapeSpec,
    compress_layer,
    flops_estimate,
    full_shape,
    parse_shape_file,
    plan_compression,
    validate_config,
)
from .tensor import GradTape, Tensor, no_grad

__all__ = [
    "Tensor", "GradTape", "no_grad",
    "ModelConfig", "RankerInput", "LayerState", "RerankerModel",
    "render_input", "save_checkpoint", "load_checkpoint", "params_checksum",
    "QRY_TOKEN", "DOC_TOKEN", "SCORE_TOKEN",
    "ShapeConfig", "ShapeSpec", "CompressionPlan", "FlopsReport",
    "validate_config", "plan_compression", "compress_layer",
    "flops_estimate", "full_shape", "parse_shape_file",
]
