"""Direct convolution on VLEN-blocked layouts with kernel-stream execution plans."""

from .config import DEFAULT_CONFIG, EngineConfig
from .errors import (
    ChainShapeMismatch, ConvError, EmptyTrace, InfeasibleStrategy, InvalidDescriptor, NonIntegralShape,
    OverflowRisk, ParseError, PlanInfeasible, PlanTensorMismatch, ShapeMismatch,
)
from .layers import RESNET50, parse_layer_file, resnet50_layer, resnet50_layers
from .tensors import (
    BlockedActivation, BlockedWeight, ConvLayerSpec, ErrorNorms, derive_output_shape, error_norms,
    from_blocked_activation, from_blocked_weight, to_blocked_activation, to_blocked_weight,
)

__version__ = "0.1.0"
