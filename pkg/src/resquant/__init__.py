"""Residual expansion post-training quantization with certified error bounds."""
from .bounds import (
    BoundReport,
    ensemble_bound,
    main_text_bound,
    network_bound,
    sparse_weight_bound,
    weight_bound,
)
from .container import load_model, save_model
from .ensemble import (
    EnsembleNetwork,
    Grouping,
    build_ensemble,
    candidate_groupings,
    ensemble_forward,
    select_grouping,
)
from .errors import (
    BlobShapeError,
    ContainerError,
    ConvergenceError,
    FormatVersionError,
    InvariantError,
    MissingBlobError,
    ShapeError,
    StructureError,
    UnknownLayerError,
)
from .headcount import CostReport, LayerCost, bops_expanded, bops_network, bops_original
from .model import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Network,
    fold_batch_norm,
    forward,
    logits_max_error,
    spectral_norm,
)
from .pipeline import RunConfig, run_pipeline
from .quantizer import (
    QuantConfig,
    ResidualExpansion,
    StructuredMask,
    compute_scales,
    dequantize,
    expand,
    expand_network,
    expanded_network,
    fuse_kernels,
    make_structured_mask,
    quantize,
)

__version__ = "0.1.0"
