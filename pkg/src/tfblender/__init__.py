"""Temporal feature blending for video feature maps, in plain numpy.

The package holds a small tensor core with reverse-mode differentiation,
the blend pipeline (temporal relation, feature adjustment, feature blender),
a synthetic moving-blob task to train it on, and an experiment harness with
a command-line front end.
"""

from .blender import (
    BlenderConfig,
    ConfigError,
    FrameFeature,
    MiniNetParams,
    Neighborhood,
    RelationVariant,
    StreamingBlender,
    adaptive_weights,
    aggregate,
    baseline_aggregate,
    blend,
    blend_trace,
    feature_adjustment,
    load_params,
    mini_network_forward,
    relation_features,
    save_params,
)
from .synthetic import SceneSpec, SequencePair, generate_sequence, reconstruction_error
from .tensor import (
    ConvLayer,
    ShapeMismatchError,
    Tensor3,
    UndefinedSimilarityError,
    channel_softmax,
    conv2d_same,
    cosine_similarity,
    elementwise,
    read_tfb,
    relu,
    write_tfb,
)

__version__ = "0.1.0"

__all__ = [
    "BlenderConfig", "ConfigError", "FrameFeature", "MiniNetParams", "Neighborhood",
    "RelationVariant", "StreamingBlender", "adaptive_weights", "aggregate",
    "baseline_aggregate", "blend", "blend_trace", "feature_adjustment", "load_params",
    "mini_network_forward", "relation_features", "save_params", "SceneSpec", "SequencePair",
    "generate_sequence", "reconstruction_error", "ConvLayer", "ShapeMismatchError", "Tensor3",
    "UndefinedSimilarityError", "channel_softmax", "conv2d_same", "cosine_similarity",
    "elementwise", "read_tfb", "relu", "write_tfb",
]
