"""Anchor-cloud compression with a tri-plane context model and a range coder.

Anchors (position, feature, scaling, offsets) are quantized and entropy coded
under Gaussians predicted from a learned tri-plane grid sampled at each
anchor and its nearest neighbours. The grid is stored through a small
convolutional autoencoder; learned masks prune anchors and offsets.
"""

from .anchors import (
    AnchorCloud,
    load_anchor_cloud,
    save_anchor_cloud,
    synth_correlated_cloud,
    synth_iid_cloud,
    synth_noisy_offsets_cloud,
)
from .codec import SceneStats, compress_scene, decompress_scene, read_stats
from .context import DistributionModel, KnnIndex, QuantConfig, build_knn_index, quantize_eval
from .errors import (
    CodecError,
    CorruptionError,
    FormatError,
    SymbolRangeError,
    TrainingError,
    TruncatedError,
    ValidationError,
)
from .masking import MaskParams, apply_masks
from .trainer import TrainConfig, TrainState, codelength_comparison, fit, load_checkpoint, save_checkpoint
from .triplane import ContractParams, PlaneAutoencoder, TriPlaneGrid, contract, sample_triplane
from .wavelet import WaveletSchedule, dwt2, idwt2, wavelet_loss

__version__ = "0.1.0"

__all__ = [
    "AnchorCloud",
    "CodecError",
    "ContractParams",
    "CorruptionError",
    "DistributionModel",
    "FormatError",
    "KnnIndex",
    "MaskParams",
    "PlaneAutoencoder",
    "QuantConfig",
    "SceneStats",
    "SymbolRangeError",
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "TriPlaneGrid",
    "TruncatedError",
    "ValidationError",
    "WaveletSchedule",
    "apply_masks",
    "build_knn_index",
    "codelength_comparison",
    "compress_scene",
    "contract",
    "decompress_scene",
    "dwt2",
    "fit",
    "idwt2",
    "load_anchor_cloud",
    "load_checkpoint",
    "quantize_eval",
    "read_stats",
    "sample_triplane",
    "save_anchor_cloud",
    "save_checkpoint",
    "synth_correlated_cloud",
    "synth_iid_cloud",
    "synth_noisy_offsets_cloud",
    "wavelet_loss",
]
