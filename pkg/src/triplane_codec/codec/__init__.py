from .binmodel import (
    GaussianBinModels,
    IntegerBinModel,
    decode_symbols,
    discretize_bin_model,
    discretize_probabilities,
    encode_symbols,
)
from .container import SceneStats, compress_scene, decompress_scene, read_stats
from ..gaussian import normal_cdf

__all__ = [
    "GaussianBinModels",
    "IntegerBinModel",
    "SceneStats",
    "compress_scene",
    "decode_symbols",
    "decompress_scene",
    "discretize_bin_model",
    "discretize_probabilities",
    "encode_symbols",
    "normal_cdf",
    "read_stats",
]
