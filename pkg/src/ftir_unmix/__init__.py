"""Weighted spectral-angle autoencoder unmixing for FTIR hyperspectral cubes."""

from .bandweights import BandWeights, WeightConfig, estimate_band_weights
from .cube_io import HyperCube, WavenumberAxis, read_cube, write_cube
from .errors import DataError, NumericalError, UnmixError
from .evaluation import abundance_rmse, match_endmembers, weight_detection_report
from .losses import sad, wsad
from .model import ModelConfig, ModelParams, decode, encode, endmembers, init_params
from .synthgen import ArtifactSpec, SynthSpec, default_artifacts, make_scene
from .training import TrainConfig, infer_abundances, train

__version__ = "0.1.0"

__all__ = [
    "ArtifactSpec", "BandWeights", "DataError", "HyperCube", "ModelConfig", "ModelParams",
    "NumericalError", "SynthSpec", "TrainConfig", "UnmixError", "WavenumberAxis",
    "WeightConfig", "abundance_rmse", "decode", "default_artifacts", "encode", "endmembers",
    "estimate_band_weights", "infer_abundances", "init_params", "make_scene",
    "match_endmembers", "read_cube", "sad", "train", "weight_detection_report", "wsad",
    "write_cube",
]
