"""Lightweight condition adaptors (LiLAC) and a ControlNet baseline for a frozen EDM 1-D U-Net.

Modules:

* ``numerics``   conv / norm primitives, AdamW, LR schedule, finite-difference checks
* ``backbone``   preconditioned U-Net denoiser, Karras schedule, Heun sampler
* ``adaptors``   ControlNet clone and LiLAC head/tail/residual branches
* ``conditions`` chromagrams, thresholded chroma, chord encodings, resampling, cMSE
* ``data``       synthetic multitrack songs and the invertible latent codec
* ``trainer``    EDM loss, condition dropout, guidance, training loops
* ``evaluation`` adherence / conflict studies and parameter census
* ``checkpoint`` binary tensor container
"""

from .adaptors import VARIANTS, AdaptorBranch, AdaptorVariant, build_adaptor, controlled_denoise, count_params
from .backbone import Backbone, BackboneConfig, Conditions, build_backbone, heun_sampler, karras_sigmas, sample
from .conditions import ChordEvent, ChordSequence, Chromagram, ConditionMap, cmse, encode_chords, threshold_chroma
from .data import DataConfig, LatentCodec, SyntheticSample, generate_dataset
from .numerics import ConfigError, ContractError, DimensionError, NonFiniteError
from .trainer import TrainConfig, train_adaptor, train_backbone

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "AdaptorBranch", "AdaptorVariant", "build_adaptor", "controlled_denoise", "count_params",
    "Backbone", "BackboneConfig", "Conditions", "build_backbone", "heun_sampler", "karras_sigmas", "sample",
    "ChordEvent", "ChordSequence", "Chromagram", "ConditionMap", "cmse", "encode_chords", "threshold_chroma",
    "DataConfig", "LatentCodec", "SyntheticSample", "generate_dataset",
    "ConfigError", "ContractError", "DimensionError", "NonFiniteError",
    "TrainConfig", "train_adaptor", "train_backbone",
]
