"""Self-supervised audio representation learning on mel spectrograms.

Pretraining predicts latent features of masked spectrogram regions from a
visible context, with a curriculum that anneals from random block masking
to time-frequency aware masking; fine-tuning regularizes attention by
excluding a random token subset as keys.
"""

__version__ = "0.1.0"

from .errors import AjepaError
from .maskgen import CurriculumSchedule, MaskIndexSet, MaskPlan, SamplerConfig, build_mask_plan
from .model import Encoder, ModelConfig, Predictor
from .pretrain import OptimizerConfig, PretrainSetup, TrainState, pretrain_loop
from .spectro import FrontendConfig, MelSpectrogram, PatchGrid, Waveform

__all__ = [
    "AjepaError",
    "CurriculumSchedule",
    "Encoder",
    "FrontendConfig",
    "MaskIndexSet",
    "MaskPlan",
    "MelSpectrogram",
    "ModelConfig",
    "OptimizerConfig",
    "PatchGrid",
    "Predictor",
    "PretrainSetup",
    "SamplerConfig",
    "TrainState",
    "Waveform",
    "build_mask_plan",
    "pretrain_loop",
]
