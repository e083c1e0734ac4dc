"""Scale-aware text recognition at desk scale.

A multi-scale shared-backbone CNN encoder with per-location scale
attention, a 2-d spatial-attention LSTM character decoder, a from-scratch
reverse-mode autodiff core, a procedural synthetic text generator, and an
Adadelta training/evaluation/ablation harness, all behind one CLI.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward
from .decoder import Charset, Lexicon
from .encoder import PyramidSpec
from .model import Recognizer
from .synth import GenSpec, LabeledSample, generate_dataset
from .training import Adadelta, TrainConfig, evaluate, train

__all__ = [
    "Tape", "Tensor", "backward", "Charset", "Lexicon", "PyramidSpec",
    "Recognizer", "GenSpec", "LabeledSample", "generate_dataset",
    "Adadelta", "TrainConfig", "evaluate", "train", "__version__",
]
