"""Transformer text classification with attention-output mixup (AMPLIFY) and baseline mixup strategies."""

from .autograd import Parameter, Tensor
from .config import TrainConfig, build_config
from .data import Batch, Example, NoiseSpec, SyntheticSpec, Vocab
from .mixup import MixPlan, StrategyConfig
from .model import HookSite, ModelConfig, TransformerClassifier

__version__ = "0.1.0"
