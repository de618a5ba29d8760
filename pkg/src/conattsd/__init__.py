"""Multimodal sarcasm detection with sequential context encoding and contrastive attention."""

from .autodiff import Tensor, grad, precision
from .data import Conversation, FeatureDataset, SyntheticConfig, Utterance, generate_synthetic, load_dataset, save_dataset
from .errors import ConAttSDError
from .metrics import MetricReport, compute_metrics
from .model import ModelConfig, configure_variant, forward, init_parameters, predict
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
