"""Fine-grained dual-encoder alignment at desk scale.

Dense region features, five alignment objectives with hand-written
gradients, a simulated data-parallel harness and region/retrieval metrics,
all in float64 NumPy.
"""

from .encoder import EncoderConfig, init_params, load_checkpoint, save_checkpoint, select_resolution_bucket
from .losses import LossWeights, MarginState, SigmoidLossParams, total_loss
from .synthdata import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .trainer import TrainConfig, run_stage

__all__ = [
    "CorpusConfig",
    "EncoderConfig",
    "LossWeights",
    "MarginState",
    "SigmoidLossParams",
    "TrainConfig",
    "generate_corpus",
    "init_params",
    "load_checkpoint",
    "load_corpus",
    "run_stage",
    "save_checkpoint",
    "save_corpus",
    "select_resolution_bucket",
    "total_loss",
]

__version__ = "0.1.0"
