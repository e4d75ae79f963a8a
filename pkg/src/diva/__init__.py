"""Multi-task deep metric learning with decorrelated embedding heads, on a numpy autodiff tape."""

from .autodiff import ContractError, DegenerateVectorError, DimensionError, Tape
from .data import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .evaluate import EvalReport, evaluate, nmi, recall_at_k, spectral_decay
from .model import EncoderConfig, ModelState, init_model
from .objectives import LossWeights
from .trainer import TrainConfig, Trainer, fit

__version__ = "0.1.0"
