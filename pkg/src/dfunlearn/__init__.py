"""Data-free class unlearning: a generator synthesizes inputs, a student is
distilled from the original model, and forgetting classes are suppressed both
in synthesis and in the distillation targets."""

from .checkpoint import Checkpoint, load, save
from .data import BlobSpec, Dataset, load_idx, make_blobs, restrict
from .engine import METHODS, SupervisedConfig, TrainConfig, retrain_gold, run_unlearning, train_teacher
from .errors import (ConfigError, ContractError, DegenerateRowError, DimensionError, FormatError,
                     TrainingError, UndefinedMetricError)
from .losses import LabelSplit
from .models import ClassifierSpec, GeneratorSpec

__version__ = "0.1.0"
