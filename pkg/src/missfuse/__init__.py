"""Classification under arbitrary modality missingness.

Prototype-anchored cross-modal alignment feeds an uncertainty-aware Gaussian
product-of-experts classifier; everything runs on a small numpy autodiff core.
"""

from .datagen import Cohort, GenConfig, generate, read_cohort, write_cohort
from .encoders import Batch, ModalityMask, Sample, all_masks, collate
from .evalkit import EvalConfig, EvalSummary, SubsetReport, evaluate_all, evaluate_subset
from .model import ModelConfig, ModelParams
from .training import TrainConfig, read_checkpoint, train, write_checkpoint

__version__ = "0.1.0"
