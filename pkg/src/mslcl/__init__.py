"""Cross-domain continual learning with Mahalanobis similarity heads and an EMA teacher."""

from .autodiff import ComputationTape, Tensor, backward, finite_difference_grad
from .data import (
    DomainDataset,
    RehearsalMemory,
    SyntheticConfig,
    generate_synthetic,
    leave_one_domain_out,
    load_features_table,
    split_tasks,
)
from .heads import LinearHead, MslHead, head_expand, head_scores
from .losses import ce_loss, distillation_loss, total_loss
from .metrics import AccuracyMatrix, average_accuracy, backward_transfer, evaluate_accuracy
from .trainer import METHODS, TrainConfig, run_experiment

__version__ = "0.1.0"
