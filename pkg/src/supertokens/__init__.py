"""Distilling a point-cloud transformer into a small learnable SuperToken basis."""
from .autodiff import NumericError, ShapeError, Tape, Tensor
from .baselines import KMeansStudent, FPSStudent, kmeans_fit, train_specialist
from .cost import CostBreakdown, CostConfig, count_ops
from .data import generate_count_dataset, generate_dataset
from .distill import DistillConfig, distill, probe_finetune, train_teacher
from .models import Student, StudentConfig, Teacher

__version__ = "0.1.0"

__all__ = [
    "CostBreakdown", "CostConfig", "DistillConfig", "FPSStudent", "KMeansStudent",
    "NumericError", "ShapeError", "Student", "StudentConfig", "Tape", "Teacher", "Tensor",
    "count_ops", "distill", "generate_count_dataset", "generate_dataset", "kmeans_fit",
    "probe_finetune", "train_specialist", "train_teacher",
]
