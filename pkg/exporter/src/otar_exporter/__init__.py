"""Bridge between torch checkpoints and `.otar` tensor archives: export,
factored-model assembly, and toy-scale distillation fine-tuning."""

from .assemble import MissingFactorError, assemble_model
from .distill import DatasetMissingError, finetune_distill, make_dataset
from .export import export_checkpoint, export_model, read_mapping

__version__ = "0.1.0"

__all__ = [
    "MissingFactorError", "assemble_model",
    "DatasetMissingError", "finetune_distill", "make_dataset",
    "export_checkpoint", "export_model", "read_mapping",
]
