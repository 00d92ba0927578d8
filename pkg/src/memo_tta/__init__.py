"""Single-point test-time adaptation by marginal entropy minimization over augmentations."""
from .adapt import AdaptationConfig, memo_adapt_predict, tent_adapt, tta_predict
from .augment import AugmentationPolicy
from .bench import evaluate, sweep_B
from .data import CorruptionSpec, Dataset, corrupt, generate_synthetic
from .nn import build_model, load_checkpoint, save_checkpoint, train_supervised

__all__ = [
    "AdaptationConfig", "AugmentationPolicy", "CorruptionSpec", "Dataset", "build_model", "corrupt",
    "evaluate", "generate_synthetic", "load_checkpoint", "memo_adapt_predict", "save_checkpoint",
    "sweep_B", "tent_adapt", "train_supervised", "tta_predict",
]
