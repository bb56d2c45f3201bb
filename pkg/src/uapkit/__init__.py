"""Universal adversarial perturbations against dual-encoder
vision-language models, with bandit-driven surrogate selection,
a transfer evaluation harness, and a portable perturbation zoo.
"""

from .core import (
    EvalReport,
    ImageBatch,
    Kind,
    KindMismatchError,
    Perturbation,
    PerturbationMeta,
    ResolutionMismatchError,
    Task,
    ThreatModel,
    UapkitError,
    ValidationError,
    apply,
    asr_percent,
    rescale_perturbation,
)
from .bandit import BanditState, SelectionStrategy, StrategyKind, select, ucb_scores, update_rewards
from .data import DatasetEntry, DatasetManifest, load_images, render_shapes_dataset
from .encoders import (
    EncoderAdapter,
    EncoderHandle,
    SearchSpace,
    ToyTrainConfig,
    clip_contrastive_loss,
    load_builtin_space,
    materialize,
    train_toy_encoder,
)
from .engine import AttackConfig, AttackTrace, StepRecord, config_digest, run_attack
from .shapes import ShapesSpec, make_shapes

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackTrace",
    "BanditState",
    "DatasetEntry",
    "DatasetManifest",
    "EncoderAdapter",
    "EncoderHandle",
    "EvalReport",
    "ImageBatch",
    "Kind",
    "KindMismatchError",
    "Perturbation",
    "PerturbationMeta",
    "ResolutionMismatchError",
    "SearchSpace",
    "SelectionStrategy",
    "ShapesSpec",
    "StepRecord",
    "StrategyKind",
    "Task",
    "ThreatModel",
    "ToyTrainConfig",
    "UapkitError",
    "ValidationError",
    "apply",
    "asr_percent",
    "clip_contrastive_loss",
    "config_digest",
    "load_builtin_space",
    "load_images",
    "make_shapes",
    "materialize",
    "render_shapes_dataset",
    "rescale_perturbation",
    "run_attack",
    "select",
    "train_toy_encoder",
    "ucb_scores",
    "update_rewards",
    "__version__",
]
