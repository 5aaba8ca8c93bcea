"""Few-shot segmentation with object-level correlation at desk scale."""

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    bundle_from_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    snapshot_encoder,
    snapshot_model,
)
from .encoder import (
    CamHead,
    Encoder,
    EncoderBundle,
    EncoderConfig,
    PretrainConfig,
    cam_map,
    pretrain_encoder,
)
from .episodes import (
    ClassSplit,
    Episode,
    SegDataset,
    SynthConfig,
    generate_synthetic,
    ingest_folder,
    make_folds,
    sample_episode,
    save_dataset,
)
from .evaluation import (
    ConfusionAccumulator,
    EvalResult,
    ablation_run,
    evaluate,
    iou,
    resolve_variant,
    visualize,
)
from .model import ALLOCATIONS, VARIANTS, ModelConfig, OCNet, variant_config
from .trainer import TrainConfig, TrainResult, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "ALLOCATIONS",
    "VARIANTS",
    "CamHead",
    "Checkpoint",
    "CheckpointError",
    "ClassSplit",
    "ConfusionAccumulator",
    "Encoder",
    "EncoderBundle",
    "EncoderConfig",
    "Episode",
    "EvalResult",
    "ModelConfig",
    "OCNet",
    "PretrainConfig",
    "SegDataset",
    "SynthConfig",
    "TrainConfig",
    "TrainResult",
    "ablation_run",
    "bundle_from_checkpoint",
    "cam_map",
    "evaluate",
    "generate_synthetic",
    "ingest_folder",
    "iou",
    "load_checkpoint",
    "make_folds",
    "model_from_checkpoint",
    "pretrain_encoder",
    "resolve_variant",
    "sample_episode",
    "save_checkpoint",
    "save_dataset",
    "snapshot_encoder",
    "snapshot_model",
    "total_loss",
    "train",
    "variant_config",
]
