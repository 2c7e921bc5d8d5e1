"""Road surface condition classifier: hybrid conv-attention network,
foreground-background auxiliary loss, data pipeline, and training tools."""

from .checkpoint import (
    CheckpointBundle,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .data import (
    ClassMap,
    Dataset,
    LabeledImage,
    SIMPLE_CLASSES,
    batch_iterator,
    decode_ppm,
    encode_ppm,
    load_dataset,
    remap_dataset,
    remap_to_simple,
    resize_bilinear,
    stratified_split,
    synth_generate,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DecodeError,
    DimensionError,
    IntegrityError,
    NumericsError,
    RemapError,
    RoadSurfaceError,
    StackSpecError,
    TrainAbort,
)
from .fbm import (
    FbmConfig,
    FbmResult,
    StageClassifier,
    build_classifiers,
    classifier_params,
    effective_k_schedule,
    fbm_total_loss,
    select_foreground,
    smooth_hardtanh,
)
from .metrics import (
    MetricsReport,
    confusion_matrix,
    macro_prf,
    per_class_prf,
    top1_from_confusion,
)
from .model import (
    Model,
    ModelConfig,
    StackSpec,
    StageSpec,
    build_model,
    count_params,
    parse_stack_spec,
    preset,
    preset_names,
)
from .optim import AdamW, LrSchedule, base_lr_for_batch
from .tensor import Tensor, cross_entropy, no_grad
from .train import TrainConfig, TrainResult, evaluate, total_loss, train

__all__ = [
    "AdamW",
    "CheckpointBundle",
    "ClassMap",
    "ConfigError",
    "ContractError",
    "DataError",
    "Dataset",
    "DecodeError",
    "DimensionError",
    "FbmConfig",
    "FbmResult",
    "IntegrityError",
    "LabeledImage",
    "LrSchedule",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "NumericsError",
    "RemapError",
    "RoadSurfaceError",
    "SIMPLE_CLASSES",
    "StackSpec",
    "StackSpecError",
    "StageClassifier",
    "StageSpec",
    "Tensor",
    "TrainAbort",
    "TrainConfig",
    "TrainResult",
    "base_lr_for_batch",
    "batch_iterator",
    "build_classifiers",
    "build_model",
    "classifier_params",
    "confusion_matrix",
    "count_params",
    "cross_entropy",
    "decode_ppm",
    "effective_k_schedule",
    "encode_ppm",
    "evaluate",
    "fbm_total_loss",
    "load_checkpoint",
    "load_dataset",
    "macro_prf",
    "no_grad",
    "parse_stack_spec",
    "per_class_prf",
    "preset",
    "preset_names",
    "remap_dataset",
    "remap_to_simple",
    "resize_bilinear",
    "restore_optimizer",
    "save_checkpoint",
    "select_foreground",
    "smooth_hardtanh",
    "stratified_split",
    "synth_generate",
    "top1_from_confusion",
    "total_loss",
    "train",
]
