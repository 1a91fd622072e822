"""Non-intrusive speech quality prediction from fused encoder-layer features."""

from .features import (
    FeatureStack,
    MelConfig,
    MelSpectrogram,
    Waveform,
    compute_log_mel,
    load_feature_stack,
    pad_or_trim,
    save_feature_stack,
    toy_encode,
)
from .model import (
    ArchConfig,
    ModelParams,
    Prediction,
    attention_pool,
    backward,
    forward,
    fuse_layers,
    init_params,
)
from .objectives import (
    BatchLabels,
    EvalResult,
    bias_aware_loss,
    correlation_matrix,
    mse_loss,
    mse_metric,
    spearman,
)
from .data import (
    CombinedDataset,
    DatasetRecord,
    SynthSpec,
    combine_datasets,
    denormalize,
    distribution_summary,
    make_batches,
    normalize_label,
    parse_manifest,
    split_validation,
    synth_dataset,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    TrainData,
    TrainState,
    adam_update,
    early_stop,
    load_checkpoint,
    plateau_step,
    save_checkpoint,
    train,
    warmup_lr,
)

__version__ = "0.1.0"
