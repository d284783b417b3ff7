"""Feature-space diffusion reconstruction for unsupervised OOD detection.

The pipeline: pooled multi-layer encoder features are z-scored per layer,
concatenated, noised to a chosen diffusion step, reconstructed by a
residual-MLP denoiser with skip-step DDIM sampling, and scored by how
badly the reconstruction misses the original. In-distribution samples
sit where the denoiser learned to project; out-of-distribution samples
lose their off-manifold components and score high.
"""

from .checkpoint import (
    FINAL_CKPT_NAME,
    INITIAL_CKPT_NAME,
    Checkpoint,
    file_sha256,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig, load_run_config
from .diffusion import (
    DenoiseConfig,
    NoiseSchedule,
    StridePolicy,
    build_schedule,
    denoise,
    ennoise,
)
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    FormatError,
    LfodError,
    StructuralError,
    TrainingDivergedError,
    ValidationError,
)
from .features import (
    FeatureRecord,
    FeatureSet,
    LayerLayout,
    SetLabel,
    assemble_z0,
    read_feature_file,
    write_feature_file,
    zscore_normalize,
)
from .metrics import ScoredSet, auroc, fpr_at_tpr, synth_benchmark
from .network import LfdnConfig, LfdnParams, init_params, lfdn_forward
from .report import eval_report, write_eval_report
from .scoring import (
    ScoreReport,
    read_score_csv,
    score_lr,
    score_mfsim,
    score_mse,
    score_records,
    scored_set,
    write_score_csv,
)
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointMismatchError",
    "ConfigError",
    "DenoiseConfig",
    "FINAL_CKPT_NAME",
    "FeatureRecord",
    "FeatureSet",
    "FormatError",
    "INITIAL_CKPT_NAME",
    "LayerLayout",
    "LfdnConfig",
    "LfdnParams",
    "LfodError",
    "NoiseSchedule",
    "RunConfig",
    "ScoreReport",
    "ScoredSet",
    "SetLabel",
    "StridePolicy",
    "StructuralError",
    "TrainConfig",
    "TrainingDivergedError",
    "ValidationError",
    "assemble_z0",
    "auroc",
    "build_schedule",
    "denoise",
    "ennoise",
    "eval_report",
    "file_sha256",
    "fpr_at_tpr",
    "init_params",
    "lfdn_forward",
    "load_checkpoint",
    "load_run_config",
    "read_feature_file",
    "read_score_csv",
    "save_checkpoint",
    "score_lr",
    "score_mfsim",
    "score_mse",
    "score_records",
    "scored_set",
    "synth_benchmark",
    "train",
    "write_eval_report",
    "write_feature_file",
    "write_score_csv",
    "zscore_normalize",
]
