"""Masked image modeling pretraining and membership inference experiments."""

from ._mimi import (
    ConfigError,
    Dataset,
    ExperimentConfig,
    ModelConfig,
    ModelPair,
    StageError,
    TrainConfig,
    infer,
    load_idx,
    normalize,
    pretrain,
    run_grid,
    run_pipeline,
    save_idx,
    score_samples,
    search_threshold,
    split,
    synth_generate,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "ExperimentConfig",
    "ModelConfig",
    "ModelPair",
    "StageError",
    "TrainConfig",
    "infer",
    "load_idx",
    "normalize",
    "pretrain",
    "run_grid",
    "run_pipeline",
    "save_idx",
    "score_samples",
    "search_threshold",
    "split",
    "synth_generate",
]
