"""Scene generation, training and evaluation."""

from .canyon import CanyonParams, PlacementError, generate_canyon_scene, sample_canyon
from .loop import (
    PRESETS,
    ArchitectureMismatchError,
    ConfigError,
    MetricsRow,
    TrainConfig,
    TrainingAborted,
    TrainResult,
    curriculum_init,
    load_checkpoint,
    read_metrics_csv,
    save_checkpoint,
    train,
)
from .metrics import EvalMetrics, SceneMetrics, aggregate, evaluate, evaluate_random, scene_metrics
