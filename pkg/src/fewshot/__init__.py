"""Metric-based one-/few-shot learners for the missing-word task."""

from .autodiff import Parameter, Tape, Tensor, grad_check
from .embeddings import FceConfig, PreEmbedConfig
from .episodes import (Corpus, Episode, EpisodeSampler, EpisodeSpec, TaskSet, VocabSplit,
                       build_tasks, export_episodes, import_episodes, ingest, ingest_file,
                       sample_episode, split_vocab)
from .metrics import MetricKind, pairwise_scores, parse_metric
from .models import ModelConfig, build_model
from .training import (EvalReport, TaskData, TrainConfig, TrainState, evaluate, fit,
                       load_checkpoint, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "Parameter", "Tape", "Tensor", "grad_check",
    "FceConfig", "PreEmbedConfig",
    "Corpus", "Episode", "EpisodeSampler", "EpisodeSpec", "TaskSet", "VocabSplit", "build_tasks",
    "export_episodes", "import_episodes", "ingest", "ingest_file", "sample_episode", "split_vocab",
    "MetricKind", "pairwise_scores", "parse_metric",
    "ModelConfig", "build_model",
    "EvalReport", "TaskData", "TrainConfig", "TrainState", "evaluate", "fit", "load_checkpoint",
    "save_checkpoint",
]
