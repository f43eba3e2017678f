"""Few-shot semantic segmentation via iterative prototype mining, on a
self-contained numpy autodiff core with a synthetic episodic benchmark."""

from .autodiff import Tape, Tensor, backward
from .config import RunConfig
from .data import Episode, SynthSpec, fold_split, make_episode, sample_episode
from .errors import (AllMaskedError, CheckpointError, ConfigError, EpisodeError,
                     GraphError, NonFiniteError, ProtomineError, RenderError,
                     ShapeError)
from .harness import evaluate, run_ablation, run_analysis, run_evaluation, run_training
from .metrics import MetricsReport, SegmentationScores, prototype_distances
from .model import FewShotSegmenter

__version__ = "0.1.0"

__all__ = [
    "AllMaskedError", "CheckpointError", "ConfigError", "Episode", "EpisodeError",
    "FewShotSegmenter", "GraphError", "MetricsReport", "NonFiniteError",
    "ProtomineError", "RenderError", "RunConfig", "SegmentationScores", "ShapeError",
    "SynthSpec", "Tape", "Tensor", "backward", "evaluate", "fold_split",
    "make_episode", "prototype_distances", "run_ablation", "run_analysis",
    "run_evaluation", "run_training", "sample_episode",
]
