"""Meta-learned latent-density out-of-distribution detection for few-shot tasks."""

__version__ = "0.1.0"

from .diffcore import Array, Tape, backward
from .encoder import CommonParams, EncoderConfig, embed, init, standardize
from .episodes import Episode, EpisodeSpec, TaskDataset, fixed_eval_episodes, \
    load_epds, sample_episode, save_epds
from .gmm import GmmParams, VariantSpec, adapt, classify, log_density, \
    log_density_woodbury, ood_score, variant_score
from .objective import exact_auc, meta_objective, smooth_auc
from .synth import GeneratorSpec, GroundTruth, synth_tasks
from .trainer import EvalReport, TrainConfig, TrainLog, evaluate, train

__all__ = [
    "Array", "Tape", "backward",
    "CommonParams", "EncoderConfig", "embed", "init", "standardize",
    "Episode", "EpisodeSpec", "TaskDataset", "fixed_eval_episodes",
    "load_epds", "sample_episode", "save_epds",
    "GmmParams", "VariantSpec", "adapt", "classify", "log_density",
    "log_density_woodbury", "ood_score", "variant_score",
    "exact_auc", "meta_objective", "smooth_auc",
    "GeneratorSpec", "GroundTruth", "synth_tasks",
    "EvalReport", "TrainConfig", "TrainLog", "evaluate", "train",
]
