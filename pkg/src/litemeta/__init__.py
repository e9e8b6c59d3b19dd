"""Few-shot meta-learning with LITE: large support sets, small back-propagated subsets."""

from .autodiff import GradMap, Tape, Tensor, backward, with_grad_disabled
from .episodes import Episode, EpisodeSampler, EpisodeSamplerConfig, SyntheticSpec
from .lite import LiteConfig, TrainLoopConfig, evaluate, meta_train, task_step
from .models import FeatureExtractorSpec, SetEncoderSpec, build_model
from .params import ParamStore

__all__ = [
    "Episode",
    "EpisodeSampler",
    "EpisodeSamplerConfig",
    "FeatureExtractorSpec",
    "GradMap",
    "LiteConfig",
    "ParamStore",
    "SetEncoderSpec",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainLoopConfig",
    "backward",
    "build_model",
    "evaluate",
    "meta_train",
    "task_step",
    "with_grad_disabled",
]
