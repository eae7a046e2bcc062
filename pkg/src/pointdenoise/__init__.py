"""Point-cloud denoising pretraining with a distilled feature branch, zero-shot inference and attacks."""

from .geometry import BACKEND, InvalidInputError, chamfer_l2, farthest_point_sample, knn_group, normalize_unit_sphere
from .model import ConfigError, DualDenoiser, ModelConfig
from .schedule import NoiseSchedule, diffuse
from .zeroshot import InferenceConfig, ZeroShotClassifier

__version__ = "0.1.0"
