"""Open-world video instance segmentation with spatio-temporal objectness."""

from .data_model import UNKNOWN_LABEL, ClassRegistry, Dataset, InstanceTrack, VideoClip
from .model import ModelConfig, OWVISModel

__all__ = ["UNKNOWN_LABEL", "ClassRegistry", "Dataset", "InstanceTrack", "VideoClip", "ModelConfig", "OWVISModel"]
__version__ = "0.1.0"
