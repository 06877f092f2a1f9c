from .builtin import builtin_scenes, get_scene
from .scene import GroundTruth, SceneScript
from .scoring import SegmentationScore, score_labels, score_segmentation

__all__ = ["builtin_scenes", "get_scene", "GroundTruth", "SceneScript", "SegmentationScore", "score_labels",
           "score_segmentation"]
