"""Segmentation and reconstruction scores against scripted ground truth."""
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class SegmentationScore:
    frame: int
    predicted_count: int
    true_count: int
    accuracy: float
    mean_surface_error: float
    n_surfels: int

    def to_dict(self):
        return asdict(self)


def score_labels(points, pred, gt):
    """Score raw per-point predicted labels; see :func:`score_segmentation`."""
    points = np.asarray(points, float).reshape(-1, 3)
    pred = np.asarray(pred)
    n_pred = len(np.unique(pred)) if len(pred) else 0
    if len(points) == 0:
        return SegmentationScore(gt.frame, 0, int(gt.object_count), 0.0, float("nan"), 0)
    dist, near = cKDTree(gt.points).query(points)
    true = gt.labels[near]
    # majority vote: each predicted label maps to its most frequent true label
    correct = 0
    for p in np.unique(pred):
        t = true[pred == p]
        correct += np.bincount(np.unique(t, return_inverse=True)[1]).max()
    return SegmentationScore(gt.frame, int(n_pred), int(gt.object_count), float(correct / len(points)),
                             float(dist.mean()), int(len(points)))


def score_segmentation(objects, gt, frame=None):
    """Predicted vs. true object count, majority-vote label accuracy and mean
    distance from surfels to the true surface.

    Every surfel takes the true label of its nearest ground-truth point; each
    predicted object is mapped to the majority true label among its surfels.
    An empty prediction scores accuracy 0.  ``predicted_count`` counts all
    objects, including ones without surfels.
    """
    if frame is not None and frame != gt.frame:
        raise ValueError(f"ground truth is for frame {gt.frame}, not {frame}")
    pos = [o.surfels.pos for o in objects]
    lab = [np.full(len(o.surfels), o.id) for o in objects]
    points = np.concatenate(pos) if pos else np.zeros((0, 3))
    pred = np.concatenate(lab) if lab else np.zeros(0, np.int64)
    s = score_labels(points, pred, gt)
    s.predicted_count = len(objects)
    return s
