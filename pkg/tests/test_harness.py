import json

import numpy as np
import pytest

from topofusion.errors import SceneError
from topofusion.harness import GroundTruth, builtin_scenes, get_scene, score_labels
from topofusion.harness.builtin import BUILTIN, LIFT_DETACH_FRAME
from topofusion.harness.scene import Event, Keyframe, Primitive, SceneScript


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_builtin_scene_roundtrips_through_json(name, tmp_path):
    sc = get_scene(name)
    path = tmp_path / f"{name}.json"
    sc.save(path)
    back = SceneScript.load(path)
    assert json.dumps(back.to_dict(), sort_keys=True) == json.dumps(sc.to_dict(), sort_keys=True)
    for f in (0, sc.frames // 2, sc.frames - 1):
        a, b = sc.ground_truth(f), back.ground_truth(f)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_builtin_list_covers_every_scene():
    assert [s.name for s in builtin_scenes()] == list(BUILTIN)


def test_lift_truth_counts_follow_script():
    sc = get_scene("lift")
    assert sc.object_count(LIFT_DETACH_FRAME - 1) == 1
    assert sc.object_count(LIFT_DETACH_FRAME) == 2


def test_ground_truth_points_lie_on_rendered_surface():
    sc = get_scene("static")
    gt = sc.ground_truth(0)
    cam = sc.cameras[0]
    dirs, center = cam.pixel_rays()
    flat = dirs.reshape(-1, 3)
    t, _ = sc.intersect(np.broadcast_to(center, flat.shape), flat, 0)[:2]
    hit = np.isfinite(t) & (t > 0)
    pts = center + t[hit, None] * flat[hit]
    from scipy.spatial import cKDTree
    d, _ = cKDTree(gt.points).query(pts)
    # ground-truth sampling spacing is 4 mm
    assert np.percentile(d, 99) < 0.004


def test_invalid_scripts_raise():
    cams = get_scene("static").cameras
    good = Primitive("a", "box", [0.1, 0.1, 0.1], (0.5, 0.5, 0.5), [Keyframe(0, [0, 0, 0])])
    with pytest.raises(SceneError):
        SceneScript("x", 0, [good], cams)
    with pytest.raises(SceneError):
        SceneScript("x", 5, [good, good], cams)
    with pytest.raises(SceneError):
        SceneScript("x", 5, [good], cams, [Event(1, "detach", "a", "a")])
    with pytest.raises(SceneError):
        SceneScript("x", 5, [good], [])
    with pytest.raises(SceneError):
        SceneScript("x", 5, [Primitive("b", "cone", [0.1], (0, 0, 0), [Keyframe(0, [0, 0, 0])])], cams)


def _gt(labels, count):
    pts = np.arange(len(labels), dtype=float)[:, None] * np.array([[0.1, 0.0, 0.0]])
    return GroundTruth(0, pts, np.asarray(labels), np.zeros(len(labels), int), count)


def test_majority_vote_example():
    # one predicted object covering two true objects in equal halves scores 0.5
    gt = _gt([0, 0, 1, 1], 2)
    s = score_labels(gt.points, np.zeros(4, int), gt)
    assert s.accuracy == pytest.approx(0.5)
    assert s.predicted_count == 1 and s.true_count == 2
    s = score_labels(gt.points, np.array([5, 5, 9, 9]), gt)
    assert s.accuracy == 1.0 and s.mean_surface_error == 0.0


def test_score_is_invariant_to_label_permutation(rng):
    gt = _gt(rng.integers(0, 4, 200), 4)
    pred = rng.integers(0, 5, 200)
    perm = rng.permutation(10)
    assert score_labels(gt.points, pred, gt).accuracy == score_labels(gt.points, perm[pred], gt).accuracy


def test_empty_prediction_scores_zero():
    gt = _gt([0, 1], 2)
    s = score_labels(np.zeros((0, 3)), np.zeros(0, int), gt)
    assert s.accuracy == 0.0 and s.n_surfels == 0
