import numpy as np
import pytest

from topofusion import measurement as ms
from topofusion.camera import CameraModel, DepthMap
from topofusion.harness import get_scene
from topofusion.harness.scene import Keyframe, Primitive, SceneScript


def _plane_scene(cam_height=0.5):
    prims = [Primitive("table", "plane", [0.4, 0.4], (0.5, 0.5, 0.5), [Keyframe(0, [0, 0, 0])])]
    cam = CameraModel.look_at([0, 0, cam_height], [0, 0, 0], 100.0, 100.0, 48, 40, up=(0, 1, 0))
    return SceneScript("plane", 2, prims, [cam], []), cam


def test_view_angle_cutoff_is_70_degrees():
    assert ms.MAX_VIEW_ANGLE_DEG == 70.0
    cam = CameraModel(100.0, 100.0, 0.0, 0.0, 1, 1)
    # the single pixel looks straight along +z; tilt the surface normal
    for angle, kept in [(69.9, True), (70.0, True), (70.1, False), (85.0, False)]:
        a = np.deg2rad(angle)
        n = np.array([np.sin(a), 0.0, -np.cos(a)])
        dm = DepthMap(np.ones((1, 1)), n.reshape(1, 1, 3))
        assert ms.view_angle_filter(dm, cam).valid[0, 0] == kept, angle


def test_render_depth_of_plane():
    scene, cam = _plane_scene()
    dm = ms.render_depth(scene, cam)
    np.testing.assert_allclose(dm.depth[dm.valid], 0.5, atol=1e-9)
    assert dm.valid.all()
    pts = dm.points_world(cam)
    np.testing.assert_allclose(pts[..., 2], 0.0, atol=1e-9)


def test_render_noise_is_seeded():
    scene, cam = _plane_scene()
    a = ms.render_depth(scene, cam, 0, 0.001, np.random.default_rng(1))
    b = ms.render_depth(scene, cam, 0, 0.001, np.random.default_rng(1))
    np.testing.assert_array_equal(a.depth, b.depth)
    assert np.std(a.depth[a.valid] - 0.5) == pytest.approx(0.001, rel=0.2)


def _volume():
    return ms.TsdfVolume.from_bounds([-0.1, -0.1, -0.05], [0.1, 0.1, 0.05], 0.005, 4.0)


def test_tsdf_plane_zero_crossing_and_extraction():
    scene, cam = _plane_scene()
    dm = ms.render_depth(scene, cam)
    vol = ms.tsdf_integrate(_volume(), dm, cam)
    # sdf along the optical axis changes sign at z = 0
    i, j = vol.dims[0] // 2, vol.dims[1] // 2
    col = vol.tsdf[i, j]
    z = vol.origin[2] + np.arange(vol.dims[2]) * vol.voxel_size
    obs = vol.weight[i, j] > 0
    assert np.all(col[obs & (z > 0.006)] > 0) and np.all(col[obs & (z < -0.006)] < 0)
    surf = ms.raycast_extract(vol, [cam])
    assert len(surf) > 100
    np.testing.assert_allclose(surf.pos[:, 2], 0.0, atol=1e-3)
    np.testing.assert_allclose(np.abs(surf.normal[:, 2]), 1.0, atol=1e-3)


def test_integration_backends_agree():
    scene, cam = _plane_scene()
    dm = ms.render_depth(scene, cam, 0, 0.0005, np.random.default_rng(0))
    a, b = _volume(), _volume()
    args = lambda v: (v.tsdf, v.weight, v.front, v.back, v.origin, float(v.voxel_size),
                      np.ascontiguousarray(cam.rotation), np.ascontiguousarray(cam.translation), float(cam.fx),
                      float(cam.fy), float(cam.cx), float(cam.cy), dm.depth, float(v.trunc), float(v.w_max),
                      ms.all_bricks(v.dims), ms.INTEGRATE_BRICK)
    ms._integrate_numba(*args(a))
    ms._integrate_numpy(*args(b))
    np.testing.assert_allclose(a.weight, b.weight)
    np.testing.assert_allclose(a.tsdf, b.tsdf, atol=1e-6)


def test_brick_restriction_does_not_change_surface():
    scene, cam = _plane_scene()
    dm = ms.render_depth(scene, cam)
    full = ms.tsdf_integrate(_volume(), dm, cam)
    part = ms.tsdf_integrate(_volume(), dm, cam, bricks=ms.surface_bricks(_volume(), [dm], [cam]))
    a = ms.raycast_extract(full, [cam])
    b = ms.raycast_extract(part, [cam])
    np.testing.assert_allclose(a.pos, b.pos, atol=1e-9)


def test_raycast_backends_agree():
    scene, cam = _plane_scene()
    vol = ms.tsdf_integrate(_volume(), ms.render_depth(scene, cam), cam)
    dirs, center = cam.pixel_rays()
    flat = np.ascontiguousarray(dirs.reshape(-1, 3))
    t0 = np.full(len(flat), -1.0)
    mask = ms.brick_mask(vol)
    args = (vol.tsdf, vol.weight, vol.origin, float(vol.voxel_size), vol.upper(), float(vol.trunc),
            np.ascontiguousarray(center), flat, t0, mask, ms.BRICK)
    ta, na = ms._raycast_numba(*args)
    tb, nb = ms._raycast_numpy(*args)
    np.testing.assert_allclose(ta, tb, atol=1e-7)
    np.testing.assert_allclose(na, nb, atol=1e-6)


def test_measure_static_scene_index_maps_consistent():
    scene = get_scene("static")
    p = scene.bounds(0.1)
    vol = ms.TsdfVolume.from_bounds(*p, 0.005, 4.0)
    m = ms.measure(scene, scene.cameras, 0, vol)
    assert len(m.surfels) > 1000
    assert len(m.index_maps) == len(scene.cameras)
    seen = np.zeros(len(m.surfels), bool)
    for im in m.index_maps:
        seen[im[im >= 0]] = True
    assert seen.all()
    np.testing.assert_allclose(np.linalg.norm(m.surfels.normal, axis=1), 1.0, atol=1e-6)
    gt = scene.ground_truth(0)
    from scipy.spatial import cKDTree

    d, _ = cKDTree(gt.points).query(m.surfels.pos)
    assert np.median(d) < 0.004


def test_reused_fusion_buffer_matches_fresh_volume():
    scene = get_scene("rearrange")
    cams = list(scene.cameras)
    lo, hi = scene.bounds(0.1)
    template = ms.TsdfVolume.from_bounds(lo, hi)
    buf = ms.FusionBuffer(template)
    for frame in (0, 12, 30):
        raw, colors = ms.capture(scene, cams, frame)
        a = ms.fuse_depth(raw, colors, cams, template, frame)
        b = ms.fuse_depth(raw, colors, cams, template, frame, buf)
        np.testing.assert_array_equal(a.surfels.pos, b.surfels.pos)
        for x, y in zip(a.index_maps, b.index_maps):
            np.testing.assert_array_equal(x, y)
    # nothing observed may survive outside the last frame's bricks
    ref = template.empty_like()
    for cam, dm in zip(cams, raw):
        ms.tsdf_integrate(ref, dm, cam, inplace=True, bricks=buf.bricks)
    np.testing.assert_array_equal(ref.weight, buf.vol.weight)
    np.testing.assert_array_equal(ref.tsdf, buf.vol.tsdf)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_brick_reset_restores_unobserved_state(backend):
    vol = ms.TsdfVolume(np.zeros(3), 0.01, (9, 10, 7), 0.04)
    rng = np.random.default_rng(1)
    for a in (vol.tsdf, vol.weight, vol.front, vol.back):
        a[...] = rng.random(a.shape)
    bricks = ms.all_bricks(vol.dims, 4)
    fn = ms._reset_bricks_numba if backend == "numba" else ms._reset_bricks_numpy
    fn(vol.tsdf, vol.weight, vol.front, vol.back, np.float32(vol.trunc), bricks, 4)
    fresh = vol.empty_like()
    for x, y in zip((vol.tsdf, vol.weight, vol.front, vol.back), (fresh.tsdf, fresh.weight, fresh.front, fresh.back)):
        np.testing.assert_array_equal(x, y)
