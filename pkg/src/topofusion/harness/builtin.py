"""Built-in scene scripts.

``lift``       a deformable blob is stretched, snaps off a table, is carried
               up, lowered back and released.
``peel``       the same with a slow four-frame release.
``rearrange``  four rigid boxes on a table, relocated one after another.
``strip``      a deformable strip is peeled off the table and lifted.
``static``     a box resting on a table; nothing moves.
``translate``  a lone box sliding 1 cm per frame along x.
``desk``       a large crowded desk used for throughput measurements.
"""
import numpy as np

from ..camera import CameraModel
from .scene import Deformation, Event, Keyframe, Primitive, SceneScript

TABLE_COLOR = (0.55, 0.4, 0.25)
# first frame the blob no longer touches the table / frame it is set down again
LIFT_DETACH_FRAME = 21
LIFT_REST_FRAME = 58


def camera_rig(n=3, radius=0.7, height=0.6, target=(0.0, 0.0, 0.05), width=160, height_px=120, focal=150.0,
               azimuth0=90.0):
    """``n`` cameras evenly spaced on a circle, all looking at ``target``."""
    cams = []
    for i in range(n):
        a = np.deg2rad(azimuth0 + 360.0 * i / n)
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height]) + np.array([target[0], target[1], 0.0])
        cams.append(CameraModel.look_at(eye, target, focal, focal, width, height_px, name=f"cam{i}"))
    return cams


def _still(pos, rot=(0, 0, 0)):
    return [Keyframe(0, pos, rot)]


def static_scene(frames=30, **rig):
    prims = [
        Primitive("table", "plane", [0.5, 0.5], TABLE_COLOR, _still([0, 0, 0])),
        Primitive("box", "box", [0.12, 0.1, 0.08], (0.2, 0.5, 0.8), _still([0.02, 0.0, 0.0], [0, 0, 0.3])),
    ]
    events = [Event(0, "attach", "box", "table")]
    return SceneScript("static", frames, prims, camera_rig(**rig), events,
                       description="box resting on a table, nothing moves")


def lift_scene(frames=72, release_frames=1, peak_stretch=1.75, **rig):
    """Blob held at its top and stretched upward (frames 10-20); then the
    bottom lets go of the table and springs back to rest shape within
    ``release_frames`` while the top stays where it is; the blob is carried
    up to 14 cm, held, lowered back onto the table (44-58) and released.

    The default release takes a single frame, like a plush toy that snaps
    off the surface it was pulled from; ``release_frames=4`` gives a slow
    peel.
    """
    r = int(release_frames)
    if r < 1:
        raise ValueError("release_frames must be >= 1")
    # finer cameras than the default rig: a node has to support well over
    # gamma_remove surfels for the removal counter to be meaningful
    rig.setdefault("width", 240)
    rig.setdefault("height_px", 180)
    rig.setdefault("focal", 225.0)
    height = 0.08
    lifted = (peak_stretch - 1.0) * height  # bottom height once the top is unchanged
    stretch = Deformation("stretch", [(0, 1.0), (10, 1.0), (20, peak_stretch), (20 + r, 1.0)], lateral=0.5)
    keys = [
        Keyframe(0, [0, 0, 0]),
        Keyframe(20, [0, 0, 0]),
        Keyframe(20 + r, [0, 0, lifted]),
        Keyframe(30 + r, [0, 0, 0.14]),
        Keyframe(44, [0, 0, 0.14]),
        Keyframe(LIFT_REST_FRAME, [0, 0, 0.0]),
    ]
    prims = [
        Primitive("table", "plane", [0.5, 0.5], TABLE_COLOR, _still([0, 0, 0])),
        Primitive("blob", "box", [0.12, 0.12, height], (0.85, 0.3, 0.2), keys, stretch),
    ]
    events = [Event(0, "attach", "blob", "table"), Event(LIFT_DETACH_FRAME, "detach", "blob", "table"),
              Event(LIFT_REST_FRAME, "attach", "blob", "table")]
    name = "lift" if r == 1 else "peel"
    return SceneScript(name, frames, prims, camera_rig(**rig), events,
                       description=("deformable blob snapped off a table and set back down" if r == 1 else
                                    "deformable blob slowly peeled off a table and set back down"))


def peel_scene(frames=72, **rig):
    """``lift`` with a slow four-frame release instead of a snap."""
    return lift_scene(frames, release_frames=4, **rig)


def rearrange_scene(frames=96, **rig):
    """Four boxes; each in turn is lifted 6 cm, carried and set down again."""
    starts = [(-0.12, -0.12), (0.12, -0.12), (-0.12, 0.12), (0.12, 0.12)]
    ends = [(-0.12, -0.02), (0.02, -0.12), (-0.02, 0.12), (0.12, 0.02)]
    colors = [(0.8, 0.2, 0.2), (0.2, 0.7, 0.3), (0.2, 0.3, 0.8), (0.8, 0.8, 0.2)]
    prims = [Primitive("table", "plane", [0.5, 0.5], TABLE_COLOR, _still([0, 0, 0]))]
    events = []
    t0 = 8
    for i, (s, e) in enumerate(zip(starts, ends)):
        name = f"box{i}"
        a = t0 + 20 * i
        keys = [
            Keyframe(0, [s[0], s[1], 0.0]),
            Keyframe(a, [s[0], s[1], 0.0]),
            Keyframe(a + 6, [s[0], s[1], 0.06]),
            Keyframe(a + 14, [e[0], e[1], 0.06]),
            Keyframe(a + 20, [e[0], e[1], 0.0]),
        ]
        prims.append(Primitive(name, "box", [0.08, 0.08, 0.07], colors[i], keys))
        events.append(Event(0, "attach", name, "table"))
        events.append(Event(a + 1, "detach", name, "table"))
    return SceneScript("rearrange", frames, prims, camera_rig(**rig), events,
                       description="four boxes relocated one after another")


def strip_scene(frames=50, **rig):
    bend = Deformation("bend", [(0, 0.0), (10, 0.0), (30, 0.06)], hinge=-0.05, length=0.12)
    keys = [Keyframe(0, [0, 0, 0.001]), Keyframe(30, [0, 0, 0.001]), Keyframe(45, [0, 0, 0.08])]
    prims = [
        Primitive("table", "plane", [0.5, 0.5], TABLE_COLOR, _still([0, 0, 0])),
        Primitive("strip", "strip", [0.24, 0.1], (0.3, 0.6, 0.9), keys, bend),
    ]
    events = [Event(0, "attach", "strip", "table"), Event(31, "detach", "strip", "table")]
    return SceneScript("strip", frames, prims, camera_rig(**rig), events,
                       description="deformable strip peeled off a table and lifted")


def translate_scene(frames=30, step=0.01, **rig):
    keys = [Keyframe(0, [-0.5 * step * (frames - 1), 0, 0.1]), Keyframe(frames - 1, [0.5 * step * (frames - 1), 0, 0.1])]
    prims = [Primitive("box", "box", [0.16, 0.12, 0.1], (0.3, 0.7, 0.4), keys, None)]
    prims[0].keyframes[0].rotation = np.array([0.0, 0.0, 0.4])
    prims[0].keyframes[1].rotation = np.array([0.0, 0.0, 0.4])
    rig.setdefault("target", (0.0, 0.0, 0.15))
    return SceneScript("translate", frames, prims, camera_rig(**rig), [],
                       description="single rigid box translating 1 cm per frame")


def desk_scene(frames=20, **rig):
    """Large desk with several objects, sized for ~900 nodes / ~13k surfels."""
    rig.setdefault("radius", 0.9)
    rig.setdefault("height", 0.75)
    rig.setdefault("width", 180)
    rig.setdefault("height_px", 135)
    rig.setdefault("focal", 135.0)
    prims = [Primitive("table", "plane", [0.9, 0.8], TABLE_COLOR, _still([0, 0, 0]))]
    events = []
    rng = np.random.default_rng(3)
    spots = [(-0.25, -0.2), (0.0, -0.22), (0.25, -0.18), (-0.25, 0.2), (0.25, 0.22), (0.0, 0.05)]
    for i, (x, y) in enumerate(spots):
        size = [0.1 + 0.04 * rng.random(), 0.1 + 0.04 * rng.random(), 0.06 + 0.06 * rng.random()]
        keys = [Keyframe(0, [x, y, 0.0], [0, 0, rng.random()])]
        if i == 5:
            keys = [Keyframe(0, [x, y, 0.0]), Keyframe(frames - 1, [x + 0.005 * (frames - 1), y, 0.0])]
        prims.append(Primitive(f"obj{i}", "box", size, tuple(rng.random(3)), keys))
        events.append(Event(0, "attach", f"obj{i}", "table"))
    return SceneScript("desk", frames, prims, camera_rig(**rig), events,
                       description="crowded desk for throughput measurements")


BUILTIN = {
    "lift": lift_scene,
    "peel": peel_scene,
    "rearrange": rearrange_scene,
    "strip": strip_scene,
    "static": static_scene,
    "translate": translate_scene,
    "desk": desk_scene,
}


def builtin_scenes():
    return [f() for f in BUILTIN.values()]


def get_scene(name, **kw):
    return BUILTIN[name](**kw)
