"""Scripted synthetic scenes: analytic primitives on keyframed trajectories.

A scene is a list of primitives, each with a rigid keyframed trajectory and
an optional deformation program, plus attach/detach events that define the
ground-truth object grouping, and the camera rig.  Geometry is evaluated in
closed form, so ray hits and true surface points are exact.

Rest-frame conventions: ``plane`` and ``strip`` lie in z=0 centred on the
origin; ``box`` spans ``[-sx/2, sx/2] x [-sy/2, sy/2] x [0, sz]`` (origin at
the centre of its bottom face); ``sphere`` and ``capsule`` are centred on
the origin, the capsule axis along z.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from ..camera import CameraModel
from ..errors import SceneError

PRIMITIVE_TYPES = ("plane", "box", "sphere", "capsule", "strip")
DEFORMATION_TYPES = ("stretch", "bend")


def _interp_keys(keys, frame):
    """Piecewise linear interpolation of ``[(frame, value), ...]``, clamped."""
    frames = np.array([k[0] for k in keys], dtype=float)
    values = np.array([k[1] for k in keys], dtype=float)
    if values.ndim == 1:
        return float(np.interp(frame, frames, values))
    return np.array([np.interp(frame, frames, values[:, j]) for j in range(values.shape[1])])


@dataclass
class Keyframe:
    frame: float
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)


@dataclass
class Deformation:
    """``stretch``: scale along local z about z=0.  ``bend``: for strips, the
    part beyond ``hinge`` (local x) is raised by a raised-cosine ramp of width
    ``length`` and height ``value``; ``lateral`` of a stretch is the exponent
    applied to the scale for the x/y axes (0 keeps the footprint)."""

    type: str
    keys: list
    hinge: float = 0.0
    length: float = 0.1
    lateral: float = 0.0

    def value(self, frame):
        return _interp_keys(self.keys, frame)


@dataclass
class Primitive:
    name: str
    type: str
    size: np.ndarray
    color: np.ndarray
    keyframes: list
    deformation: Deformation = None

    def __post_init__(self):
        self.size = np.atleast_1d(np.asarray(self.size, dtype=float))
        self.color = np.asarray(self.color, dtype=float)

    # --- kinematics -------------------------------------------------------
    def rigid(self, frame):
        kf = self.keyframes
        frames = np.array([k.frame for k in kf], dtype=float)
        if len(kf) == 1 or frame <= frames[0]:
            k = kf[0]
            return Rotation.from_rotvec(k.rotation).as_matrix(), k.position.copy()
        if frame >= frames[-1]:
            k = kf[-1]
            return Rotation.from_rotvec(k.rotation).as_matrix(), k.position.copy()
        pos = np.array([np.interp(frame, frames, [k.position[j] for k in kf]) for j in range(3)])
        slerp = Slerp(frames, Rotation.from_rotvec([k.rotation for k in kf]))
        return slerp([frame]).as_matrix()[0], pos

    def affine(self, frame):
        """Linear rest-frame deformation (3x3); identity for bends."""
        if self.deformation is None or self.deformation.type != "stretch":
            return np.eye(3)
        s = self.deformation.value(frame)
        lat = s ** (-self.deformation.lateral)
        return np.diag([lat, lat, s])

    def transform(self, frame):
        """(A, t) with world = A @ rest + t."""
        rot, pos = self.rigid(frame)
        return rot @ self.affine(frame), pos

    def bend_height(self, x, frame):
        d = self.deformation
        if d is None or d.type != "bend":
            return np.zeros_like(x)
        amp = d.value(frame)
        s = np.clip((x - d.hinge) / d.length, 0.0, 1.0)
        return amp * 0.5 * (1.0 - np.cos(np.pi * s))

    def bend_slope(self, x, frame):
        d = self.deformation
        if d is None or d.type != "bend":
            return np.zeros_like(x)
        amp = d.value(frame)
        u = (x - d.hinge) / d.length
        inside = (u > 0.0) & (u < 1.0)
        return np.where(inside, amp * 0.5 * np.pi / d.length * np.sin(np.pi * np.clip(u, 0, 1)), 0.0)

    # --- geometry in the rest frame --------------------------------------
    def rest_bounds(self, frame=None):
        s = self.size
        if self.type == "plane":
            return np.array([-s[0] / 2, -s[1] / 2, 0.0]), np.array([s[0] / 2, s[1] / 2, 0.0])
        if self.type == "strip":
            top = 0.0
            if self.deformation is not None and self.deformation.type == "bend":
                top = max(abs(k[1]) for k in self.deformation.keys)
            return np.array([-s[0] / 2, -s[1] / 2, min(0.0, -top)]), np.array([s[0] / 2, s[1] / 2, top])
        if self.type == "box":
            return np.array([-s[0] / 2, -s[1] / 2, 0.0]), np.array([s[0] / 2, s[1] / 2, s[2]])
        if self.type == "sphere":
            return -np.full(3, s[0]), np.full(3, s[0])
        if self.type == "capsule":
            r, half = s[0], s[1] / 2
            return np.array([-r, -r, -half - r]), np.array([r, r, half + r])
        raise SceneError(f"unknown primitive type {self.type}")

    def intersect_rest(self, o, d, frame):
        """Ray hits in the rest frame: (t, normal), t = inf on miss.

        ``d`` need not be unit length; ``t`` is in units of ``d``.
        """
        n = len(o)
        t = np.full(n, np.inf)
        nrm = np.zeros((n, 3))
        s = self.size
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.type == "plane":
                th = -o[:, 2] / d[:, 2]
                p = o + th[:, None] * d
                ok = (th > 0) & (np.abs(p[:, 0]) <= s[0] / 2) & (np.abs(p[:, 1]) <= s[1] / 2) & np.isfinite(th)
                t[ok] = th[ok]
                nrm[:, 2] = 1.0
            elif self.type == "box":
                lo, hi = self.rest_bounds()
                inv = 1.0 / d
                t1 = (lo - o) * inv
                t2 = (hi - o) * inv
                tmin = np.minimum(t1, t2)
                tmax = np.maximum(t1, t2)
                tmin = np.where(np.isnan(tmin), -np.inf, tmin)
                tmax = np.where(np.isnan(tmax), np.inf, tmax)
                t_in = tmin.max(axis=1)
                t_out = tmax.min(axis=1)
                ok = (t_in <= t_out) & (t_in > 0)
                axis = tmin.argmax(axis=1)
                t[ok] = t_in[ok]
                sign = -np.sign(d[np.arange(n), axis])
                nrm[np.arange(n), axis] = sign
            elif self.type == "sphere":
                t[:], nrm[:] = _sphere_hit(o, d, np.zeros(3), s[0])
            elif self.type == "capsule":
                t[:], nrm[:] = _capsule_hit(o, d, s[0], s[1] / 2)
            elif self.type == "strip":
                t[:], nrm[:] = self._strip_hit(o, d, frame)
        return t, nrm

    def _strip_hit(self, o, d, frame):
        n = len(o)
        lo, hi = self.rest_bounds()
        lo = lo - np.array([0, 0, 1e-4])
        hi = hi + np.array([0, 0, 1e-4])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
            tmin = np.where(np.isnan(np.minimum(t1, t2)), -np.inf, np.minimum(t1, t2)).max(axis=1)
            tmax = np.where(np.isnan(np.maximum(t1, t2)), np.inf, np.maximum(t1, t2)).min(axis=1)
        tmin = np.maximum(tmin, 0.0)
        cand = np.nonzero(tmin < tmax)[0]
        t = np.full(n, np.inf)
        nrm = np.zeros((n, 3))
        if len(cand) == 0:
            return t, nrm
        oc, dc = o[cand], d[cand]
        a, b = tmin[cand], tmax[cand]
        steps = 96

        def f(tt):
            p = oc + tt[:, None] * dc
            return p[:, 2] - self.bend_height(p[:, 0], frame)

        prev_t = a.copy()
        prev_f = f(prev_t)
        found = np.zeros(len(cand), bool)
        lo_t = np.zeros(len(cand))
        hi_t = np.zeros(len(cand))
        for i in range(1, steps + 1):
            tt = a + (b - a) * i / steps
            ft = f(tt)
            cross = ~found & (np.sign(ft) != np.sign(prev_f))
            lo_t[cross] = prev_t[cross]
            hi_t[cross] = tt[cross]
            found |= cross
            prev_t, prev_f = tt, ft
        for _ in range(40):
            mid = 0.5 * (lo_t + hi_t)
            fm = f(mid)
            flo = f(lo_t)
            same = np.sign(fm) == np.sign(flo)
            lo_t = np.where(same, mid, lo_t)
            hi_t = np.where(same, hi_t, mid)
        th = 0.5 * (lo_t + hi_t)
        p = oc + th[:, None] * dc
        inside = (np.abs(p[:, 0]) <= self.size[0] / 2) & (np.abs(p[:, 1]) <= self.size[1] / 2)
        ok = found & inside
        slope = self.bend_slope(p[:, 0], frame)
        nn = np.stack([-slope, np.zeros_like(slope), np.ones_like(slope)], axis=1)
        idx = cand[ok]
        t[idx] = th[ok]
        nrm[idx] = nn[ok]
        return t, nrm

    # --- ground-truth surface samples ------------------------------------
    def rest_samples(self, spacing, frame):
        s = self.size
        if self.type in ("plane", "strip"):
            xs = np.arange(-s[0] / 2, s[0] / 2 + 1e-9, spacing)
            ys = np.arange(-s[1] / 2, s[1] / 2 + 1e-9, spacing)
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            gx, gy = gx.ravel(), gy.ravel()
            gz = self.bend_height(gx, frame) if self.type == "strip" else np.zeros_like(gx)
            return np.stack([gx, gy, gz], axis=1)
        if self.type == "box":
            lo, hi = self.rest_bounds()
            pts = []
            for axis in range(3):
                a1, a2 = [a for a in range(3) if a != axis]
                u = np.arange(lo[a1], hi[a1] + 1e-9, spacing)
                v = np.arange(lo[a2], hi[a2] + 1e-9, spacing)
                gu, gv = np.meshgrid(u, v, indexing="ij")
                for val in (lo[axis], hi[axis]):
                    p = np.zeros((gu.size, 3))
                    p[:, a1] = gu.ravel()
                    p[:, a2] = gv.ravel()
                    p[:, axis] = val
                    pts.append(p)
            return np.concatenate(pts)
        if self.type == "sphere":
            return _fibonacci_sphere(max(int(4 * np.pi * s[0] ** 2 / spacing**2), 16)) * s[0]
        if self.type == "capsule":
            r, half = s[0], s[1] / 2
            nsph = max(int(4 * np.pi * r * r / spacing**2), 16)
            sph = _fibonacci_sphere(nsph) * r
            sph[:, 2] += np.where(sph[:, 2] >= 0, half, -half)
            zs = np.arange(-half, half + 1e-9, spacing)
            ang = np.arange(0, 2 * np.pi, spacing / r)
            gz, ga = np.meshgrid(zs, ang, indexing="ij")
            cyl = np.stack([r * np.cos(ga.ravel()), r * np.sin(ga.ravel()), gz.ravel()], axis=1)
            return np.concatenate([sph, cyl])
        raise SceneError(f"unknown primitive type {self.type}")

    def world_samples(self, spacing, frame):
        a, t = self.transform(frame)
        return self.rest_samples(spacing, frame) @ a.T + t


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _sphere_hit(o, d, c, r):
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - 4 * a * cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    ok &= t > 0
    t = np.where(ok, t, np.inf)
    p = o + np.where(ok, t, 0.0)[:, None] * d
    nrm = (p - c) / r
    return t, nrm


def _capsule_hit(o, d, r, half):
    n = len(o)
    best = np.full(n, np.inf)
    nrm = np.zeros((n, 3))
    # cylinder body
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 1e-15)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = o[:, 2] + t * d[:, 2]
            good = ok & (t > 0) & (np.abs(z) <= half) & (t < best)
            best = np.where(good, t, best)
            p = o + np.where(good, t, 0)[:, None] * d
            cyl_n = np.stack([p[:, 0], p[:, 1], np.zeros(n)], axis=1) / r
            nrm = np.where(good[:, None], cyl_n, nrm)
    for zc in (half, -half):
        c_ = np.array([0.0, 0.0, zc])
        t, sn = _sphere_hit(o, d, c_, r)
        p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
        cap = (p[:, 2] - zc) * np.sign(zc) >= 0
        good = np.isfinite(t) & cap & (t < best)
        best = np.where(good, t, best)
        nrm = np.where(good[:, None], sn, nrm)
    return best, nrm


@dataclass
class Event:
    frame: int
    type: str
    a: str
    b: str


@dataclass
class SceneScript:
    name: str
    frames: int
    primitives: list
    cameras: list
    events: list = field(default_factory=list)
    noise_sigma: float = 0.0
    description: str = ""

    def __post_init__(self):
        self.validate()

    # --- validation -------------------------------------------------------
    def validate(self):
        if self.frames < 1:
            raise SceneError("scene needs at least one frame")
        names = [p.name for p in self.primitives]
        if len(set(names)) != len(names):
            raise SceneError("primitive names must be unique")
        for p in self.primitives:
            if p.type not in PRIMITIVE_TYPES:
                raise SceneError(f"{p.name}: unknown primitive type {p.type!r}")
            if not p.keyframes:
                raise SceneError(f"{p.name}: at least one keyframe required")
            fr = [k.frame for k in p.keyframes]
            if any(b <= a for a, b in zip(fr, fr[1:])):
                raise SceneError(f"{p.name}: keyframes must be strictly increasing")
            if p.deformation is not None:
                if p.deformation.type not in DEFORMATION_TYPES:
                    raise SceneError(f"{p.name}: unknown deformation {p.deformation.type!r}")
                kf = [k[0] for k in p.deformation.keys]
                if any(b <= a for a, b in zip(kf, kf[1:])):
                    raise SceneError(f"{p.name}: deformation keys must be strictly increasing")
                if p.deformation.type == "bend" and p.type != "strip":
                    raise SceneError(f"{p.name}: bend applies to strips only")
        attached = set()
        for e in sorted(self.events, key=lambda e: e.frame):
            if e.a not in names or e.b not in names:
                raise SceneError(f"event references unknown primitive: {e.a}, {e.b}")
            key = frozenset((e.a, e.b))
            if e.type == "attach":
                attached.add(key)
            elif e.type == "detach":
                if key not in attached:
                    raise SceneError(f"detach of {e.a}/{e.b} at frame {e.frame} without prior attach")
                attached.discard(key)
            else:
                raise SceneError(f"unknown event type {e.type!r}")
        if not self.cameras:
            raise SceneError("scene needs at least one camera")

    # --- ground truth -----------------------------------------------------
    def groups(self, frame):
        """Ground-truth object label per primitive (smallest member index)."""
        parent = list(range(len(self.primitives)))
        index = {p.name: i for i, p in enumerate(self.primitives)}

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        attached = set()
        for e in sorted(self.events, key=lambda e: e.frame):
            if e.frame > frame:
                break
            key = frozenset((e.a, e.b))
            if e.type == "attach":
                attached.add(key)
            else:
                attached.discard(key)
        for key in sorted(attached, key=sorted):
            a, b = sorted(key)
            ra, rb = find(index[a]), find(index[b])
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        return np.array([find(i) for i in range(len(self.primitives))])

    def object_count(self, frame):
        return len(np.unique(self.groups(frame)))

    def ground_truth(self, frame, spacing=0.004):
        """Dense true surface points, their object labels and primitive index."""
        labels = self.groups(frame)
        pts, lab, prim = [], [], []
        for i, p in enumerate(self.primitives):
            s = p.world_samples(spacing, frame)
            pts.append(s)
            lab.append(np.full(len(s), labels[i]))
            prim.append(np.full(len(s), i))
        return GroundTruth(frame, np.concatenate(pts), np.concatenate(lab), np.concatenate(prim),
                           self.object_count(frame))

    # --- rendering ----------------------------------------------------------
    def intersect(self, origins, dirs, frame):
        """Nearest hit over all primitives: (t, world normal facing the ray,
        colour, primitive index); t = inf on miss."""
        origins = np.broadcast_to(np.asarray(origins, float), np.shape(dirs)).reshape(-1, 3)
        dirs = np.asarray(dirs, float).reshape(-1, 3)
        n = len(dirs)
        best = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        color = np.zeros((n, 3))
        prim = np.full(n, -1)
        dnorm = np.linalg.norm(dirs, axis=1)
        for i, p in enumerate(self.primitives):
            a, t = p.transform(frame)
            # bounding-sphere prefilter: only rays passing near the primitive
            rl, rh = p.rest_bounds(frame)
            corners = np.array([[x, y, z] for x in (rl[0], rh[0]) for y in (rl[1], rh[1]) for z in (rl[2], rh[2])])
            corners = corners @ a.T + t
            c = 0.5 * (corners.min(axis=0) + corners.max(axis=0))
            rad = np.max(np.linalg.norm(corners - c, axis=1)) + 1e-6
            oc = c - origins
            along = np.einsum("ij,ij->i", oc, dirs) / dnorm
            perp2 = np.einsum("ij,ij->i", oc, oc) - along * along
            cand = np.nonzero((perp2 <= rad * rad) & (along >= -rad))[0]
            if len(cand) == 0:
                continue
            ainv = np.linalg.inv(a)
            o_r = (origins[cand] - t) @ ainv.T
            d_r = dirs[cand] @ ainv.T
            th, nr = p.intersect_rest(o_r, d_r, frame)
            better = th < best[cand]
            if not np.any(better):
                continue
            idx = cand[better]
            nw = nr[better] @ ainv  # inverse-transpose applied to row vectors
            nw /= np.linalg.norm(nw, axis=1, keepdims=True)
            best[idx] = th[better]
            normal[idx] = nw
            color[idx] = p.color
            prim[idx] = i
        hit = np.isfinite(best)
        flip = np.einsum("ij,ij->i", normal, dirs) > 0
        normal[hit & flip] *= -1
        return best, normal, color, prim

    def bounds(self, margin=0.1):
        """Axis-aligned box enclosing every primitive over all frames."""
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for p in self.primitives:
            frames = sorted({0, self.frames - 1, *[int(k.frame) for k in p.keyframes],
                             *([int(k[0]) for k in p.deformation.keys] if p.deformation else [])})
            for f in frames:
                f = min(max(f, 0), self.frames - 1)
                a, t = p.transform(f)
                rl, rh = p.rest_bounds(f)
                corners = np.array([[x, y, z] for x in (rl[0], rh[0]) for y in (rl[1], rh[1])
                                    for z in (rl[2], rh[2])])
                w = corners @ a.T + t
                lo = np.minimum(lo, w.min(axis=0))
                hi = np.maximum(hi, w.max(axis=0))
        return lo - margin, hi + margin

    # --- serialisation ------------------------------------------------------
    def to_dict(self):
        prims = []
        for p in self.primitives:
            d = {"name": p.name, "type": p.type, "size": p.size.tolist(), "color": p.color.tolist(),
                 "keyframes": [{"frame": k.frame, "position": k.position.tolist(), "rotation": k.rotation.tolist()}
                               for k in p.keyframes]}
            if p.deformation is not None:
                df = p.deformation
                d["deformation"] = {"type": df.type, "keys": [list(map(float, k)) for k in df.keys],
                                    "hinge": df.hinge, "length": df.length, "lateral": df.lateral}
            prims.append(d)
        return {"name": self.name, "description": self.description, "frames": self.frames,
                "noise_sigma": self.noise_sigma, "primitives": prims,
                "events": [{"frame": e.frame, "type": e.type, "a": e.a, "b": e.b} for e in self.events],
                "cameras": [c.to_dict() for c in self.cameras]}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, data):
        try:
            prims = []
            for p in data["primitives"]:
                df = p.get("deformation")
                deformation = None
                if df is not None:
                    deformation = Deformation(df["type"], [tuple(k) for k in df["keys"]], df.get("hinge", 0.0),
                                              df.get("length", 0.1), df.get("lateral", 0.0))
                size = p.get("size")
                if size is None:
                    size = [p["radius"]] + ([p["length"]] if "length" in p else [])
                kfs = [Keyframe(k["frame"], k["position"], k.get("rotation", [0, 0, 0])) for k in p["keyframes"]]
                prims.append(Primitive(p["name"], p["type"], size, p.get("color", [0.6, 0.6, 0.6]), kfs,
                                       deformation))
            cams = [camera_from_dict(c) for c in data["cameras"]]
            events = [Event(int(e["frame"]), e["type"], e["a"], e["b"]) for e in data.get("events", [])]
            return cls(data.get("name", "scene"), int(data["frames"]), prims, cams, events,
                       float(data.get("noise_sigma", 0.0)), data.get("description", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"malformed scene script: {exc!r}") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise SceneError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


def camera_from_dict(c):
    fx, fy = float(c["fx"]), float(c.get("fy", c["fx"]))
    w, h = int(c["width"]), int(c["height"])
    if "pose" in c:
        return CameraModel(fx, fy, float(c.get("cx", (w - 1) / 2)), float(c.get("cy", (h - 1) / 2)), w, h,
                           np.asarray(c["pose"], float), c.get("name", ""))
    return CameraModel.look_at(c["eye"], c["target"], fx, fy, w, h, up=c.get("up", (0, 0, 1)),
                               cx=c.get("cx"), cy=c.get("cy"), name=c.get("name", ""))


@dataclass
class GroundTruth:
    frame: int
    points: np.ndarray
    labels: np.ndarray
    primitive: np.ndarray
    object_count: int
