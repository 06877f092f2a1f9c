"""Per-frame measurement: synthetic depth, view-angle filtering, projective
TSDF fusion of all cameras and raycast extraction of measurement surfels."""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._accel import njit, prange, select
from .camera import DepthMap
from .model import SurfelSet

MAX_VIEW_ANGLE_DEG = 70.0
Z_NEAR = 0.05
Z_FAR = 5.0


def render_depth(scene, cam, frame=0, noise_sigma=0.0, rng=None):
    """Ray-cast the analytic scene from ``cam``; misses are depth 0."""
    dirs, origin = cam.pixel_rays()
    t, n_world, color, _ = scene.intersect(origin, dirs.reshape(-1, 3), frame)
    shape = (cam.height, cam.width)
    t = t.reshape(shape)
    hit = np.isfinite(t)
    # z-depth: t times the cosine between the ray and the optical axis
    cos_axis = dirs @ cam.rotation[2]
    depth = np.where(hit, t * cos_axis, 0.0)
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        depth = np.where(hit, depth + rng.normal(0.0, noise_sigma, size=shape), 0.0)
    depth = np.where((depth >= Z_NEAR) & (depth <= Z_FAR), depth, 0.0)
    normal = (n_world @ cam.rotation.T).reshape(shape + (3,))
    normal[depth <= 0] = 0.0
    return DepthMap(depth, normal, color.reshape(shape + (3,)))


def view_angle_filter(depth, cam, max_angle_deg=MAX_VIEW_ANGLE_DEG):
    """Invalidate pixels seen at more than ``max_angle_deg`` (angle <= limit is kept)."""
    dirs = cam.pixel_dirs_camera()
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    cos = -np.einsum("ijk,ijk->ij", depth.normal, dirs)
    keep = depth.valid & (cos >= np.cos(np.deg2rad(max_angle_deg)) - 1e-12)
    out = depth.copy()
    out.depth[~keep] = 0.0
    out.normal[~keep] = 0.0
    return out


@dataclass
class TsdfVolume:
    """Voxel grid with samples at ``origin + index * voxel_size``.

    Observations are averaged separately for the two sides of the observed
    surface (``front``: sdf > 0, ``back``: sdf <= 0).  The fused value
    ``tsdf`` is the front average whenever some camera saw the voxel in front
    of its surface, the back average otherwise: a ray that passed through the
    voxel proves it empty, while a "behind" reading only means it was hidden.
    This keeps convex edges from bulging into space another camera saw as free.
    ``weight`` counts all observations.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    trunc: float
    w_max: float = 64.0
    tsdf: np.ndarray = None
    weight: np.ndarray = None
    front: np.ndarray = None
    back: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.tsdf is None:
            self.tsdf = np.full(self.dims, self.trunc, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float32)
        # (value, weight) accumulators per side
        if self.front is None:
            self.front = np.zeros((2,) + self.dims, dtype=np.float32)
        if self.back is None:
            self.back = np.zeros((2,) + self.dims, dtype=np.float32)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size=0.005, trunc_voxels=4.0, w_max=64.0):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, tuple(dims), trunc_voxels * voxel_size, w_max)

    def empty_like(self):
        return TsdfVolume(self.origin, self.voxel_size, self.dims, self.trunc, self.w_max)

    def copy(self):
        return TsdfVolume(self.origin, self.voxel_size, self.dims, self.trunc, self.w_max, self.tsdf.copy(),
                          self.weight.copy(), self.front.copy(), self.back.copy())

    def reset(self, bricks=None, bsize=None):
        """Back to the unobserved state, in place; only ``bricks`` if given."""
        if bricks is None:
            self.tsdf[...] = self.trunc
            for a in (self.weight, self.front, self.back):
                a[...] = 0.0
            return self
        bsize = INTEGRATE_BRICK if bsize is None else bsize
        _reset_bricks(self.tsdf, self.weight, self.front, self.back, np.float32(self.trunc),
                      np.ascontiguousarray(bricks, dtype=np.int64), bsize)
        return self

    def voxel_center(self, idx):
        return self.origin + np.asarray(idx, dtype=float) * self.voxel_size

    def upper(self):
        return self.origin + (np.array(self.dims) - 1) * self.voxel_size


# ---------------------------------------------------------------------------
# integration


@njit
def _sample_depth(depth, uf, vf, gap):
    """Bilinear depth at continuous pixel (uf, vf).

    Falls back to the nearest pixel when one of the four neighbours is
    invalid or their spread exceeds ``gap`` (a depth discontinuity).
    """
    h, w = depth.shape
    u = int(np.floor(uf + 0.5))
    v = int(np.floor(vf + 0.5))
    if u < 0 or u >= w or v < 0 or v >= h:
        return 0.0
    u0 = int(np.floor(uf))
    v0 = int(np.floor(vf))
    if u0 < 0 or v0 < 0 or u0 + 1 >= w or v0 + 1 >= h:
        return depth[v, u]
    a = depth[v0, u0]
    b = depth[v0, u0 + 1]
    c = depth[v0 + 1, u0]
    d = depth[v0 + 1, u0 + 1]
    lo = min(min(a, b), min(c, d))
    hi = max(max(a, b), max(c, d))
    if lo <= 0.0 or hi - lo > gap:
        return depth[v, u]
    fu = uf - u0
    fv = vf - v0
    return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv


def _sample_depth_numpy(depth, uf, vf, gap):
    h, w = depth.shape
    with np.errstate(invalid="ignore"):
        u = np.floor(uf + 0.5)
        v = np.floor(vf + 0.5)
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    near = np.where(inside, depth[np.clip(np.where(inside, v, 0), 0, h - 1).astype(np.int64),
                                  np.clip(np.where(inside, u, 0), 0, w - 1).astype(np.int64)], 0.0)
    with np.errstate(invalid="ignore"):
        u0 = np.floor(np.where(inside, uf, 0.0)).astype(np.int64)
        v0 = np.floor(np.where(inside, vf, 0.0)).astype(np.int64)
    interior = inside & (u0 >= 0) & (v0 >= 0) & (u0 + 1 < w) & (v0 + 1 < h)
    a0 = np.clip(u0, 0, w - 2)
    b0 = np.clip(v0, 0, h - 2)
    a = depth[b0, a0]
    b = depth[b0, a0 + 1]
    c = depth[b0 + 1, a0]
    d = depth[b0 + 1, a0 + 1]
    lo = np.minimum(np.minimum(a, b), np.minimum(c, d))
    hi = np.maximum(np.maximum(a, b), np.maximum(c, d))
    smooth = interior & (lo > 0.0) & (hi - lo <= gap)
    fu = np.where(inside, uf, 0.0) - u0
    fv = np.where(inside, vf, 0.0) - v0
    bil = (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv
    return np.where(smooth, bil, near)


@njit
def _update_voxel(tsdf, weight, front, back, ix, iy, iz, val, w_max):
    if val > 0.0:
        wo = front[1, ix, iy, iz]
        front[0, ix, iy, iz] = (front[0, ix, iy, iz] * wo + val) / (wo + 1.0)
        front[1, ix, iy, iz] = min(wo + 1.0, w_max)
    else:
        wo = back[1, ix, iy, iz]
        back[0, ix, iy, iz] = (back[0, ix, iy, iz] * wo + val) / (wo + 1.0)
        back[1, ix, iy, iz] = min(wo + 1.0, w_max)
    if front[1, ix, iy, iz] > 0.0:
        tsdf[ix, iy, iz] = front[0, ix, iy, iz]
    else:
        tsdf[ix, iy, iz] = back[0, ix, iy, iz]
    weight[ix, iy, iz] = min(weight[ix, iy, iz] + 1.0, w_max)


@njit(parallel=True)
def _integrate_numba(tsdf, weight, front, back, origin, voxel, rot, trans, fx, fy, cx, cy, depth, trunc, w_max,
                     bricks, bsize):
    nx, ny, nz = tsdf.shape
    for b in prange(bricks.shape[0]):
        x0, y0, z0 = bricks[b, 0] * bsize, bricks[b, 1] * bsize, bricks[b, 2] * bsize
        for ix in range(x0, min(x0 + bsize, nx)):
            px = origin[0] + ix * voxel
            for iy in range(y0, min(y0 + bsize, ny)):
                py = origin[1] + iy * voxel
                bx = rot[0, 0] * px + rot[0, 1] * py + trans[0]
                by = rot[1, 0] * px + rot[1, 1] * py + trans[1]
                bz = rot[2, 0] * px + rot[2, 1] * py + trans[2]
                for iz in range(z0, min(z0 + bsize, nz)):
                    pz = origin[2] + iz * voxel
                    x = bx + rot[0, 2] * pz
                    y = by + rot[1, 2] * pz
                    z = bz + rot[2, 2] * pz
                    if z <= 1e-6:
                        continue
                    d = _sample_depth(depth, fx * x / z + cx, fy * y / z + cy, trunc)
                    if d <= 0.0:
                        continue
                    sdf = d - z
                    if sdf < -trunc:
                        continue
                    _update_voxel(tsdf, weight, front, back, ix, iy, iz, min(sdf, trunc), w_max)


def brick_voxels(bricks, bsize, dims):
    """Voxel index triples (N, 3) covered by ``bricks``, clipped to ``dims``."""
    r = np.arange(bsize)
    off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    vox = (np.asarray(bricks, dtype=np.int64)[:, None, :] * bsize + off[None]).reshape(-1, 3)
    ok = np.all(vox < np.asarray(dims), axis=1)
    return vox[ok]


def _integrate_numpy(tsdf, weight, front, back, origin, voxel, rot, trans, fx, fy, cx, cy, depth, trunc, w_max,
                     bricks, bsize):
    vox = brick_voxels(bricks, bsize, tsdf.shape)
    pts = origin + vox * voxel
    pc = pts @ rot.T + trans
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    visible = z > 1e-6
    zs = np.where(visible, z, 1.0)
    d = np.where(visible, _sample_depth_numpy(depth, fx * x / zs + cx, fy * y / zs + cy, trunc), 0.0)
    sdf = d - z
    upd = visible & (d > 0) & (sdf >= -trunc)
    val = np.minimum(sdf, trunc)[upd]
    ix, iy, iz = vox[upd].T
    for acc, side in ((front, val > 0.0), (back, ~(val > 0.0))):
        sx, sy, sz = ix[side], iy[side], iz[side]
        wo = acc[1][sx, sy, sz].astype(np.float64)
        acc[0][sx, sy, sz] = (acc[0][sx, sy, sz] * wo + val[side]) / (wo + 1.0)
        acc[1][sx, sy, sz] = np.minimum(wo + 1.0, w_max)
    tsdf[ix, iy, iz] = np.where(front[1][ix, iy, iz] > 0.0, front[0][ix, iy, iz], back[0][ix, iy, iz])
    weight[ix, iy, iz] = np.minimum(weight[ix, iy, iz] + 1.0, w_max)


_integrate = select(_integrate_numba, _integrate_numpy)


@njit
def _reset_bricks_numba(tsdf, weight, front, back, trunc, bricks, bsize):
    nx, ny, nz = tsdf.shape
    for b in range(bricks.shape[0]):
        x0, y0, z0 = bricks[b, 0] * bsize, bricks[b, 1] * bsize, bricks[b, 2] * bsize
        for ix in range(x0, min(x0 + bsize, nx)):
            for iy in range(y0, min(y0 + bsize, ny)):
                for iz in range(z0, min(z0 + bsize, nz)):
                    tsdf[ix, iy, iz] = trunc
                    weight[ix, iy, iz] = 0.0
                    for c in range(2):
                        front[c, ix, iy, iz] = 0.0
                        back[c, ix, iy, iz] = 0.0


def _reset_bricks_numpy(tsdf, weight, front, back, trunc, bricks, bsize):
    ix, iy, iz = brick_voxels(bricks, bsize, tsdf.shape).T
    tsdf[ix, iy, iz] = trunc
    weight[ix, iy, iz] = 0.0
    front[:, ix, iy, iz] = 0.0
    back[:, ix, iy, iz] = 0.0


_reset_bricks = select(_reset_bricks_numba, _reset_bricks_numpy)

INTEGRATE_BRICK = 4


def all_bricks(dims, bsize=INTEGRATE_BRICK):
    n = [(d + bsize - 1) // bsize for d in dims]
    return np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), axis=-1).reshape(-1, 3).astype(np.int64)


def surface_bricks(vol, depths, cams, bsize=INTEGRATE_BRICK):
    """Bricks within one brick of any observed surface point, over all cameras.

    Voxels farther than the truncation band from every observed point can
    only ever receive ``+trunc`` (or nothing), so they cannot hold a zero
    crossing; skipping them leaves the extracted surface unchanged.
    """
    n = np.array([(d + bsize - 1) // bsize for d in vol.dims])
    mark = np.zeros(tuple(n), dtype=bool)
    for dm, cam in zip(depths, cams):
        if not np.any(dm.valid):
            continue
        pts = dm.points_world(cam)[dm.valid]
        b = np.floor((pts - vol.origin) / (vol.voxel_size * bsize)).astype(np.int64)
        ok = np.all((b >= 0) & (b < n), axis=1)
        b = b[ok]
        mark[b[:, 0], b[:, 1], b[:, 2]] = True
    # one brick of dilation (brick edge >= truncation band)
    if bsize * vol.voxel_size < vol.trunc:
        raise ValueError("integration brick smaller than the truncation band")
    grown = mark.copy()
    for axis in range(3):
        src = grown.copy()
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis], hi[axis] = slice(1, None), slice(None, -1)
        grown[tuple(lo)] |= src[tuple(hi)]
        grown[tuple(hi)] |= src[tuple(lo)]
    return np.argwhere(grown).astype(np.int64)


def tsdf_integrate(vol, depth, cam, inplace=False, bricks=None):
    """Projective integration of one depth map (weight 1 per observation).

    ``bricks`` restricts the update to those voxel bricks (see
    :func:`surface_bricks`); by default the whole grid is visited.
    """
    out = vol if inplace else vol.copy()
    bricks = all_bricks(out.dims) if bricks is None else np.ascontiguousarray(bricks, dtype=np.int64)
    _integrate(out.tsdf, out.weight, out.front, out.back, out.origin, float(out.voxel_size),
               np.ascontiguousarray(cam.rotation), np.ascontiguousarray(cam.translation), float(cam.fx),
               float(cam.fy), float(cam.cx), float(cam.cy), np.ascontiguousarray(depth.depth, dtype=np.float64),
               float(out.trunc), float(out.w_max), bricks, INTEGRATE_BRICK)
    return out


# ---------------------------------------------------------------------------
# raycasting


@njit
def _trilinear(tsdf, weight, origin, voxel, x, y, z):
    """(value, ok); ok is False when any corner voxel is unobserved."""
    nx, ny, nz = tsdf.shape
    gx = (x - origin[0]) / voxel
    gy = (y - origin[1]) / voxel
    gz = (z - origin[2]) / voxel
    ix = int(np.floor(gx))
    iy = int(np.floor(gy))
    iz = int(np.floor(gz))
    if ix < 0 or iy < 0 or iz < 0 or ix + 1 >= nx or iy + 1 >= ny or iz + 1 >= nz:
        return 0.0, False
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    if (weight[ix, iy, iz] <= 0.0 or weight[ix + 1, iy, iz] <= 0.0 or weight[ix, iy + 1, iz] <= 0.0
            or weight[ix, iy, iz + 1] <= 0.0 or weight[ix + 1, iy + 1, iz] <= 0.0
            or weight[ix + 1, iy, iz + 1] <= 0.0 or weight[ix, iy + 1, iz + 1] <= 0.0
            or weight[ix + 1, iy + 1, iz + 1] <= 0.0):
        return 0.0, False
    c00 = tsdf[ix, iy, iz] * (1 - fx) + tsdf[ix + 1, iy, iz] * fx
    c10 = tsdf[ix, iy + 1, iz] * (1 - fx) + tsdf[ix + 1, iy + 1, iz] * fx
    c01 = tsdf[ix, iy, iz + 1] * (1 - fx) + tsdf[ix + 1, iy, iz + 1] * fx
    c11 = tsdf[ix, iy + 1, iz + 1] * (1 - fx) + tsdf[ix + 1, iy + 1, iz + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz, True


BRICK = 4


@njit
def _brick_mask(tsdf, weight, trunc, brick, bricks):
    """Mask over ``brick``^3 bricks; only voxels inside ``bricks`` are scanned."""
    nx, ny, nz = tsdf.shape
    bx = (nx + brick - 1) // brick
    by = (ny + brick - 1) // brick
    bz = (nz + brick - 1) // brick
    mask = np.zeros((bx, by, bz), dtype=np.bool_)
    for b in range(bricks.shape[0]):
        x0, y0, z0 = bricks[b, 0] * brick, bricks[b, 1] * brick, bricks[b, 2] * brick
        for ix in range(x0, min(x0 + brick, nx)):
            for iy in range(y0, min(y0 + brick, ny)):
                for iz in range(z0, min(z0 + brick, nz)):
                    if weight[ix, iy, iz] > 0.0 and tsdf[ix, iy, iz] < trunc:
                        # a sample influences trilinear lookups in the neighbouring cells too
                        for jx in range(max(ix - 1, 0) // brick, min(ix + 1, nx - 1) // brick + 1):
                            for jy in range(max(iy - 1, 0) // brick, min(iy + 1, ny - 1) // brick + 1):
                                for jz in range(max(iz - 1, 0) // brick, min(iz + 1, nz - 1) // brick + 1):
                                    mask[jx, jy, jz] = True
    return mask


def brick_mask(vol, brick=BRICK, bricks=None):
    """Bricks of ``brick``^3 voxels that may contain a zero crossing.

    ``bricks`` limits the scan to those bricks (all observed voxels must lie
    inside them); by default the whole grid is scanned.
    """
    bricks = all_bricks(vol.dims, brick) if bricks is None else np.ascontiguousarray(bricks, dtype=np.int64)
    return _brick_mask(vol.tsdf, vol.weight, np.float32(vol.trunc), brick, bricks)


@njit(parallel=True)
def _raycast_numba(tsdf, weight, origin, voxel, upper, trunc, cam_center, dirs, t_start, mask, brick):
    n = dirs.shape[0]
    hit_t = np.full(n, -1.0)
    normals = np.zeros((n, 3))
    ox, oy, oz = cam_center[0], cam_center[1], cam_center[2]
    for i in prange(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        # slab test against the volume box
        t0 = 0.0
        t1 = 1e9
        for a in range(3):
            da = dirs[i, a]
            if abs(da) < 1e-12:
                if cam_center[a] < origin[a] or cam_center[a] > upper[a]:
                    t1 = -1.0
            else:
                ta = (origin[a] - cam_center[a]) / da
                tb = (upper[a] - cam_center[a]) / da
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        if t_start[i] > t0:
            t0 = t_start[i]
        if t1 <= t0:
            continue
        t = t0
        prev_ok = False
        prev_f = 0.0
        prev_t = t
        bsize = brick * voxel
        skipped = False
        while t <= t1:
            px, py, pz = ox + t * dx, oy + t * dy, oz + t * dz
            jx = int((px - origin[0]) / bsize)
            jy = int((py - origin[1]) / bsize)
            jz = int((pz - origin[2]) / bsize)
            if (0 <= jx < mask.shape[0] and 0 <= jy < mask.shape[1] and 0 <= jz < mask.shape[2]
                    and not mask[jx, jy, jz]):
                # jump to where the ray leaves this empty brick
                te = 1e9
                if dx > 1e-12:
                    te = min(te, (origin[0] + (jx + 1) * bsize - ox) / dx)
                elif dx < -1e-12:
                    te = min(te, (origin[0] + jx * bsize - ox) / dx)
                if dy > 1e-12:
                    te = min(te, (origin[1] + (jy + 1) * bsize - oy) / dy)
                elif dy < -1e-12:
                    te = min(te, (origin[1] + jy * bsize - oy) / dy)
                if dz > 1e-12:
                    te = min(te, (origin[2] + (jz + 1) * bsize - oz) / dz)
                elif dz < -1e-12:
                    te = min(te, (origin[2] + jz * bsize - oz) / dz)
                t = max(te, t) + 1e-7
                skipped = True
                continue
            if skipped:
                # resume one voxel back so the crossing has a predecessor sample
                skipped = False
                t = max(t - voxel, t0)
                prev_ok = False
                px, py, pz = ox + t * dx, oy + t * dy, oz + t * dz
            f, ok = _trilinear(tsdf, weight, origin, voxel, px, py, pz)
            if ok and prev_ok and prev_f > 0.0 and f < 0.0:
                ts = prev_t + (t - prev_t) * prev_f / (prev_f - f)
                px, py, pz = ox + ts * dx, oy + ts * dy, oz + ts * dz
                fxp, ok1 = _trilinear(tsdf, weight, origin, voxel, px + voxel, py, pz)
                fxm, ok2 = _trilinear(tsdf, weight, origin, voxel, px - voxel, py, pz)
                fyp, ok3 = _trilinear(tsdf, weight, origin, voxel, px, py + voxel, pz)
                fym, ok4 = _trilinear(tsdf, weight, origin, voxel, px, py - voxel, pz)
                fzp, ok5 = _trilinear(tsdf, weight, origin, voxel, px, py, pz + voxel)
                fzm, ok6 = _trilinear(tsdf, weight, origin, voxel, px, py, pz - voxel)
                gx = fxp - fxm
                gy = fyp - fym
                gz = fzp - fzm
                gn = np.sqrt(gx * gx + gy * gy + gz * gz)
                if ok1 and ok2 and ok3 and ok4 and ok5 and ok6 and gn > 0.0:
                    hit_t[i] = ts
                    normals[i, 0] = gx / gn
                    normals[i, 1] = gy / gn
                    normals[i, 2] = gz / gn
                break
            if ok and prev_ok and prev_f < 0.0 and f > 0.0:
                break
            prev_ok = ok
            prev_f = f
            prev_t = t
            if ok and f > 0.0:
                t += max(0.8 * f, 0.5 * voxel)
            elif ok:
                t += 0.5 * voxel
            else:
                t += 2.0 * voxel
    return hit_t, normals


def _trilinear_numpy(tsdf, weight, origin, voxel, p):
    g = (p - origin) / voxel
    i0 = np.floor(g).astype(np.int64)
    shape = np.array(tsdf.shape)
    inb = np.all((i0 >= 0) & (i0 + 1 < shape), axis=1)
    i0 = np.where(inb[:, None], i0, 0)
    f = g - i0
    acc = np.zeros(len(p))
    ok = inb.copy()
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                ok &= weight[ix, iy, iz] > 0
                acc += wx * wy * wz * tsdf[ix, iy, iz]
    return acc, ok


def _raycast_numpy(tsdf, weight, origin, voxel, upper, trunc, cam_center, dirs, t_start, mask=None, brick=BRICK):
    n = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (origin - cam_center) / dirs
        tb = (upper - cam_center) / dirs
    t_lo = np.where(np.isnan(np.minimum(ta, tb)), -np.inf, np.minimum(ta, tb)).max(axis=1)
    t_hi = np.where(np.isnan(np.maximum(ta, tb)), np.inf, np.maximum(ta, tb)).min(axis=1)
    t = np.maximum(np.maximum(t_lo, 0.0), t_start)
    active = t_hi > t
    hit_t = np.full(n, -1.0)
    normals = np.zeros((n, 3))
    prev_ok = np.zeros(n, bool)
    prev_f = np.zeros(n)
    prev_t = t.copy()
    while np.any(active):
        idx = np.nonzero(active)[0]
        p = cam_center + t[idx, None] * dirs[idx]
        f, ok = _trilinear_numpy(tsdf, weight, origin, voxel, p)
        cross = ok & prev_ok[idx] & (prev_f[idx] > 0) & (f < 0)
        back = ok & prev_ok[idx] & (prev_f[idx] < 0) & (f > 0)
        if np.any(cross):
            ci = idx[cross]
            ts = prev_t[ci] + (t[ci] - prev_t[ci]) * prev_f[ci] / (prev_f[ci] - f[cross])
            ph = cam_center + ts[:, None] * dirs[ci]
            g = np.zeros((len(ci), 3))
            good = np.ones(len(ci), bool)
            for a in range(3):
                off = np.zeros(3)
                off[a] = voxel
                fp, okp = _trilinear_numpy(tsdf, weight, origin, voxel, ph + off)
                fm, okm = _trilinear_numpy(tsdf, weight, origin, voxel, ph - off)
                good &= okp & okm
                g[:, a] = (fp - fm) / (2 * voxel)
            gn = np.linalg.norm(g, axis=1)
            good &= gn > 0
            hit_t[ci[good]] = ts[good]
            normals[ci[good]] = g[good] / gn[good, None]
        stop = cross | back
        prev_ok[idx] = ok
        prev_f[idx] = f
        prev_t[idx] = t[idx]
        step = np.where(ok & (f > 0), np.maximum(0.8 * f, 0.5 * voxel), np.where(ok, 0.5 * voxel, 2.0 * voxel))
        t[idx] += step
        active[idx[stop]] = False
        active &= t <= t_hi
    return hit_t, normals


_raycast = select(_raycast_numba, _raycast_numpy)


@dataclass
class RaycastMap:
    """Per-camera raycast result in world coordinates (``valid`` marks hits)."""

    vertex: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


def raycast_camera(vol, cam, hint=None, mask=None):
    """Raycast the volume through every pixel of ``cam``.

    ``hint`` (a depth map of the same camera) lets rays start three
    truncation widths in front of the observed depth instead of at the
    volume boundary; pixels without a hint march the whole volume.
    """
    dirs, center = cam.pixel_rays()
    flat = np.ascontiguousarray(dirs.reshape(-1, 3))
    cos_axis = flat @ cam.rotation[2]
    if hint is None:
        t_start = np.full(len(flat), -1.0)
    else:
        d = hint.depth.ravel()
        t_start = np.where(d > 0, d / cos_axis - 3.0 * vol.trunc, -1.0)
    if mask is None:
        mask = brick_mask(vol)
    t, nrm = _raycast(vol.tsdf, vol.weight, vol.origin, float(vol.voxel_size), vol.upper(), float(vol.trunc),
                      np.ascontiguousarray(center), flat, t_start, mask, BRICK)
    valid = t > 0
    vert = center + np.where(valid, t, 0.0)[:, None] * flat
    depth = np.where(valid, t * cos_axis, 0.0)
    shape = (cam.height, cam.width)
    return RaycastMap(vert.reshape(shape + (3,)), nrm.reshape(shape + (3,)), depth.reshape(shape),
                      valid.reshape(shape))


def _surfel_radius(depth, cos_view, focal):
    return depth / focal / np.maximum(0.3, cos_view)


def raycast_extract(vol, cams, colors=None, frame=0, merge_radius=None, return_maps=False, hints=None,
                    bricks=None):
    """Zero-crossing surfels from every camera, cross-camera duplicates merged.

    A hit from camera ``k`` merges into the nearest surfel created by an
    earlier camera if it lies within ``merge_radius`` (default: voxel size)
    and that surfel has not already absorbed a hit from camera ``k``.
    Returns the merged :class:`SurfelSet`, and with ``return_maps`` also the
    per-camera :class:`RaycastMap` list and per-pixel surfel index maps.
    """
    merge_radius = vol.voxel_size if merge_radius is None else merge_radius
    hints = [None] * len(cams) if hints is None else hints
    mask = brick_mask(vol, bricks=bricks)
    maps = [raycast_camera(vol, cam, h, mask) for cam, h in zip(cams, hints)]
    sum_pos, sum_nrm, sum_col, sum_rad, count = [], [], [], [], []
    index_maps = []
    n_total = 0
    for k, (cam, m) in enumerate(zip(cams, maps)):
        idx_map = np.full((cam.height, cam.width), -1, dtype=np.int64)
        pix = np.nonzero(m.valid.ravel())[0]
        pos = m.vertex.reshape(-1, 3)[pix]
        nrm = m.normal.reshape(-1, 3)[pix]
        dirs, center = cam.pixel_rays()
        view = dirs.reshape(-1, 3)[pix]
        cos_v = np.clip(-np.einsum("ij,ij->i", nrm, view), 0.0, 1.0)
        rad = _surfel_radius(m.depth.ravel()[pix], cos_v, cam.focal)
        col = colors[k].reshape(-1, 3)[pix] if colors is not None else np.full((len(pix), 3), 0.5)
        assign = np.full(len(pix), -1, dtype=np.int64)
        if n_total > 0 and len(pix):
            reps = np.concatenate(sum_pos) / np.concatenate(count)[:, None]
            tree = cKDTree(reps)
            dist, near = tree.query(pos, distance_upper_bound=merge_radius)
            # closest claimant wins each earlier surfel
            order = np.argsort(dist, kind="stable")
            order = order[np.isfinite(dist[order])]
            _, first = np.unique(near[order], return_index=True)
            win = order[first]
            assign[win] = near[win]
        new = assign < 0
        new_ids = n_total + np.arange(int(new.sum()))
        assign[new] = new_ids
        if np.any(~new):
            all_pos = np.concatenate(sum_pos)
            all_nrm = np.concatenate(sum_nrm)
            all_col = np.concatenate(sum_col)
            all_rad = np.concatenate(sum_rad)
            all_cnt = np.concatenate(count)
            old = assign[~new]
            all_pos[old] += pos[~new]
            all_nrm[old] += nrm[~new]
            all_col[old] += col[~new]
            all_rad[old] += rad[~new]
            all_cnt[old] += 1
            sum_pos, sum_nrm, sum_col, sum_rad, count = [all_pos], [all_nrm], [all_col], [all_rad], [all_cnt]
        sum_pos.append(pos[new])
        sum_nrm.append(nrm[new])
        sum_col.append(col[new])
        sum_rad.append(rad[new])
        count.append(np.ones(int(new.sum())))
        n_total += int(new.sum())
        idx_map.ravel()[pix] = assign
        index_maps.append(idx_map)
    if n_total == 0:
        surfels = SurfelSet.empty()
    else:
        cnt = np.concatenate(count)[:, None]
        nrm = np.concatenate(sum_nrm)
        nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
        surfels = SurfelSet(np.concatenate(sum_pos) / cnt, nrm, np.concatenate(sum_col) / cnt,
                            np.concatenate(sum_rad)[:, None].ravel() / cnt.ravel(), np.ones(n_total),
                            np.full(n_total, frame), np.full(n_total, -1))
    if return_maps:
        return surfels, maps, index_maps
    return surfels


@dataclass
class MeasurementFrame:
    """Fused measurement of one frame.

    ``depth`` holds the per-camera depth maps of the fused surface (raycast);
    ``index_maps`` map each pixel to its surfel in ``surfels`` (-1 if none).
    """

    surfels: SurfelSet
    depth: list
    index_maps: list
    frame: int = 0
    raw_depth: list = field(default_factory=list)


def capture(scene, cams, frame, noise_sigma=0.0, rng=None, max_view_angle=MAX_VIEW_ANGLE_DEG):
    """Synthetic sensor: view-angle filtered depth maps and colour images per camera."""
    raw, colors = [], []
    for cam in cams:
        dm = render_depth(scene, cam, frame, noise_sigma, rng)
        colors.append(dm.color)
        raw.append(view_angle_filter(dm, cam, max_view_angle))
    return raw, colors


class FusionBuffer:
    """Reusable TSDF volume; each acquire clears only what the last frame touched."""

    def __init__(self, template):
        self.vol = template.empty_like()
        self.bricks = None

    def acquire(self, bricks):
        if self.bricks is not None:
            self.vol.reset(self.bricks)
        self.bricks = bricks
        return self.vol


def fuse_depth(raw, colors, cams, vol_template, frame=0, buffer=None):
    """TSDF fusion of captured depth maps and raycast extraction of surfels.

    ``buffer`` (a :class:`FusionBuffer`) avoids allocating a fresh volume per
    frame; the result is the same either way.
    """
    bricks = surface_bricks(vol_template, raw, cams)
    vol = vol_template.empty_like() if buffer is None else buffer.acquire(bricks)
    for cam, dm in zip(cams, raw):
        tsdf_integrate(vol, dm, cam, inplace=True, bricks=bricks)
    surfels, maps, index_maps = raycast_extract(vol, cams, colors, frame=frame, return_maps=True, hints=raw,
                                                bricks=bricks)
    depth = []
    for cam, m in zip(cams, maps):
        n_cam = m.normal @ cam.rotation.T
        depth.append(DepthMap(m.depth, np.where(m.valid[..., None], n_cam, 0.0)))
    return MeasurementFrame(surfels, depth, index_maps, frame, raw)


def measure(scene, cams, frame, vol_template, noise_sigma=0.0, rng=None, max_view_angle=MAX_VIEW_ANGLE_DEG):
    """Render, filter, fuse and extract the measurement for ``frame``."""
    raw, colors = capture(scene, cams, frame, noise_sigma, rng, max_view_angle)
    return fuse_depth(raw, colors, cams, vol_template, frame)
