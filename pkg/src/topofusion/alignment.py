"""Non-rigid alignment of the model to the fused measurement.

The warp is estimated by damped Gauss-Newton on

    E_total = sum_pairs (n_M . (W(s) v - v_M))^2 + lam * sum_edges |T_j p_j - T_i p_j|^2

with a 6-dof twist per node, applied on the left of the node's current dual
quaternion and centred at the node position.  Jacobians are exact (they
include the blend normalisation), the normal equations are solved with
block-Jacobi preconditioned CG on the 6x6 block sparse matrix J^T J, which
is assembled directly from the per-residual Jacobian blocks.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from . import dq as dqm
from ._accel import njit, prange, select
from .errors import SolverDiverged
from .measurement import Z_NEAR
from .model import WarpField
from .warp import blend_batch_numpy, surfel_neighbor_index, warp_graph_nodes, warp_surfels


@dataclass
class SolverConfig:
    lam: float = 0.1
    max_iterations: int = 8
    mu: float = 1e-4
    tol: float = 1e-4
    sigma: int = 2
    gamma_distance: float = 0.03
    gamma_normal: float = float(np.cos(np.deg2rad(30.0)))
    rounds: int = 2
    max_retries: int = 3
    cg_tol: float = 1e-3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if not 0 < self.cg_tol < 1:
            raise ValueError("cg_tol must be in (0, 1)")


@dataclass
class GeometryMap:
    """Per-camera rendering of a surfel set: nearest surfel index and its depth."""

    index: np.ndarray
    depth: np.ndarray
    scale: int = 1


@dataclass
class Correspondences:
    """Parallel arrays of (geometry surfel, measurement surfel, camera)."""

    geo: np.ndarray
    meas: np.ndarray
    cam: np.ndarray

    def __len__(self):
        return len(self.geo)

    @classmethod
    def empty(cls):
        z = np.zeros(0, np.int64)
        return cls(z, z.copy(), z.copy())


# ---------------------------------------------------------------------------
# rendering


@njit
def _zbuffer_numba(pix, z, n_pix):
    index = np.full(n_pix, -1, dtype=np.int64)
    depth = np.zeros(n_pix)
    for i in range(pix.shape[0]):
        p = pix[i]
        if p < 0:
            continue
        if index[p] < 0 or z[i] < depth[p]:
            index[p] = i
            depth[p] = z[i]
    return index, depth


def _zbuffer_numpy(pix, z, n_pix):
    index = np.full(n_pix, -1, dtype=np.int64)
    depth = np.zeros(n_pix)
    ok = np.nonzero(pix >= 0)[0]
    if len(ok) == 0:
        return index, depth
    order = ok[np.lexsort((ok, z[ok], pix[ok]))]
    p_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = p_sorted[1:] != p_sorted[:-1]
    win = order[first]
    index[pix[win]] = win
    depth[pix[win]] = z[win]
    return index, depth


_zbuffer = select(_zbuffer_numba, _zbuffer_numpy)


def render_index_map(pos, normal, cam, scale=1, cull=True):
    """Splat surfel centres into a ``scale``-times supersampled index map.

    A surfel lands in sub-pixel ``floor((u + 0.5) * scale)``; the nearest one
    (smallest camera z, ties to the lower index) keeps the pixel.  Surfels
    behind the camera, and with ``cull`` those facing away, are skipped.
    """
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    h, w = cam.height * scale, cam.width * scale
    if len(pos) == 0:
        return GeometryMap(np.full((h, w), -1, np.int64), np.zeros((h, w)), scale)
    u, v, z = cam.project(pos)
    ok = z > Z_NEAR
    if cull and normal is not None:
        ok &= np.einsum("ij,ij->i", np.asarray(normal, dtype=float).reshape(-1, 3), pos - cam.center) < 0.0
    with np.errstate(invalid="ignore"):
        px = np.floor((u + 0.5) * scale)
        py = np.floor((v + 0.5) * scale)
    ok &= (px >= 0) & (px < w) & (py >= 0) & (py < h)
    pix = np.where(ok, np.where(ok, py, 0) * w + np.where(ok, px, 0), -1).astype(np.int64)
    index, depth = _zbuffer(pix, np.ascontiguousarray(z, dtype=float), h * w)
    return GeometryMap(index.reshape(h, w), depth.reshape(h, w), scale)


def render_geometry_maps(surfels, cams, scale=1):
    """Index/depth maps of ``surfels`` for every camera at depth resolution."""
    return [render_index_map(surfels.pos, surfels.normal, cam, scale) for cam in cams]


# ---------------------------------------------------------------------------
# correspondences


@njit
def _match_window_numba(geo_index, meas_index, geo_pos, geo_nrm, meas_pos, meas_nrm, sigma, max_d2, min_dot):
    h, w = geo_index.shape
    out_g = np.empty(h * w, dtype=np.int64)
    out_m = np.empty(h * w, dtype=np.int64)
    n = 0
    for y in range(h):
        for x in range(w):
            g = geo_index[y, x]
            if g < 0:
                continue
            best = -1
            bd = np.inf
            for yy in range(max(y - sigma, 0), min(y + sigma + 1, h)):
                for xx in range(max(x - sigma, 0), min(x + sigma + 1, w)):
                    m = meas_index[yy, xx]
                    if m < 0:
                        continue
                    dot = (geo_nrm[g, 0] * meas_nrm[m, 0] + geo_nrm[g, 1] * meas_nrm[m, 1]
                           + geo_nrm[g, 2] * meas_nrm[m, 2])
                    if dot < min_dot:
                        continue
                    dx = geo_pos[g, 0] - meas_pos[m, 0]
                    dy = geo_pos[g, 1] - meas_pos[m, 1]
                    dz = geo_pos[g, 2] - meas_pos[m, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= max_d2 and d2 < bd:
                        bd = d2
                        best = m
            if best >= 0:
                out_g[n] = g
                out_m[n] = best
                n += 1
    return out_g[:n], out_m[:n]


def _match_window_numpy(geo_index, meas_index, geo_pos, geo_nrm, meas_pos, meas_nrm, sigma, max_d2, min_dot):
    h, w = geo_index.shape
    ys, xs = np.nonzero(geo_index >= 0)
    g = geo_index[ys, xs]
    best = np.full(len(g), -1, dtype=np.int64)
    bd = np.full(len(g), np.inf)
    for oy in range(-sigma, sigma + 1):
        for ox in range(-sigma, sigma + 1):
            yy, xx = ys + oy, xs + ox
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            m = np.full(len(g), -1, dtype=np.int64)
            m[inside] = meas_index[yy[inside], xx[inside]]
            ok = m >= 0
            ms = np.where(ok, m, 0)
            dot = np.einsum("ij,ij->i", geo_nrm[g], meas_nrm[ms])
            diff = geo_pos[g] - meas_pos[ms]
            d2 = np.einsum("ij,ij->i", diff, diff)
            better = ok & (dot >= min_dot) & (d2 <= max_d2) & (d2 < bd)
            best[better] = m[better]
            bd[better] = d2[better]
    keep = best >= 0
    return g[keep], best[keep]


_match_window = select(_match_window_numba, _match_window_numpy)

# The numpy scan visits window offsets row by row exactly like the loop
# version, so both keep the first minimum in the same order.


def find_correspondences(geo_maps, meas_index_maps, geometry, measurement, cfg):
    """Pairs of rendered geometry pixels with measurement surfels.

    For every valid pixel of a geometry map the (2 sigma + 1)^2 window of the
    measurement index map is searched; candidates need a normal dot of at
    least ``gamma_normal`` and a distance of at most ``gamma_distance``, the
    nearest survivor wins.  A surfel may pair once per camera.
    """
    gs, ms, cs = [], [], []
    for k, (gm, mi) in enumerate(zip(geo_maps, meas_index_maps)):
        if gm.index.shape != mi.shape:
            raise ValueError("geometry and measurement maps differ in resolution")
        g, m = _match_window(np.ascontiguousarray(gm.index), np.ascontiguousarray(mi), geometry.pos,
                             geometry.normal, measurement.pos, measurement.normal, int(cfg.sigma),
                             float(cfg.gamma_distance) ** 2, float(cfg.gamma_normal))
        gs.append(g)
        ms.append(m)
        cs.append(np.full(len(g), k, dtype=np.int64))
    if not gs:
        return Correspondences.empty()
    return Correspondences(np.concatenate(gs), np.concatenate(ms), np.concatenate(cs))


# ---------------------------------------------------------------------------
# residuals and Jacobians


@njit
def _rt_apply(b, boff, g, goff, out, ooff, scale):
    """out[ooff:ooff+4] += scale * R(b[boff:boff+4])^T g[goff:goff+4]."""
    b0, b1, b2, b3 = b[boff], b[boff + 1], b[boff + 2], b[boff + 3]
    g0, g1, g2, g3 = g[goff], g[goff + 1], g[goff + 2], g[goff + 3]
    out[ooff] += scale * (b0 * g0 + b1 * g1 + b2 * g2 + b3 * g3)
    out[ooff + 1] += scale * (-b1 * g0 + b0 * g1 - b3 * g2 + b2 * g3)
    out[ooff + 2] += scale * (-b2 * g0 + b3 * g1 + b0 * g2 - b1 * g3)
    out[ooff + 3] += scale * (-b3 * g0 - b2 * g1 + b1 * g2 + b0 * g3)


@njit
def _normal_point_row(b, v, nm, row):
    """row = nm^T d(transform(b) v)/db, the blend normalisation included."""
    r0, w0, w1, w2 = b[0], b[1], b[2], b[3]
    d0, e0, e1, e2 = b[4], b[5], b[6], b[7]
    v0, v1, v2 = v[0], v[1], v[2]
    n2 = r0 * r0 + w0 * w0 + w1 * w1 + w2 * w2
    wv = w0 * v0 + w1 * v1 + w2 * v2
    ww = w0 * w0 + w1 * w1 + w2 * w2
    # w x v, w x e
    c0 = w1 * v2 - w2 * v1
    c1 = w2 * v0 - w0 * v2
    c2 = w0 * v1 - w1 * v0
    x0 = w1 * e2 - w2 * e1
    x1 = w2 * e0 - w0 * e2
    x2 = w0 * e1 - w1 * e0
    f0 = ((r0 * r0 - ww) * v0 + 2.0 * wv * w0 + 2.0 * r0 * c0 + 2.0 * (r0 * e0 - d0 * w0 + x0)) / n2
    f1 = ((r0 * r0 - ww) * v1 + 2.0 * wv * w1 + 2.0 * r0 * c1 + 2.0 * (r0 * e1 - d0 * w1 + x1)) / n2
    f2 = ((r0 * r0 - ww) * v2 + 2.0 * wv * w2 + 2.0 * r0 * c2 + 2.0 * (r0 * e2 - d0 * w2 + x2)) / n2
    a0, a1, a2 = nm[0], nm[1], nm[2]
    nf = a0 * f0 + a1 * f1 + a2 * f2
    na_v = a0 * v0 + a1 * v1 + a2 * v2
    na_w = a0 * w0 + a1 * w1 + a2 * w2
    # column r0
    row[0] = (2.0 * r0 * na_v + 2.0 * (a0 * c0 + a1 * c1 + a2 * c2) + 2.0 * (a0 * e0 + a1 * e1 + a2 * e2)) / n2 \
        - 2.0 * nf * r0 / n2
    # columns w: -2 (n.v) w + 2 (w.v) n + 2 (n.w) v - 2 r0 n^T[v]x - 2 d0 n - 2 n^T[e]x
    # n^T [x]_x = (n x x)^T
    vn0 = a1 * v2 - a2 * v1
    vn1 = a2 * v0 - a0 * v2
    vn2 = a0 * v1 - a1 * v0
    en0 = a1 * e2 - a2 * e1
    en1 = a2 * e0 - a0 * e2
    en2 = a0 * e1 - a1 * e0
    row[1] = (-2.0 * na_v * w0 + 2.0 * wv * a0 + 2.0 * na_w * v0 - 2.0 * r0 * vn0 - 2.0 * d0 * a0 - 2.0 * en0) / n2 \
        - 2.0 * nf * w0 / n2
    row[2] = (-2.0 * na_v * w1 + 2.0 * wv * a1 + 2.0 * na_w * v1 - 2.0 * r0 * vn1 - 2.0 * d0 * a1 - 2.0 * en1) / n2 \
        - 2.0 * nf * w1 / n2
    row[3] = (-2.0 * na_v * w2 + 2.0 * wv * a2 + 2.0 * na_w * v2 - 2.0 * r0 * vn2 - 2.0 * d0 * a2 - 2.0 * en2) / n2 \
        - 2.0 * nf * w2 / n2
    # dual columns: 2/n2 * n^T [-w | r0 I + [w]x]
    wn0 = a1 * w2 - a2 * w1
    wn1 = a2 * w0 - a0 * w2
    wn2 = a0 * w1 - a1 * w0
    row[4] = -2.0 * na_w / n2
    row[5] = 2.0 * (r0 * a0 + wn0) / n2
    row[6] = 2.0 * (r0 * a1 + wn1) / n2
    row[7] = 2.0 * (r0 * a2 + wn2) / n2
    return nf


@njit(parallel=True)
def _depth_terms_numba(v, nbr, vm, nm, node_pos, node_delta, node_dq, want_jac):
    n, kp = nbr.shape
    res = np.empty(n)
    jac = np.zeros((n, kp, 6))
    for i in prange(n):
        b = np.zeros(8)
        coef = np.zeros(kp)
        first = nbr[i, 0]
        tw = 0.0
        for j in range(kp):
            c = nbr[i, j]
            if c < 0:
                continue
            dx = v[i, 0] - node_pos[c, 0]
            dy = v[i, 1] - node_pos[c, 1]
            dz = v[i, 2] - node_pos[c, 2]
            w = np.exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * node_delta[c] * node_delta[c]))
            dot = 0.0
            for m in range(4):
                dot += node_dq[c, m] * node_dq[first, m]
            if dot < 0.0:
                w = -w
            coef[j] = w
            tw += abs(w)
            for m in range(8):
                b[m] += w * node_dq[c, m]
        if tw == 0.0:
            coef[0] = 1.0
            for m in range(8):
                b[m] = node_dq[first, m]
        row = np.empty(8)
        nf = _normal_point_row(b, v[i], nm[i], row)
        res[i] = nf - (nm[i, 0] * vm[i, 0] + nm[i, 1] * vm[i, 1] + nm[i, 2] * vm[i, 2])
        if not want_jac:
            continue
        h = np.zeros(8)
        for j in range(kp):
            c = nbr[i, j]
            if c < 0 or coef[j] == 0.0:
                continue
            for m in range(8):
                h[m] = 0.0
            _rt_apply(node_dq[c], 0, row, 0, h, 0, coef[j])
            _rt_apply(node_dq[c], 4, row, 4, h, 0, coef[j])
            _rt_apply(node_dq[c], 0, row, 4, h, 4, coef[j])
            px, py, pz = node_pos[c, 0], node_pos[c, 1], node_pos[c, 2]
            # theta: 0.5 h_r + 0.5 (h_d x p);  t: 0.5 h_d
            jac[i, j, 0] = 0.5 * h[1] + 0.5 * (h[6] * pz - h[7] * py)
            jac[i, j, 1] = 0.5 * h[2] + 0.5 * (h[7] * px - h[5] * pz)
            jac[i, j, 2] = 0.5 * h[3] + 0.5 * (h[5] * py - h[6] * px)
            jac[i, j, 3] = 0.5 * h[5]
            jac[i, j, 4] = 0.5 * h[6]
            jac[i, j, 5] = 0.5 * h[7]
    return res, jac


def _right_matrix_batch(q):
    """Batched :func:`dq.dq_right_matrix`: (N, 8) -> (N, 8, 8)."""
    def rq(b):
        b0, b1, b2, b3 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
        return np.stack([
            np.stack([b0, -b1, -b2, -b3], -1),
            np.stack([b1, b0, b3, -b2], -1),
            np.stack([b2, -b3, b0, b1], -1),
            np.stack([b3, b2, -b1, b0], -1),
        ], axis=1)

    m = np.zeros((len(q), 8, 8))
    rr = rq(q[:, :4])
    m[:, :4, :4] = rr
    m[:, 4:, :4] = rq(q[:, 4:])
    m[:, 4:, 4:] = rr
    return m


def twist_derivative(center):
    """d(twist dq)/d(theta, t) at zero, shape (..., 8, 6)."""
    center = np.asarray(center, dtype=float)
    d = np.zeros(center.shape[:-1] + (8, 6))
    d[..., 1:4, 0:3] = 0.5 * np.eye(3)
    d[..., 5:8, 0:3] = 0.5 * dqm.skew_batch(center)
    d[..., 5:8, 3:6] = 0.5 * np.eye(3)
    return d


def _depth_terms_numpy(v, nbr, vm, nm, node_pos, node_delta, node_dq, want_jac):
    n, kp = nbr.shape
    b = blend_batch_numpy(v, nbr, node_pos, node_delta, node_dq)
    f = dqm.dq_transform_points(b, v)
    res = np.einsum("ij,ij->i", nm, f - vm)
    jac = np.zeros((n, kp, 6))
    if not want_jac:
        return res, jac
    valid = nbr >= 0
    safe = np.where(valid, nbr, 0)
    q = node_dq[safe]
    diff = v[:, None, :] - node_pos[safe]
    w = np.where(valid, np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / (2.0 * node_delta[safe] ** 2)), 0.0)
    sign = np.where(np.einsum("ijk,ik->ij", q[:, :, :4], q[:, 0, :4]) < 0.0, -1.0, 1.0)
    coef = w * sign
    dead = ~np.any(w > 0.0, axis=1)
    coef[dead] = 0.0
    coef[dead, 0] = 1.0
    row = np.einsum("ni,nij->nj", nm, dqm.point_jacobian_batch(b, v))
    mr = _right_matrix_batch(q.reshape(-1, 8)).reshape(n, kp, 8, 8)
    dtw = twist_derivative(node_pos[safe])
    jac = np.einsum("nj,nkjl,nklm->nkm", row, mr, dtw) * coef[:, :, None]
    return res, jac


depth_terms = select(_depth_terms_numba, _depth_terms_numpy)


def reg_edges(graph):
    """Directed (j, i) index pairs: i in kNN(j)."""
    kidx = graph.knn_index()
    src = np.repeat(np.arange(len(graph)), kidx.shape[1])
    dst = kidx.reshape(-1)
    ok = dst >= 0
    return np.stack([src[ok], dst[ok]], axis=1).astype(np.int64)


@njit
def _reg_terms_numba(edges, node_pos, rot, trans, want_jac):
    m = edges.shape[0]
    res = np.empty((m, 3))
    jac = np.zeros((m if want_jac else 0, 3, 12))
    for e in range(m):
        j, i = edges[e, 0], edges[e, 1]
        p0, p1, p2 = node_pos[j, 0], node_pos[j, 1], node_pos[j, 2]
        x0 = rot[j, 0, 0] * p0 + rot[j, 0, 1] * p1 + rot[j, 0, 2] * p2 + trans[j, 0]
        x1 = rot[j, 1, 0] * p0 + rot[j, 1, 1] * p1 + rot[j, 1, 2] * p2 + trans[j, 1]
        x2 = rot[j, 2, 0] * p0 + rot[j, 2, 1] * p1 + rot[j, 2, 2] * p2 + trans[j, 2]
        y0 = rot[i, 0, 0] * p0 + rot[i, 0, 1] * p1 + rot[i, 0, 2] * p2 + trans[i, 0]
        y1 = rot[i, 1, 0] * p0 + rot[i, 1, 1] * p1 + rot[i, 1, 2] * p2 + trans[i, 1]
        y2 = rot[i, 2, 0] * p0 + rot[i, 2, 1] * p1 + rot[i, 2, 2] * p2 + trans[i, 2]
        res[e, 0] = x0 - y0
        res[e, 1] = x1 - y1
        res[e, 2] = x2 - y2
        if not want_jac:
            continue
        # -[x - p_j]_x for node j, +[y - p_i]_x for node i
        u0, u1, u2 = x0 - p0, x1 - p1, x2 - p2
        w0, w1, w2 = y0 - node_pos[i, 0], y1 - node_pos[i, 1], y2 - node_pos[i, 2]
        jac[e, 0, 1] = u2
        jac[e, 0, 2] = -u1
        jac[e, 1, 0] = -u2
        jac[e, 1, 2] = u0
        jac[e, 2, 0] = u1
        jac[e, 2, 1] = -u0
        jac[e, 0, 7] = -w2
        jac[e, 0, 8] = w1
        jac[e, 1, 6] = w2
        jac[e, 1, 8] = -w0
        jac[e, 2, 6] = -w1
        jac[e, 2, 7] = w0
        for a in range(3):
            jac[e, a, 3 + a] = 1.0
            jac[e, a, 9 + a] = -1.0
    return res, jac


def _reg_terms_numpy(edges, node_pos, rot, trans, want_jac):
    j, i = edges[:, 0], edges[:, 1]
    pj = node_pos[j]
    x = np.einsum("eab,eb->ea", rot[j], pj) + trans[j]
    y = np.einsum("eab,eb->ea", rot[i], pj) + trans[i]
    res = x - y
    jac = np.zeros((len(edges) if want_jac else 0, 3, 12))
    if want_jac:
        jac[:, :, 0:3] = -dqm.skew_batch(x - pj)
        jac[:, :, 3:6] = np.eye(3)
        jac[:, :, 6:9] = dqm.skew_batch(y - node_pos[i])
        jac[:, :, 9:12] = -np.eye(3)
    return res, jac


_reg_kernel = select(_reg_terms_numba, _reg_terms_numpy)


def reg_terms(edges, node_pos, node_dq, want_jac=True):
    """Residuals T_j p_j - T_i p_j (E, 3) and their (E, 3, 12) Jacobians.

    The 12 columns are the twist of node j followed by the twist of node i.
    """
    edges = np.ascontiguousarray(edges, dtype=np.int64).reshape(-1, 2)
    rot = np.ascontiguousarray(dqm.dq_rotation(node_dq)).reshape(-1, 3, 3)
    trans = np.ascontiguousarray(dqm.dq_translation(node_dq)).reshape(-1, 3)
    res, jac = _reg_kernel(edges, np.ascontiguousarray(node_pos, dtype=float), rot, trans, bool(want_jac))
    return res, (jac if want_jac else None)


@dataclass
class AlignProblem:
    """Fixed data of one Gauss-Newton solve."""

    v: np.ndarray          # geometry positions of the paired surfels
    nbr: np.ndarray        # their blend neighbours (node rows)
    vm: np.ndarray         # paired measurement positions
    nm: np.ndarray         # paired measurement normals
    node_pos: np.ndarray
    node_delta: np.ndarray
    edges: np.ndarray
    lam: float

    @property
    def n_nodes(self):
        return len(self.node_pos)

    def residuals(self, node_dq):
        rd, _ = depth_terms(self.v, self.nbr, self.vm, self.nm, self.node_pos, self.node_delta,
                            np.ascontiguousarray(node_dq), False)
        rr, _ = reg_terms(self.edges, self.node_pos, node_dq, want_jac=False)
        return np.concatenate([rd, np.sqrt(self.lam) * rr.reshape(-1)])

    def energy(self, node_dq):
        rd, _ = depth_terms(self.v, self.nbr, self.vm, self.nm, self.node_pos, self.node_delta,
                            np.ascontiguousarray(node_dq), False)
        rr, _ = reg_terms(self.edges, self.node_pos, node_dq, want_jac=False)
        return self.terms_energy((rd, None, rr, None))

    def linearize(self, node_dq):
        """Residual vector and sparse Jacobian w.r.t. the stacked node twists."""
        node_dq = np.ascontiguousarray(node_dq)
        rd, jd = depth_terms(self.v, self.nbr, self.vm, self.nm, self.node_pos, self.node_delta, node_dq, True)
        rr, jr = reg_terms(self.edges, self.node_pos, node_dq)
        s = np.sqrt(self.lam)
        n_d = len(rd)
        n_e = len(self.edges)
        kp = self.nbr.shape[1] if self.nbr.ndim == 2 else 0
        # depth rows
        d_rows = np.repeat(np.arange(n_d), kp * 6)
        d_cols = (self.nbr[:, :, None] * 6 + np.arange(6)).reshape(-1)
        d_vals = jd.reshape(-1)
        keep = (np.repeat(self.nbr.reshape(-1), 6) >= 0) & (d_vals != 0.0)
        # regularisation rows
        node_cols = np.concatenate([self.edges[:, :1] * 6 + np.arange(6), self.edges[:, 1:] * 6 + np.arange(6)],
                                   axis=1)
        r_rows = n_d + np.repeat(np.arange(3 * n_e), 12)
        r_cols = np.repeat(node_cols, 3, axis=0).reshape(-1)
        r_vals = s * jr.reshape(-1)
        rows = np.concatenate([d_rows[keep], r_rows])
        cols = np.concatenate([d_cols[keep], r_cols])
        vals = np.concatenate([d_vals[keep], r_vals])
        jac = sp.csr_matrix((vals, (rows, cols)), shape=(n_d + 3 * n_e, 6 * self.n_nodes))
        res = np.concatenate([rd, s * rr.reshape(-1)])
        return res, jac

    def terms(self, node_dq):
        """Residuals and Jacobians of both terms: ``(rd, jd, rr, jr)``."""
        node_dq = np.ascontiguousarray(node_dq)
        rd, jd = depth_terms(self.v, self.nbr, self.vm, self.nm, self.node_pos, self.node_delta, node_dq, True)
        rr, jr = reg_terms(self.edges, self.node_pos, node_dq)
        if jr is None or len(self.edges) == 0:
            jr = np.zeros((0, 3, 12))
            rr = np.zeros((0, 3))
        return rd, jd, rr, jr

    def terms_energy(self, terms):
        rd, _, rr, _ = terms
        return float(rd @ rd + self.lam * np.sum(rr * rr))

    def normal_equations(self, node_dq, pattern, terms=None):
        """Blocks of ``J^T J`` (pattern order) and ``J^T r`` as (n, 6)."""
        rd, jd, rr, jr = self.terms(node_dq) if terms is None else terms
        return assemble_normal_equations(np.ascontiguousarray(jd), rd, self.nbr, pattern.d_slot,
                                         np.ascontiguousarray(jr), np.ascontiguousarray(rr), self.edges,
                                         pattern.e_slot, float(self.lam), self.n_nodes, pattern.n_blocks)


# ---------------------------------------------------------------------------
# block normal equations


@dataclass
class BlockPattern:
    """Block sparsity of ``J^T J`` over nodes (both triangles, CSR order).

    ``d_slot[p, x, y]`` is the block fed by depth pair ``p`` through its
    neighbours ``x`` and ``y`` (-1 for padding); ``e_slot[e, x, y]`` the same
    for regulariser edge ``e`` with ``x, y`` in (j, i).
    """

    n: int
    indptr: np.ndarray
    cols: np.ndarray
    diag: np.ndarray
    d_slot: np.ndarray
    e_slot: np.ndarray

    @property
    def n_blocks(self):
        return len(self.cols)


@njit
def _block_pattern_numba(nbr, edges, n):
    slot = np.full((n, n), -1, dtype=np.int32)
    for i in range(n):
        slot[i, i] = 0
    p, kp = nbr.shape
    for q in range(p):
        for x in range(kp):
            a = nbr[q, x]
            if a < 0:
                continue
            for y in range(kp):
                b = nbr[q, y]
                if b >= 0:
                    slot[a, b] = 0
    for e in range(edges.shape[0]):
        slot[edges[e, 0], edges[e, 1]] = 0
        slot[edges[e, 1], edges[e, 0]] = 0
    indptr = np.zeros(n + 1, dtype=np.int64)
    cnt = 0
    for i in range(n):
        for j in range(n):
            if slot[i, j] == 0:
                cnt += 1
        indptr[i + 1] = cnt
    cols = np.empty(cnt, dtype=np.int64)
    k = 0
    for i in range(n):
        for j in range(n):
            if slot[i, j] == 0:
                slot[i, j] = k
                cols[k] = j
                k += 1
    diag = np.empty(n, dtype=np.int64)
    for i in range(n):
        diag[i] = slot[i, i]
    d_slot = np.full((p, kp, kp), -1, dtype=np.int64)
    for q in range(p):
        for x in range(kp):
            a = nbr[q, x]
            if a < 0:
                continue
            for y in range(kp):
                b = nbr[q, y]
                if b >= 0:
                    d_slot[q, x, y] = slot[a, b]
    e_slot = np.empty((edges.shape[0], 2, 2), dtype=np.int64)
    for e in range(edges.shape[0]):
        for x in range(2):
            for y in range(2):
                e_slot[e, x, y] = slot[edges[e, x], edges[e, y]]
    return indptr, cols, diag, d_slot, e_slot


def _block_pattern_numpy(nbr, edges, n):
    p, kp = nbr.shape
    # dense node-pair mask; row-major nonzero order is CSR order
    mark = np.zeros((n, n), dtype=bool)
    mark[np.arange(n), np.arange(n)] = True
    ok = nbr >= 0
    for x in range(kp):
        for y in range(kp):
            both = ok[:, x] & ok[:, y]
            mark[nbr[both, x], nbr[both, y]] = True
    mark[edges[:, 0], edges[:, 1]] = True
    mark[edges[:, 1], edges[:, 0]] = True
    rows, cols = np.nonzero(mark)
    slot = np.full((n, n), -1, dtype=np.int64)
    slot[rows, cols] = np.arange(len(rows))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    safe = np.where(ok, nbr, 0)
    d_slot = np.where(ok[:, :, None] & ok[:, None, :], slot[safe[:, :, None], safe[:, None, :]], -1)
    e_slot = slot[edges[:, :, None], edges[:, None, :]]
    diag = slot[np.arange(n), np.arange(n)]
    return indptr, cols.astype(np.int64), diag, np.ascontiguousarray(d_slot), np.ascontiguousarray(e_slot)


_block_pattern = select(_block_pattern_numba, _block_pattern_numpy)


def block_pattern(nbr, edges, n):
    nbr = np.ascontiguousarray(nbr, dtype=np.int64).reshape(len(nbr), -1)
    edges = np.ascontiguousarray(edges, dtype=np.int64).reshape(-1, 2)
    return BlockPattern(n, *_block_pattern(nbr, edges, int(n)))


@njit
def _assemble_numba(jd, rd, nbr, d_slot, jr, rr, edges, e_slot, lam, n, n_blocks):
    h = np.zeros((n_blocks, 6, 6))
    g = np.zeros((n, 6))
    p_count, kp = nbr.shape
    for p in range(p_count):
        r = rd[p]
        for x in range(kp):
            a = nbr[p, x]
            if a < 0:
                continue
            for u in range(6):
                g[a, u] += jd[p, x, u] * r
            # upper triangle only, mirrored into the transposed block
            for y in range(x, kp):
                sl = d_slot[p, x, y]
                if sl < 0:
                    continue
                st = d_slot[p, y, x]
                for u in range(6):
                    ju = jd[p, x, u]
                    if ju == 0.0:
                        continue
                    for w in range(6):
                        v = ju * jd[p, y, w]
                        h[sl, u, w] += v
                        if y != x:
                            h[st, w, u] += v
    for e in range(edges.shape[0]):
        for x in range(2):
            a = edges[e, x]
            for u in range(6):
                acc = 0.0
                for c in range(3):
                    acc += jr[e, c, 6 * x + u] * rr[e, c]
                g[a, u] += lam * acc
            for y in range(2):
                sl = e_slot[e, x, y]
                for u in range(6):
                    for w in range(6):
                        acc = 0.0
                        for c in range(3):
                            acc += jr[e, c, 6 * x + u] * jr[e, c, 6 * y + w]
                        h[sl, u, w] += lam * acc
    return h, g


def _assemble_numpy(jd, rd, nbr, d_slot, jr, rr, edges, e_slot, lam, n, n_blocks):
    h = np.zeros((n_blocks, 6, 6))
    g = np.zeros((n, 6))
    ok = nbr >= 0
    np.add.at(g, nbr[ok], jd[ok] * rd[:, None, None].repeat(nbr.shape[1], 1)[ok])
    valid = d_slot >= 0
    outer = np.einsum("pxu,pyw->pxyuw", jd, jd)
    np.add.at(h, d_slot[valid], outer[valid])
    if len(edges):
        je = jr.reshape(len(edges), 3, 2, 6)
        np.add.at(g, edges.reshape(-1), lam * np.einsum("ecxu,ec->exu", je, rr).reshape(-1, 6))
        np.add.at(h, e_slot.reshape(-1), lam * np.einsum("ecxu,ecyw->exyuw", je, je).reshape(-1, 6, 6))
    return h, g


assemble_normal_equations = select(_assemble_numba, _assemble_numpy)


@njit
def _block_cg_numba(indptr, cols, diag, h, b, mu, rtol, maxiter):
    """Block-Jacobi PCG on (H + mu I) x = b; info 0 converged, >0 iteration
    cap reached, -1 breakdown (matrix not positive definite)."""
    n = b.shape[0]
    minv = np.empty((n, 6, 6))
    for i in range(n):
        blk = h[diag[i]].copy()
        for u in range(6):
            blk[u, u] += mu
        minv[i] = np.linalg.inv(blk)
    x = np.zeros((n, 6))
    r = b.copy()
    bnorm = np.sqrt(np.sum(b * b))
    if bnorm == 0.0:
        return x, 0
    z = np.zeros((n, 6))
    for i in range(n):
        for u in range(6):
            acc = 0.0
            for w in range(6):
                acc += minv[i, u, w] * r[i, w]
            z[i, u] = acc
    p = z.copy()
    rz = np.sum(r * z)
    ap = np.empty((n, 6))
    for it in range(maxiter):
        for i in range(n):
            for u in range(6):
                ap[i, u] = mu * p[i, u]
            for k in range(indptr[i], indptr[i + 1]):
                c = cols[k]
                for u in range(6):
                    acc = 0.0
                    for w in range(6):
                        acc += h[k, u, w] * p[c, w]
                    ap[i, u] += acc
        pap = np.sum(p * ap)
        if not pap > 0.0:
            return x, -1
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if np.sqrt(np.sum(r * r)) <= rtol * bnorm:
            return x, 0
        for i in range(n):
            for u in range(6):
                acc = 0.0
                for w in range(6):
                    acc += minv[i, u, w] * r[i, w]
                z[i, u] = acc
        rz_new = np.sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter


def _block_cg_numpy(indptr, cols, diag, h, b, mu, rtol, maxiter):
    n = b.shape[0]
    a = sp.bsr_matrix((h, cols, indptr), shape=(6 * n, 6 * n)) + mu * sp.identity(6 * n, format="csr")
    inv = np.linalg.inv(h[diag] + mu * np.eye(6))
    pre = LinearOperator((6 * n, 6 * n), dtype=float,
                         matvec=lambda v: np.einsum("nij,nj->ni", inv, v.reshape(n, 6)).reshape(-1))
    x, info = cg(a, b.reshape(-1), rtol=rtol, atol=0.0, maxiter=maxiter, M=pre)
    return x.reshape(n, 6), info


block_cg = select(_block_cg_numba, _block_cg_numpy)


def make_problem(surfels, graph, pairs, measurement, lam):
    geo = surfels.take(pairs.geo)
    nbr = surfel_neighbor_index(geo.pos, geo.support, graph)
    return AlignProblem(
        v=np.ascontiguousarray(geo.pos),
        nbr=np.ascontiguousarray(nbr),
        vm=np.ascontiguousarray(measurement.pos[pairs.meas]),
        nm=np.ascontiguousarray(measurement.normal[pairs.meas]),
        node_pos=np.ascontiguousarray(graph.pos),
        node_delta=np.ascontiguousarray(graph.delta),
        edges=reg_edges(graph),
        lam=float(lam),
    )


def apply_twists(node_dq, node_pos, xi):
    """Left-compose per-node twists (rotation about the node position)."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    delta = dqm.dq_from_twist(xi[:, :3], xi[:, 3:], node_pos)
    return dqm.dq_normalize(dqm.dq_mul(delta, node_dq))


@dataclass
class SolveResult:
    warp: WarpField
    energies: list = field(default_factory=list)   # energy after every accepted step (first = start)
    iterations: int = 0
    rejected: int = 0
    converged: bool = False


def solve_problem(problem, node_dq, cfg):
    """Damped Gauss-Newton on ``problem`` starting from ``node_dq``.

    Returns ``(node_dq, energies, iterations, rejected, converged)``.  A step
    is accepted only if it does not raise the energy; a rejected or failed
    step multiplies the damping by 10.  More than ``max_retries`` failed
    linear solves in a row raise :class:`SolverDiverged`; the same number of
    energy increases in a row ends the solve (no descent direction left).
    """
    n = problem.n_nodes
    node_dq = np.array(node_dq, dtype=float)
    if n == 0:
        return node_dq, [problem.energy(node_dq)], 0, 0, True
    # trial points are evaluated with Jacobians so an accepted step needs no re-linearisation
    terms = problem.terms(node_dq)
    energies = [problem.terms_energy(terms)]
    mu = cfg.mu
    rejected = 0
    converged = False
    it = 0
    pattern = block_pattern(problem.nbr, problem.edges, n)
    for it in range(1, cfg.max_iterations + 1):
        e0 = energies[-1]
        if e0 == 0.0:
            converged = True
            it -= 1
            break
        h, g = problem.normal_equations(node_dq, pattern, terms)
        accepted = False
        failures = 0
        stalls = 0
        while not accepted:
            step, info = block_cg(pattern.indptr, pattern.cols, pattern.diag, h, -g, mu, cfg.cg_tol, 10 * max(n, 1))
            if info < 0 or not np.all(np.isfinite(step)):
                failures += 1
                rejected += 1
                mu *= 10.0
                if failures > cfg.max_retries:
                    raise SolverDiverged(f"normal equations unsolvable after {cfg.max_retries} damping increases")
                continue
            trial = apply_twists(node_dq, problem.node_pos, step)
            trial_terms = problem.terms(trial)
            e1 = problem.terms_energy(trial_terms)
            if np.isfinite(e1) and e1 <= e0:
                node_dq = trial
                terms = trial_terms
                energies.append(e1)
                mu = max(mu / 10.0, 1e-12)
                accepted = True
            else:
                rejected += 1
                stalls += 1
                mu *= 10.0
                if stalls > cfg.max_retries:
                    break
        if not accepted:
            converged = True
            break
        if (e0 - energies[-1]) <= cfg.tol * e0:
            converged = True
            break
    return node_dq, energies, it, rejected, converged


def solve_warp(surfels, graph, pairs, measurement, cfg, warp=None):
    """Warp field minimising the alignment energy for fixed ``pairs``."""
    warp = WarpField.identity(graph) if warp is None else warp
    problem = make_problem(surfels, graph, pairs, measurement, cfg.lam)
    q, energies, it, rejected, converged = solve_problem(problem, warp.dq, cfg)
    out = WarpField(graph.ids.copy(), graph.pos.copy(), graph.delta.copy(), q)
    return SolveResult(out, energies, it, rejected, converged)


@dataclass
class AlignInfo:
    pairs: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    iterations: int = 0
    rejected: int = 0


def align(surfels, graph, meas, cams, cfg, warp=None):
    """Correspondence search and solve, repeated ``cfg.rounds`` times.

    Each round renders the model warped by the current estimate, so later
    rounds see correspondences closer to the final alignment.
    """
    warp = WarpField.identity(graph) if warp is None else warp
    info = AlignInfo()
    if len(graph) == 0 or len(surfels) == 0:
        return warp, info
    nbr = surfel_neighbor_index(surfels.pos, surfels.support, graph)
    for _ in range(cfg.rounds):
        current = warp_surfels(surfels, warp, graph, nbr)
        maps = render_geometry_maps(current, cams)
        pairs = find_correspondences(maps, meas.index_maps, current, meas.surfels, cfg)
        info.pairs.append(len(pairs))
        result = solve_warp(surfels, graph, pairs, meas.surfels, cfg, warp)
        warp = result.warp
        info.energies.extend(result.energies)
        info.iterations += result.iterations
        info.rejected += result.rejected
    return warp, info


def apply_alignment(surfels, graph, warp):
    """``(S_align, G_update)``: warped surfels and graph with advanced nodes."""
    return warp_surfels(surfels, warp, graph), warp_graph_nodes(graph, warp)
