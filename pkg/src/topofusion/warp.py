"""Warp field evaluation: neighbour selection, dual quaternion blending and
application of the blended transforms to surfels and graph nodes."""
import numpy as np

from . import dq as dqm
from ._accel import njit, prange, select
from .errors import BlendDegenerate, DanglingSupport
from .model import DeformationGraph, Surfel, SurfelSet


def gaussian_weight(dist2, delta):
    return np.exp(-dist2 / (2.0 * delta * delta))


def blend_warp(v, neighbors):
    """Blend ``[(p_k, delta_k, q_k), ...]`` at point ``v`` into one unit dq.

    Quaternions are flipped onto the hemisphere of the first neighbour before
    summation.  If every weight underflows the nearest neighbour's transform
    is returned.
    """
    if not neighbors:
        raise ValueError("blend_warp needs at least one neighbour")
    v = np.asarray(v, dtype=float)
    p = np.array([nb[0] for nb in neighbors], dtype=float)
    delta = np.array([nb[1] for nb in neighbors], dtype=float)
    q = np.array([nb[2] for nb in neighbors], dtype=float)
    d2 = np.sum((p - v) ** 2, axis=1)
    w = gaussian_weight(d2, delta)
    if not np.any(w > 0.0):
        return dqm.dq_normalize(q[int(np.argmin(d2))])
    q = dqm.dq_sign_align(q, q[0])
    return dqm.dq_normalize(np.sum(w[:, None] * q, axis=0))


# ---------------------------------------------------------------------------
# neighbour sets: k' nearest (current Euclidean) among {support} U kNN(support)


@njit
def _neighbor_index_numba(query, support_idx, knn_idx, node_pos, k_prime):
    n = query.shape[0]
    kk = knn_idx.shape[1]
    out = np.full((n, k_prime), -1, dtype=np.int64)
    cand = np.empty(kk + 1, dtype=np.int64)
    dist = np.empty(kk + 1)
    for i in range(n):
        s = support_idx[i]
        cand[0] = s
        for j in range(kk):
            cand[j + 1] = knn_idx[s, j]
        for j in range(kk + 1):
            c = cand[j]
            if c < 0:
                dist[j] = np.inf
            else:
                dx = query[i, 0] - node_pos[c, 0]
                dy = query[i, 1] - node_pos[c, 1]
                dz = query[i, 2] - node_pos[c, 2]
                dist[j] = dx * dx + dy * dy + dz * dz
        for m in range(k_prime):
            best = -1
            bd = np.inf
            for j in range(kk + 1):
                if cand[j] >= 0 and dist[j] < bd:
                    bd = dist[j]
                    best = j
            if best < 0:
                break
            out[i, m] = cand[best]
            dist[best] = np.inf
            cand[best] = -1
    return out


def _neighbor_index_numpy(query, support_idx, knn_idx, node_pos, k_prime):
    cand = np.concatenate([support_idx[:, None], knn_idx[support_idx]], axis=1)
    valid = cand >= 0
    diff = query[:, None, :] - node_pos[np.where(valid, cand, 0)]
    d2 = np.where(valid, np.einsum("ijk,ijk->ij", diff, diff), np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_prime]
    out = np.take_along_axis(cand, order, axis=1)
    ok = np.isfinite(np.take_along_axis(d2, order, axis=1))
    out = np.where(ok, out, -1)
    if out.shape[1] < k_prime:
        out = np.concatenate([out, np.full((len(out), k_prime - out.shape[1]), -1)], axis=1)
    return out.astype(np.int64)


neighbor_index = select(_neighbor_index_numba, _neighbor_index_numpy)


def surfel_neighbor_index(pos, support_ids, graph):
    """Row indices (N, k') of each point's blend neighbours in ``graph``."""
    pos = np.ascontiguousarray(pos, dtype=float).reshape(-1, 3)
    if len(pos) == 0:
        return np.zeros((0, graph.k_prime), dtype=np.int64)
    support_idx = graph.index_of(support_ids)
    return neighbor_index(pos, np.ascontiguousarray(support_idx), graph.knn_index(), graph.pos, graph.k_prime)


def surfel_neighbors(s, graph):
    """Node ids of the k' nearest candidates among support(s) and its kNN."""
    idx = surfel_neighbor_index(np.asarray(s.v)[None], np.array([s.support]), graph)[0]
    return [int(graph.ids[i]) for i in idx if i >= 0]


# ---------------------------------------------------------------------------
# batched blending + application


@njit
def _blend_one(q_out, i, nbr, pos, node_pos, node_delta, node_dq):
    first = nbr[i, 0]
    tw = 0.0
    for m in range(8):
        q_out[m] = 0.0
    for j in range(nbr.shape[1]):
        c = nbr[i, j]
        if c < 0:
            continue
        dx = pos[i, 0] - node_pos[c, 0]
        dy = pos[i, 1] - node_pos[c, 1]
        dz = pos[i, 2] - node_pos[c, 2]
        w = np.exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * node_delta[c] * node_delta[c]))
        dot = 0.0
        for m in range(4):
            dot += node_dq[c, m] * node_dq[first, m]
        if dot < 0.0:
            w = -w
        for m in range(8):
            q_out[m] += w * node_dq[c, m]
        tw += abs(w)
    if tw == 0.0:
        for m in range(8):
            q_out[m] = node_dq[first, m]


@njit
def _apply_dq(q, v, n, v_out, n_out, i):
    r0, r1, r2, r3 = q[0], q[1], q[2], q[3]
    d0, d1, d2, d3 = q[4], q[5], q[6], q[7]
    nn = r0 * r0 + r1 * r1 + r2 * r2 + r3 * r3
    # rotation matrix of the normalised real part
    m00 = (r0 * r0 + r1 * r1 - r2 * r2 - r3 * r3) / nn
    m01 = 2.0 * (r1 * r2 - r0 * r3) / nn
    m02 = 2.0 * (r1 * r3 + r0 * r2) / nn
    m10 = 2.0 * (r1 * r2 + r0 * r3) / nn
    m11 = (r0 * r0 - r1 * r1 + r2 * r2 - r3 * r3) / nn
    m12 = 2.0 * (r2 * r3 - r0 * r1) / nn
    m20 = 2.0 * (r1 * r3 - r0 * r2) / nn
    m21 = 2.0 * (r2 * r3 + r0 * r1) / nn
    m22 = (r0 * r0 - r1 * r1 - r2 * r2 + r3 * r3) / nn
    # t = 2 vec(d r*) / |r|^2
    tx = 2.0 * (r0 * d1 - d0 * r1 + (r2 * d3 - r3 * d2)) / nn
    ty = 2.0 * (r0 * d2 - d0 * r2 + (r3 * d1 - r1 * d3)) / nn
    tz = 2.0 * (r0 * d3 - d0 * r3 + (r1 * d2 - r2 * d1)) / nn
    x, y, z = v[i, 0], v[i, 1], v[i, 2]
    v_out[i, 0] = m00 * x + m01 * y + m02 * z + tx
    v_out[i, 1] = m10 * x + m11 * y + m12 * z + ty
    v_out[i, 2] = m20 * x + m21 * y + m22 * z + tz
    x, y, z = n[i, 0], n[i, 1], n[i, 2]
    a = m00 * x + m01 * y + m02 * z
    b = m10 * x + m11 * y + m12 * z
    c = m20 * x + m21 * y + m22 * z
    ln = np.sqrt(a * a + b * b + c * c)
    if ln > 0.0:
        a /= ln
        b /= ln
        c /= ln
    n_out[i, 0] = a
    n_out[i, 1] = b
    n_out[i, 2] = c


@njit(parallel=True)
def _warp_points_numba(pos, normal, nbr, node_pos, node_delta, node_dq):
    n = pos.shape[0]
    v_out = np.empty_like(pos)
    n_out = np.empty_like(normal)
    for i in prange(n):
        q = np.empty(8)
        _blend_one(q, i, nbr, pos, node_pos, node_delta, node_dq)
        _apply_dq(q, pos, normal, v_out, n_out, i)
    return v_out, n_out


def blend_batch_numpy(pos, nbr, node_pos, node_delta, node_dq):
    """Raw (unnormalised) blends, one per row of ``nbr``."""
    valid = nbr >= 0
    safe = np.where(valid, nbr, 0)
    q = node_dq[safe]
    diff = pos[:, None, :] - node_pos[safe]
    w = np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / (2.0 * node_delta[safe] ** 2))
    w = np.where(valid, w, 0.0)
    sign = np.where(np.einsum("ijk,ik->ij", q[:, :, :4], q[:, 0, :4]) < 0.0, -1.0, 1.0)
    b = np.einsum("ij,ijk->ik", w * sign, q)
    dead = ~np.any(w > 0.0, axis=1)
    b[dead] = q[dead, 0]
    return b


def _warp_points_numpy(pos, normal, nbr, node_pos, node_delta, node_dq):
    b = blend_batch_numpy(pos, nbr, node_pos, node_delta, node_dq)
    v_out = dqm.dq_transform_points(b, pos)
    n_out = dqm.dq_rotate_vectors(b, normal)
    n_out /= np.maximum(np.linalg.norm(n_out, axis=1, keepdims=True), 1e-300)
    return v_out, n_out


warp_points = select(_warp_points_numba, _warp_points_numpy)


def _check_field(warp, graph):
    if len(warp) != len(graph) or not np.array_equal(warp.ids, graph.ids):
        raise ValueError("warp field does not cover the graph nodes")


def warp_surfels(surfels, warp, graph, nbr=None):
    """Apply the blended warp to every surfel (positions and normals)."""
    _check_field(warp, graph)
    if len(surfels) == 0:
        return surfels.copy()
    if nbr is None:
        nbr = surfel_neighbor_index(surfels.pos, surfels.support, graph)
    v, n = warp_points(surfels.pos, surfels.normal, nbr, warp.pos, warp.delta, np.ascontiguousarray(warp.dq))
    return surfels.replace(pos=v, normal=n)


def warp_surfel(s, warp, graph):
    """Warp a single :class:`Surfel`; raises DanglingSupport for a dead support."""
    if not bool(graph.contains([s.support])[0]):
        raise DanglingSupport(f"support node {s.support} not in graph")
    out = warp_surfels(SurfelSet.from_surfels([s]), warp, graph)
    return out[0]


def node_neighbor_index(graph):
    """Blend neighbours of every node: k' nearest among itself and its kNN."""
    if len(graph) == 0:
        return np.zeros((0, graph.k_prime), dtype=np.int64)
    return neighbor_index(graph.pos, np.arange(len(graph), dtype=np.int64), graph.knn_index(), graph.pos,
                          graph.k_prime)


def warp_graph_nodes(graph, warp):
    """Advance node positions by the blended warp; transforms reset to identity."""
    _check_field(warp, graph)
    if len(graph) == 0:
        return graph.replace()
    nbr = node_neighbor_index(graph)
    dummy = np.zeros_like(graph.pos)
    pos, _ = warp_points(graph.pos, dummy, nbr, warp.pos, warp.delta, np.ascontiguousarray(warp.dq))
    return graph.replace(pos=pos, dq=dqm.dq_identity(len(graph)))
