"""Geometry and graph update after alignment.

Registration of the aligned model against the measurement, fusion of
matched pairs, removal of outliers (and of nodes that lose too many surfels),
appending of newly observed surface with graph growth, and the historical
maximum distance bookkeeping.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import dq as dqm
from ._accel import njit, select
from .alignment import render_index_map
from .errors import EmptyGraph
from .measurement import Z_NEAR
from .model import DeformationGraph, HistoricalDistanceStore, SurfelSet, pairwise_distances
from .sampling import knn_from_matrix, poisson_disk_sample

SUPERSAMPLE = 4


@dataclass
class UpdateConfig:
    gamma_distance: float = 0.03
    gamma_normal: float = float(np.cos(np.deg2rad(30.0)))
    gamma_nn: float = 0.05
    gamma_inlier: float = 0.01
    gamma_upper: float = 0.10
    gamma_lower: float = 0.02
    gamma_remove: int = 20
    r_sample: float = 0.025
    t_stale: int = 30
    conf_stable: float = 10.0
    delta_factor: float = 2.0
    supersample: int = SUPERSAMPLE
    prune_emptied: bool = True

    def __post_init__(self):
        if not self.gamma_lower < self.gamma_upper:
            raise ValueError("gamma_lower must be smaller than gamma_upper")
        if self.gamma_remove < 1:
            raise ValueError("gamma_remove must be >= 1")
        if self.r_sample <= 0:
            raise ValueError("r_sample must be positive")


@dataclass
class Registration:
    geo: np.ndarray          # matched geometry surfel indices
    meas: np.ndarray         # their measurement partners
    cam: np.ndarray          # camera that produced the match
    unmatched_geo: np.ndarray
    unmatched_meas: np.ndarray

    def __len__(self):
        return len(self.geo)


# ---------------------------------------------------------------------------
# registration


@njit
def _register_numba(sub_index, meas_index, scale, geo_pos, geo_nrm, meas_pos, meas_nrm, max_d2, min_dot,
                    geo_used, meas_used):
    h, w = meas_index.shape
    out_g = np.empty(h * w, dtype=np.int64)
    out_m = np.empty(h * w, dtype=np.int64)
    n = 0
    for y in range(h):
        for x in range(w):
            m = meas_index[y, x]
            if m < 0 or meas_used[m]:
                continue
            best = -1
            bd = np.inf
            for sy in range(y * scale, y * scale + scale):
                for sx in range(x * scale, x * scale + scale):
                    g = sub_index[sy, sx]
                    if g < 0 or geo_used[g]:
                        continue
                    dx = geo_pos[g, 0] - meas_pos[m, 0]
                    dy = geo_pos[g, 1] - meas_pos[m, 1]
                    dz = geo_pos[g, 2] - meas_pos[m, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 > max_d2:
                        continue
                    dot = geo_nrm[g, 0] * meas_nrm[m, 0] + geo_nrm[g, 1] * meas_nrm[m, 1] + geo_nrm[g, 2] * meas_nrm[m, 2]
                    if dot < min_dot:
                        continue
                    if d2 < bd:
                        bd = d2
                        best = g
            if best >= 0:
                geo_used[best] = True
                meas_used[m] = True
                out_g[n] = best
                out_m[n] = m
                n += 1
    return out_g[:n], out_m[:n]


def _register_numpy(sub_index, meas_index, scale, geo_pos, geo_nrm, meas_pos, meas_nrm, max_d2, min_dot,
                    geo_used, meas_used):
    # Within one camera a geometry surfel occupies a single sub-pixel and a
    # measurement surfel a single pixel, so the pixels never compete and the
    # raster-order loop reduces to an independent argmin per pixel.
    h, w = meas_index.shape
    ys, xs = np.nonzero(meas_index >= 0)
    m = meas_index[ys, xs]
    keep = ~meas_used[m]
    ys, xs, m = ys[keep], xs[keep], m[keep]
    best = np.full(len(m), -1, dtype=np.int64)
    bd = np.full(len(m), np.inf)
    for oy in range(scale):
        for ox in range(scale):
            g = sub_index[ys * scale + oy, xs * scale + ox]
            ok = g >= 0
            gs = np.where(ok, g, 0)
            ok &= ~geo_used[gs]
            diff = geo_pos[gs] - meas_pos[m]
            d2 = np.einsum("ij,ij->i", diff, diff)
            dot = np.einsum("ij,ij->i", geo_nrm[gs], meas_nrm[m])
            better = ok & (d2 <= max_d2) & (dot >= min_dot) & (d2 < bd)
            best[better] = g[better]
            bd[better] = d2[better]
    hit = best >= 0
    geo_used[best[hit]] = True
    meas_used[m[hit]] = True
    return best[hit], m[hit]


_register = select(_register_numba, _register_numpy)


def register(s_align, meas, cams, cfg, meas_index_maps=None):
    """Match aligned geometry to measurement surfels, camera by camera.

    ``meas`` is a :class:`MeasurementFrame` (or anything with ``surfels`` and
    ``index_maps``).  For every measurement pixel the ``supersample`` x
    ``supersample`` block of the super-sampled geometry index map is searched:
    candidates farther than ``gamma_distance`` or with a normal dot below
    ``gamma_normal`` are dropped, the nearest survivor is taken.  Matches are
    one-to-one; earlier cameras claim surfels first.
    """
    m_surf = meas.surfels
    index_maps = meas.index_maps if meas_index_maps is None else meas_index_maps
    geo_used = np.zeros(len(s_align), dtype=bool)
    meas_used = np.zeros(len(m_surf), dtype=bool)
    gs, ms, cs = [], [], []
    scale = int(cfg.supersample)
    for k, cam in enumerate(cams):
        sub = render_index_map(s_align.pos, s_align.normal, cam, scale)
        g, m = _register(np.ascontiguousarray(sub.index), np.ascontiguousarray(index_maps[k]), scale, s_align.pos,
                         s_align.normal, m_surf.pos, m_surf.normal, float(cfg.gamma_distance) ** 2,
                         float(cfg.gamma_normal), geo_used, meas_used)
        gs.append(g)
        ms.append(m)
        cs.append(np.full(len(g), k, dtype=np.int64))
    cat = (lambda a: np.concatenate(a) if a else np.zeros(0, np.int64))
    return Registration(cat(gs), cat(ms), cat(cs), np.nonzero(~geo_used)[0], np.nonzero(~meas_used)[0])


# ---------------------------------------------------------------------------
# fusion


def fuse_matched(s_align, meas_surfels, geo_idx, meas_idx):
    """Confidence-weighted fusion of matched pairs into the geometry.

    Position, normal, radius (and the colour payload) become
    ``(c_a x_a + c_M x_M) / (c_a + c_M)`` using the confidences from before
    the update; the normal is re-normalised, the timestamp taken from the
    measurement and the confidences added.
    """
    out = s_align.copy()
    if len(geo_idx) == 0:
        return out
    ca = s_align.conf[geo_idx][:, None]
    cm = meas_surfels.conf[meas_idx][:, None]
    tot = ca + cm

    def mix(a, b):
        return (ca * a[geo_idx] + cm * b[meas_idx]) / tot

    out.pos[geo_idx] = mix(s_align.pos, meas_surfels.pos)
    n = mix(s_align.normal, meas_surfels.normal)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    # antipodal normals cancel; keep the measurement's then
    n = np.where(norm > 1e-12, n / np.maximum(norm, 1e-300), meas_surfels.normal[meas_idx])
    out.normal[geo_idx] = n
    out.radius[geo_idx] = mix(s_align.radius[:, None], meas_surfels.radius[:, None])[:, 0]
    out.color[geo_idx] = mix(s_align.color, meas_surfels.color)
    out.t_stamp[geo_idx] = meas_surfels.t_stamp[meas_idx]
    out.conf[geo_idx] = tot[:, 0]
    return out


# ---------------------------------------------------------------------------
# compression


def detect_compressed(graph, dh, cfg, d_now=None):
    """Boolean mask over nodes: some partner was far (d_h > upper) but is near now (d < lower)."""
    if len(graph) == 0:
        return np.zeros(0, dtype=bool)
    if not dh.aligned_to(graph.ids):
        raise ValueError("historical distances are not aligned with the graph")
    d_now = pairwise_distances(graph.pos) if d_now is None else d_now
    flag = (dh.matrix > cfg.gamma_upper) & (d_now < cfg.gamma_lower)
    np.fill_diagonal(flag, False)
    return flag.any(axis=1)


# ---------------------------------------------------------------------------
# removal


def source_cameras(index_maps, n):
    """First camera whose index map contains each measurement surfel (-1 if none)."""
    cam = np.full(n, -1, dtype=np.int64)
    for k in range(len(index_maps) - 1, -1, -1):
        idx = index_maps[k][index_maps[k] >= 0]
        cam[idx] = k
    return cam


def free_space_violation(pos, depth_maps, cams, margin):
    """True where a point lies more than ``margin`` in front of a valid
    measured depth in some camera (the camera saw through it)."""
    viol = np.zeros(len(pos), dtype=bool)
    for dm, cam in zip(depth_maps, cams):
        u, v, z = cam.project(pos)
        with np.errstate(invalid="ignore"):
            ui = np.floor(u + 0.5)
            vi = np.floor(v + 0.5)
        ok = (z > Z_NEAR) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        d = np.zeros(len(pos))
        d[ok] = dm.depth[vi[ok].astype(np.int64), ui[ok].astype(np.int64)]
        viol |= ok & (d > 0) & (z < d - margin)
    return viol


def overlapped(surfels, cand, cfg, tree=None):
    """Candidates with a neighbour within half their radius that has strictly
    higher confidence and a (anti)parallel normal, |dot| >= gamma_normal."""
    out = np.zeros(len(cand), dtype=bool)
    if len(cand) == 0 or len(surfels) < 2:
        return out
    tree = cKDTree(surfels.pos) if tree is None else tree
    lists = tree.query_ball_point(surfels.pos[cand], 0.5 * surfels.radius[cand])
    for a, (i, nb) in enumerate(zip(cand, lists)):
        if len(nb) <= 1:
            continue
        nb = np.asarray(nb)
        nb = nb[nb != i]
        higher = surfels.conf[nb] > surfels.conf[i]
        if not np.any(higher):
            continue
        dots = np.abs(surfels.normal[nb[higher]] @ surfels.normal[i])
        out[a] = bool(np.any(dots >= cfg.gamma_normal))
    return out


@dataclass
class RemovalResult:
    keep: np.ndarray                 # mask over the input surfels
    counts: np.ndarray               # removed surfels per graph node (graph order)
    stale: int = 0
    overlap: int = 0
    free_space: int = 0


def remove_surfels(s_align, unmatched, meas, cams, frame, cfg, graph):
    """Classify unmatched surfels; see :class:`RemovalResult`.

    A surfel is removed when stale (``conf < conf_stable`` and unseen for more
    than ``t_stale`` frames), overlapped by a more confident surfel, or in
    front of the measured surface by more than ``gamma_inlier``.
    """
    keep = np.ones(len(s_align), dtype=bool)
    counts = np.zeros(len(graph), dtype=np.int64)
    unmatched = np.asarray(unmatched, dtype=np.int64)
    if len(unmatched) == 0:
        return RemovalResult(keep, counts)
    stale = (s_align.conf[unmatched] < cfg.conf_stable) & (frame - s_align.t_stamp[unmatched] > cfg.t_stale)
    over = overlapped(s_align, unmatched, cfg)
    free = free_space_violation(s_align.pos[unmatched], meas.depth, cams, cfg.gamma_inlier)
    gone = unmatched[stale | over | free]
    keep[gone] = False
    if len(gone):
        idx = graph.index_of(s_align.support[gone], strict=False)
        idx = idx[idx >= 0]
        counts = np.bincount(idx, minlength=len(graph)).astype(np.int64)
    return RemovalResult(keep, counts, int(stale.sum()), int(over.sum()), int(free.sum()))


def remove_nodes(graph, counts, surfels, dh, cfg, prune_emptied=None):
    """Drop nodes whose removal count exceeds ``gamma_remove`` together with
    every surfel they support.

    With ``prune_emptied`` (default ``cfg.prune_emptied``) a node that lost
    surfels this frame and supports none afterwards is dropped as well;
    ``surfels`` must then be the survivors of this frame's surfel removal.
    Returns ``(graph, surfels, dh, removed_ids, emptied_ids)`` where
    ``removed_ids`` are the counter-triggered deletions.  kNN lists are
    rebuilt under the (reduced) historical distances.
    """
    counts = np.asarray(counts)
    dead = counts > cfg.gamma_remove
    emptied = np.zeros(len(graph), dtype=bool)
    if cfg.prune_emptied if prune_emptied is None else prune_emptied:
        left = np.bincount(graph.index_of(surfels.support), minlength=len(graph)) if len(surfels) else \
            np.zeros(len(graph), np.int64)
        emptied = (counts > 0) & (left == 0) & ~dead
    removed = graph.ids[dead]
    gone = dead | emptied
    if not np.any(gone):
        g = graph.replace(removal_count=counts.astype(np.int64))
        return g, surfels, dh, removed, graph.ids[emptied]
    alive = np.nonzero(~gone)[0]
    g = graph.take(alive)
    g.removal_count = counts[alive].astype(np.int64)
    dh2 = HistoricalDistanceStore(dh.ids[alive], dh.matrix[np.ix_(alive, alive)])
    g = g.replace(knn=knn_from_matrix(dh2.matrix, g.ids, g.k))
    s = surfels.take(np.nonzero(~np.isin(surfels.support, removed))[0])
    return g, s, dh2, removed, graph.ids[emptied]


# ---------------------------------------------------------------------------
# historical distance


def update_historical_distance(dh, graph):
    """``d_h <- max(d_h, current distance)`` for every pair of live nodes."""
    if not dh.aligned_to(graph.ids):
        raise ValueError("historical distances are not aligned with the graph")
    return HistoricalDistanceStore(dh.ids, np.maximum(dh.matrix, pairwise_distances(graph.pos)))


def init_new_node_dh(dh_matrix, pos_old, pos_new):
    """Grow ``dh_matrix`` by nodes at ``pos_new`` inserted one at a time.

    For node ``k`` with nearest (already present) node ``i``:
    ``d_h(k, j) = max(d_h(i, j) - d(i, k), d(j, k))`` for every present ``j``.
    """
    n0 = len(pos_old)
    m = len(pos_new)
    out = np.zeros((n0 + m, n0 + m))
    out[:n0, :n0] = dh_matrix
    pos = np.concatenate([np.asarray(pos_old, float).reshape(-1, 3), np.asarray(pos_new, float).reshape(-1, 3)])
    for a in range(m):
        k = n0 + a
        d = np.linalg.norm(pos[:k] - pos[k], axis=1)
        if k == 0:
            continue
        i = int(np.argmin(d))
        row = np.maximum(out[i, :k] - d[i], d)
        out[k, :k] = row
        out[:k, k] = row
    return out


# ---------------------------------------------------------------------------
# append


def duplicate_guard(cand_pos, cand_dir, cand_radius, geometry, margin, tree=None):
    """True where an existing geometry surfel lies on the candidate's view ray
    (lateral offset within the two surfel radii) within ``margin`` along it."""
    out = np.zeros(len(cand_pos), dtype=bool)
    if len(cand_pos) == 0 or len(geometry) == 0:
        return out
    tree = cKDTree(geometry.pos) if tree is None else tree
    lateral = cand_radius + float(np.max(geometry.radius))
    reach = float(np.sqrt(margin ** 2 + np.max(lateral) ** 2))
    pairs = cKDTree(cand_pos).sparse_distance_matrix(tree, reach, output_type="ndarray")
    if len(pairs) == 0:
        return out
    a, b = pairs["i"].astype(np.int64), pairs["j"].astype(np.int64)
    diff = geometry.pos[b] - cand_pos[a]
    along = np.einsum("ij,ij->i", diff, cand_dir[a])
    lat = np.sqrt(np.maximum(np.einsum("ij,ij->i", diff, diff) - along * along, 0.0))
    hit = (np.abs(along) < margin) & (lat <= cand_radius[a] + geometry.radius[b])
    out[a[hit]] = True
    return out


@dataclass
class AppendResult:
    surfels: SurfelSet
    graph: DeformationGraph
    dh: HistoricalDistanceStore
    appended: int = 0
    rejected_far: int = 0
    rejected_compressed: int = 0
    rejected_duplicate: int = 0
    new_nodes: int = 0
    appended_on_compressed: int = 0


def append_measurement(cand, surfels, graph, dh, compressed, meas, cams, frame, cfg, rng=None):
    """Append unmatched measurement surfels and grow the graph.

    Candidates are rejected when (1) the nearest node is farther than
    ``gamma_nn``, (2) that node is compressed, or (3) existing geometry lies
    within ``gamma_inlier`` along the candidate's camera ray.  Appended
    surfels farther than ``r_sample`` from every node are Poisson-disk sampled
    into new nodes; supports are then the nearest node.
    """
    if len(graph) == 0:
        raise EmptyGraph("cannot append without graph nodes")
    cand = np.asarray(cand, dtype=np.int64)
    m_surf = meas.surfels
    res = AppendResult(surfels, graph, dh)
    if len(cand) == 0:
        return res
    node_tree = cKDTree(graph.pos)
    dist, near = node_tree.query(m_surf.pos[cand])
    far = dist > cfg.gamma_nn
    comp = ~far & compressed[near]
    rest = cand[~far & ~comp]
    src = source_cameras(meas.index_maps, len(m_surf))[rest]
    centers = np.array([c.center for c in cams]).reshape(-1, 3)
    dirs = m_surf.pos[rest] - centers[np.maximum(src, 0)]
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    dup = duplicate_guard(m_surf.pos[rest], dirs, m_surf.radius[rest], surfels, cfg.gamma_inlier)
    take = rest[~dup]
    res.rejected_far = int(far.sum())
    res.rejected_compressed = int(comp.sum())
    res.rejected_duplicate = int(dup.sum())
    if len(take) == 0:
        return res
    new = m_surf.take(take)
    new.conf[:] = 1.0
    new.t_stamp[:] = frame
    # graph growth from appended surfels not covered by any node
    d_new, _ = node_tree.query(new.pos)
    pool = np.nonzero(d_new > cfg.r_sample)[0]
    g = graph
    dh2 = dh
    if len(pool):
        pick = pool[poisson_disk_sample(new.pos[pool], cfg.r_sample, rng)]
        npos = new.pos[pick]
        nid = g.next_id + np.arange(len(pick), dtype=np.int64)
        mat = init_new_node_dh(dh.matrix, g.pos, npos)
        ids = np.concatenate([g.ids, nid])
        g = DeformationGraph(ids, np.concatenate([g.pos, npos]),
                             np.concatenate([g.delta, np.full(len(pick), cfg.delta_factor * cfg.r_sample)]),
                             np.concatenate([g.dq, dqm.dq_identity(len(pick))]),
                             np.full((len(ids), g.k), -1, dtype=np.int64), g.k, g.k_prime,
                             np.concatenate([g.removal_count, np.zeros(len(pick), np.int64)]), int(nid[-1]) + 1)
        dh2 = HistoricalDistanceStore(ids, mat)
        g = g.replace(knn=knn_from_matrix(mat, ids, g.k))
        res.new_nodes = len(pick)
    _, sup = cKDTree(g.pos).query(new.pos)
    new.support[:] = g.ids[sup]
    # bookkeeping for the compression guard: supports at append time
    comp_ids = graph.ids[compressed]
    res.appended_on_compressed = int(np.isin(new.support, comp_ids).sum())
    res.surfels = surfels.concat(new)
    res.graph = g
    res.dh = dh2
    res.appended = len(new)
    return res


# ---------------------------------------------------------------------------
# whole stage


@dataclass
class UpdateLog:
    matched: int = 0
    fused: int = 0
    appended: int = 0
    removed_surfels: int = 0
    removed_stale: int = 0
    removed_overlap: int = 0
    removed_free_space: int = 0
    removed_with_nodes: int = 0
    removed_nodes: list = field(default_factory=list)
    emptied_nodes: list = field(default_factory=list)
    max_node_count: int = 0
    new_nodes: int = 0
    compressed_nodes: int = 0
    rejected_far: int = 0
    rejected_compressed: int = 0
    rejected_duplicate: int = 0
    appended_on_compressed: int = 0

    def to_dict(self):
        d = dict(self.__dict__)
        d["removed_nodes"] = [int(i) for i in self.removed_nodes]
        d["emptied_nodes"] = [int(i) for i in self.emptied_nodes]
        return d


def update(s_align, graph, dh, meas, cams, frame, cfg, rng=None):
    """Run the whole update stage; returns ``(surfels, graph, dh, UpdateLog)``.

    Order: registration, fusion, surfel removal, node removal, historical
    distance update, compression test, append (with graph growth), kNN
    rebuild under the historical distances.
    """
    log = UpdateLog()
    reg = register(s_align, meas, cams, cfg)
    log.matched = log.fused = len(reg)
    s = fuse_matched(s_align, meas.surfels, reg.geo, reg.meas)
    rem = remove_surfels(s, reg.unmatched_geo, meas, cams, frame, cfg, graph)
    s = s.take(np.nonzero(rem.keep)[0])
    log.removed_surfels = int((~rem.keep).sum())
    log.removed_stale, log.removed_overlap, log.removed_free_space = rem.stale, rem.overlap, rem.free_space
    n_before = len(s)
    g, s, dh, removed, emptied = remove_nodes(graph, rem.counts, s, dh, cfg)
    log.removed_with_nodes = n_before - len(s)
    log.removed_nodes = list(removed)
    log.emptied_nodes = list(emptied)
    log.max_node_count = int(rem.counts.max()) if len(rem.counts) else 0
    if len(g) == 0:
        return s, g, dh, log
    dh = update_historical_distance(dh, g)
    compressed = detect_compressed(g, dh, cfg)
    log.compressed_nodes = int(compressed.sum())
    app = append_measurement(reg.unmatched_meas, s, g, dh, compressed, meas, cams, frame, cfg, rng)
    s, g, dh = app.surfels, app.graph, app.dh
    log.appended = app.appended
    log.new_nodes = app.new_nodes
    log.rejected_far, log.rejected_compressed, log.rejected_duplicate = (app.rejected_far, app.rejected_compressed,
                                                                        app.rejected_duplicate)
    log.appended_on_compressed = app.appended_on_compressed
    g = g.replace(knn=knn_from_matrix(dh.matrix, g.ids, g.k))
    return s, g, dh, log
