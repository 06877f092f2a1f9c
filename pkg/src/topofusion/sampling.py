"""Node sampling and neighbour graphs."""
import numpy as np
from scipy.spatial import cKDTree

from ._accel import njit, select


@njit
def _poisson_disk_numba(points, order, radius, existing):
    """Greedy dart acceptance over ``order`` using a uniform hash grid."""
    n = points.shape[0]
    r2 = radius * radius
    cell = radius
    lo = np.empty(3)
    for a in range(3):
        m = np.inf
        for i in range(n):
            m = min(m, points[i, a])
        for i in range(existing.shape[0]):
            m = min(m, existing[i, a])
        lo[a] = m
    dims = np.empty(3, dtype=np.int64)
    for a in range(3):
        hi = -np.inf
        for i in range(n):
            hi = max(hi, points[i, a])
        for i in range(existing.shape[0]):
            hi = max(hi, existing[i, a])
        dims[a] = int((hi - lo[a]) / cell) + 1
    ncell = dims[0] * dims[1] * dims[2]
    head = np.full(ncell, -1, dtype=np.int64)
    total = n + existing.shape[0]
    nxt = np.full(total, -1, dtype=np.int64)
    store = np.empty((total, 3))
    count = 0
    accepted = np.empty(n, dtype=np.int64)
    n_acc = 0
    for e in range(existing.shape[0] + n):
        if e < existing.shape[0]:
            p0, p1, p2 = existing[e, 0], existing[e, 1], existing[e, 2]
        else:
            idx = order[e - existing.shape[0]]
            p0, p1, p2 = points[idx, 0], points[idx, 1], points[idx, 2]
        cx = int((p0 - lo[0]) / cell)
        cy = int((p1 - lo[1]) / cell)
        cz = int((p2 - lo[2]) / cell)
        ok = True
        if e >= existing.shape[0]:
            for ix in range(max(cx - 1, 0), min(cx + 2, dims[0])):
                for iy in range(max(cy - 1, 0), min(cy + 2, dims[1])):
                    for iz in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                        h = head[(ix * dims[1] + iy) * dims[2] + iz]
                        while h >= 0:
                            d0 = store[h, 0] - p0
                            d1 = store[h, 1] - p1
                            d2 = store[h, 2] - p2
                            if d0 * d0 + d1 * d1 + d2 * d2 < r2:
                                ok = False
                                break
                            h = nxt[h]
                        if not ok:
                            break
                    if not ok:
                        break
                if not ok:
                    break
        if ok:
            store[count, 0] = p0
            store[count, 1] = p1
            store[count, 2] = p2
            c = (cx * dims[1] + cy) * dims[2] + cz
            nxt[count] = head[c]
            head[c] = count
            count += 1
            if e >= existing.shape[0]:
                accepted[n_acc] = order[e - existing.shape[0]]
                n_acc += 1
    return accepted[:n_acc]


def _poisson_disk_numpy(points, order, radius, existing):
    tree = cKDTree(existing) if len(existing) else None
    grid = {}
    accepted = []
    cell = radius
    r2 = radius * radius
    for idx in order:
        p = points[idx]
        if tree is not None and tree.query(p, distance_upper_bound=radius)[0] < radius:
            continue
        key = tuple(np.floor(p / cell).astype(np.int64))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for q in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        if np.sum((points[q] - p) ** 2) < r2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            grid.setdefault(key, []).append(idx)
            accepted.append(idx)
    return np.array(accepted, dtype=np.int64)


_poisson_disk = select(_poisson_disk_numba, _poisson_disk_numpy)


def poisson_disk_sample(points, radius, rng=None, existing=None):
    """Indices of a greedy Poisson-disk subset of ``points``.

    Candidates are visited in a random order drawn from ``rng`` (identity
    order without one).  Accepted samples are at least ``radius`` apart from
    each other and from every point in ``existing``.
    """
    points = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    order = rng.permutation(len(points)) if rng is not None else np.arange(len(points))
    existing = np.zeros((0, 3)) if existing is None else np.ascontiguousarray(existing, dtype=float).reshape(-1, 3)
    return _poisson_disk(points, order.astype(np.int64), float(radius), existing)


@njit
def _knn_rows_numba(d, kk):
    # insertion into a sorted k-list; strict < keeps the lower column on ties
    n = d.shape[0]
    out = np.empty((n, kk), dtype=np.int64)
    best = np.empty(kk)
    for i in range(n):
        m = 0
        for j in range(d.shape[1]):
            if j == i:
                continue
            v = d[i, j]
            if m == kk and not v < best[kk - 1]:
                continue
            pos = m if m < kk else kk - 1
            while pos > 0 and v < best[pos - 1]:
                if pos < kk:
                    best[pos] = best[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                pos -= 1
            best[pos] = v
            out[i, pos] = j
            if m < kk:
                m += 1
    return out


def _knn_rows_numpy(d, kk):
    d = d.copy()
    np.fill_diagonal(d, np.inf)
    # stable argsort keeps id order on ties (columns are in id order)
    return np.argsort(d, axis=1, kind="stable")[:, :kk]


_knn_rows = select(_knn_rows_numba, _knn_rows_numpy)


def knn_from_matrix(dist, ids, k):
    """k smallest off-diagonal entries per row of ``dist`` as node ids.

    Ties are broken by node id; rows have ``min(k, n-1)`` valid entries and
    are padded with -1 up to ``k``.
    """
    n = len(ids)
    out = np.full((n, k), -1, dtype=np.int64)
    kk = min(k, n - 1)
    if kk <= 0:
        return out
    order = _knn_rows(np.ascontiguousarray(dist, dtype=float), kk)
    out[:, :kk] = np.asarray(ids)[order]
    return out


def nearest_index(points, query):
    """Index of the nearest of ``points`` and the distance, per query row."""
    tree = cKDTree(points)
    d, i = tree.query(np.asarray(query, dtype=float).reshape(-1, 3))
    return i.astype(np.int64), d
