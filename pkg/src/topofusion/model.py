"""State types: surfels, deformation graph, warp field, historical distances."""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import dq as dqm


@dataclass
class Surfel:
    """One surface element; the set-level container is :class:`SurfelSet`."""

    v: np.ndarray
    n: np.ndarray
    c: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    r: float = 0.005
    conf: float = 1.0
    t_stamp: int = 0
    support: int = -1

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.n = np.asarray(self.n, dtype=float)
        self.c = np.asarray(self.c, dtype=float)


@dataclass
class SurfelSet:
    """Struct-of-arrays surfel container.

    ``support`` holds node *ids* (not indices); see
    :meth:`DeformationGraph.index_of`.
    """

    pos: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    radius: np.ndarray
    conf: np.ndarray
    t_stamp: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.pos = np.ascontiguousarray(self.pos, dtype=np.float64).reshape(-1, 3)
        self.normal = np.ascontiguousarray(self.normal, dtype=np.float64).reshape(-1, 3)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64).reshape(-1, 3)
        self.radius = np.ascontiguousarray(self.radius, dtype=np.float64).reshape(-1)
        self.conf = np.ascontiguousarray(self.conf, dtype=np.float64).reshape(-1)
        self.t_stamp = np.ascontiguousarray(self.t_stamp, dtype=np.int64).reshape(-1)
        self.support = np.ascontiguousarray(self.support, dtype=np.int64).reshape(-1)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                   np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_surfels(cls, surfels):
        surfels = list(surfels)
        if not surfels:
            return cls.empty()
        return cls(
            np.array([s.v for s in surfels]),
            np.array([s.n for s in surfels]),
            np.array([s.c for s in surfels]),
            np.array([s.r for s in surfels]),
            np.array([s.conf for s in surfels]),
            np.array([s.t_stamp for s in surfels]),
            np.array([s.support for s in surfels]),
        )

    def __len__(self):
        return len(self.pos)

    def __getitem__(self, i):
        return Surfel(self.pos[i].copy(), self.normal[i].copy(), self.color[i].copy(), float(self.radius[i]),
                      float(self.conf[i]), int(self.t_stamp[i]), int(self.support[i]))

    def take(self, idx):
        idx = np.asarray(idx)
        return SurfelSet(self.pos[idx], self.normal[idx], self.color[idx], self.radius[idx], self.conf[idx],
                         self.t_stamp[idx], self.support[idx])

    def copy(self):
        return self.take(np.arange(len(self)))

    def concat(self, other):
        return SurfelSet(
            np.concatenate([self.pos, other.pos]),
            np.concatenate([self.normal, other.normal]),
            np.concatenate([self.color, other.color]),
            np.concatenate([self.radius, other.radius]),
            np.concatenate([self.conf, other.conf]),
            np.concatenate([self.t_stamp, other.t_stamp]),
            np.concatenate([self.support, other.support]),
        )

    def replace(self, **kw):
        fields = dict(pos=self.pos, normal=self.normal, color=self.color, radius=self.radius, conf=self.conf,
                      t_stamp=self.t_stamp, support=self.support)
        fields.update(kw)
        return SurfelSet(**fields)


@dataclass
class GraphNode:
    id: int
    p: np.ndarray
    delta: float
    q: np.ndarray
    removal_count: int = 0


@dataclass
class DeformationGraph:
    """Nodes in id order plus directed kNN lists (node ids, -1 padded).

    Ids are handed out in increasing order and deletions keep the order, so
    ``ids`` is always sorted and id -> index lookups are a binary search.
    """

    ids: np.ndarray
    pos: np.ndarray
    delta: np.ndarray
    dq: np.ndarray
    knn: np.ndarray
    k: int = 8
    k_prime: int = 4
    removal_count: np.ndarray = None
    next_id: int = 0

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64).reshape(-1)
        self.pos = np.ascontiguousarray(self.pos, dtype=np.float64).reshape(-1, 3)
        self.delta = np.ascontiguousarray(self.delta, dtype=np.float64).reshape(-1)
        self.dq = np.ascontiguousarray(self.dq, dtype=np.float64).reshape(-1, 8)
        self.knn = np.ascontiguousarray(self.knn, dtype=np.int64).reshape(len(self.ids), self.k if len(self.ids) == 0
                                                                           else -1)
        if self.removal_count is None:
            self.removal_count = np.zeros(len(self.ids), dtype=np.int64)
        if self.k_prime > self.k:
            raise ValueError("k_prime must not exceed k")
        if len(self.ids):
            self.next_id = max(self.next_id, int(self.ids.max()) + 1)

    @classmethod
    def empty(cls, k=8, k_prime=4):
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 8)),
                   np.zeros((0, k), np.int64), k, k_prime)

    def __len__(self):
        return len(self.ids)

    def node(self, node_id):
        i = self.index_of(node_id)
        return GraphNode(int(self.ids[i]), self.pos[i].copy(), float(self.delta[i]), self.dq[i].copy(),
                         int(self.removal_count[i]))

    def index_of(self, node_ids, strict=True):
        """Indices of ``node_ids``; missing ids give -1 (or raise if strict)."""
        node_ids = np.asarray(node_ids, dtype=np.int64)
        idx = np.searchsorted(self.ids, node_ids)
        idx = np.clip(idx, 0, max(len(self.ids) - 1, 0))
        ok = (len(self.ids) > 0) & (self.ids[idx] == node_ids) if len(self.ids) else np.zeros(node_ids.shape, bool)
        if strict and not np.all(ok):
            from .errors import DanglingSupport

            raise DanglingSupport(f"unknown node ids {np.unique(node_ids[~ok])[:5]}")
        return np.where(ok, idx, -1)

    def contains(self, node_ids):
        return self.index_of(node_ids, strict=False) >= 0

    def knn_index(self):
        """kNN lists as row indices (-1 padded)."""
        out = np.full(self.knn.shape, -1, dtype=np.int64)
        valid = self.knn >= 0
        out[valid] = self.index_of(self.knn[valid])
        return out

    def take(self, idx):
        idx = np.asarray(idx)
        return DeformationGraph(self.ids[idx], self.pos[idx], self.delta[idx], self.dq[idx], self.knn[idx], self.k,
                                self.k_prime, self.removal_count[idx], self.next_id)

    def replace(self, **kw):
        fields = dict(ids=self.ids, pos=self.pos, delta=self.delta, dq=self.dq, knn=self.knn, k=self.k,
                      k_prime=self.k_prime, removal_count=self.removal_count, next_id=self.next_id)
        fields.update(kw)
        return DeformationGraph(**fields)

    def edges(self):
        """Undirected edge list (index pairs, i < j) of the symmetrised kNN relation."""
        kidx = self.knn_index()
        src = np.repeat(np.arange(len(self)), kidx.shape[1])
        dst = kidx.reshape(-1)
        ok = dst >= 0
        a, b = src[ok], dst[ok]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        if len(lo) == 0:
            return np.zeros((0, 2), np.int64)
        return np.unique(np.stack([lo, hi], axis=1), axis=0)


@dataclass
class WarpField:
    """Per-node unit dual quaternions together with the blend parameters."""

    ids: np.ndarray
    pos: np.ndarray
    delta: np.ndarray
    dq: np.ndarray

    @classmethod
    def identity(cls, graph):
        return cls(graph.ids.copy(), graph.pos.copy(), graph.delta.copy(), dqm.dq_identity(len(graph)))

    @classmethod
    def from_graph(cls, graph):
        return cls(graph.ids.copy(), graph.pos.copy(), graph.delta.copy(), graph.dq.copy())

    def __len__(self):
        return len(self.ids)


class HistoricalDistanceStore:
    """Symmetric running maximum of node-pair distances, keyed by node id.

    Stored densely and aligned with a graph's node order; rows are added and
    dropped together with nodes.
    """

    def __init__(self, ids, matrix):
        self.ids = np.asarray(ids, dtype=np.int64).copy()
        self.matrix = np.array(matrix, dtype=np.float64).reshape(len(self.ids), len(self.ids))

    @classmethod
    def from_positions(cls, ids, pos):
        pos = np.asarray(pos, dtype=float)
        return cls(ids, pairwise_distances(pos))

    def __len__(self):
        return len(self.ids)

    def _index(self, node_id):
        i = int(np.searchsorted(self.ids, node_id))
        if i >= len(self.ids) or self.ids[i] != node_id:
            raise KeyError(node_id)
        return i

    def get(self, a, b):
        return float(self.matrix[self._index(a), self._index(b)])

    def copy(self):
        return HistoricalDistanceStore(self.ids, self.matrix)

    def aligned_to(self, ids):
        """True if rows are in exactly the order of ``ids``."""
        return len(ids) == len(self.ids) and np.array_equal(np.asarray(ids), self.ids)


def pairwise_distances(a, b=None):
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = a if b is None else np.asarray(b, dtype=float).reshape(-1, 3)
    return cdist(a, b)


@dataclass
class SceneState:
    surfels: SurfelSet
    graph: DeformationGraph
    warp: WarpField
    dh: HistoricalDistanceStore
    frame: int = 0

    def check(self):
        """Referential integrity: every surfel's support node is live."""
        return bool(np.all(self.graph.contains(self.surfels.support))) if len(self.surfels) else True
