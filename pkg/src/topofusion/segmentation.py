"""Topology separation: connected components of the deformation graph and
per-object models with ids that persist across frames."""
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

from .model import DeformationGraph, SurfelSet


@dataclass
class ObjectModel:
    id: int
    surfels: SurfelSet
    graph: DeformationGraph

    @property
    def node_ids(self):
        return self.graph.ids

    def __len__(self):
        return len(self.surfels)


def component_labels(graph):
    """Component label per node (graph order); labels are numbered by the
    smallest node id they contain."""
    n = len(graph)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    e = graph.edges()
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)) if len(e) else coo_matrix((n, n))
    _, lab = _cc(adj, directed=False)
    # ids are sorted, so the first occurrence of a label holds its smallest id
    _, first = np.unique(lab, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[lab]


def connected_components(graph):
    """Node-id arrays of the symmetrised kNN components, ordered by smallest id."""
    lab = component_labels(graph)
    if len(lab) == 0:
        return []
    return [graph.ids[lab == c] for c in range(lab.max() + 1)]


class ObjectTracker:
    """Assigns persistent object ids to components frame after frame.

    Each component inherits the id of the previous object with which it
    shares the most node ids; an old id goes to at most one component (the
    one with the largest overlap, ties to the smaller component index).
    Unclaimed components get fresh ids.  Objects that ended a frame without
    surfels are dropped before matching, so an empty object is reported for
    exactly one frame.
    """

    def __init__(self):
        self.prev = []          # list of (id, node ids, had surfels)
        self.next_id = 0

    def assign(self, components):
        live = [(oid, ids) for oid, ids, nonempty in self.prev if nonempty]
        out = [-1] * len(components)
        cand = []
        for ci, comp in enumerate(components):
            for oid, ids in live:
                ov = len(np.intersect1d(comp, ids, assume_unique=True))
                if ov:
                    cand.append((-ov, ci, oid))
        cand.sort()
        used = set()
        for _, ci, oid in cand:
            if out[ci] < 0 and oid not in used:
                out[ci] = oid
                used.add(oid)
        for ci in range(len(components)):
            if out[ci] < 0:
                out[ci] = self.next_id
                self.next_id += 1
        return out

    def commit(self, objects):
        self.prev = [(o.id, o.graph.ids.copy(), len(o.surfels) > 0) for o in objects]
        if objects:
            self.next_id = max(self.next_id, max(o.id for o in objects) + 1)


def split_objects(surfels, graph, components=None, tracker=None):
    """Partition surfels and nodes into :class:`ObjectModel` instances.

    Surfels follow their support node.  Object ids come from ``tracker`` when
    given (and it is updated), otherwise they are the component indices.
    """
    components = connected_components(graph) if components is None else components
    node_lab = np.full(len(graph), -1, dtype=np.int64)
    for c, ids in enumerate(components):
        node_lab[graph.index_of(ids)] = c
    s_lab = node_lab[graph.index_of(surfels.support)] if len(surfels) else np.zeros(0, np.int64)
    ids = tracker.assign(components) if tracker is not None else list(range(len(components)))
    objs = []
    for c, oid in enumerate(ids):
        objs.append(ObjectModel(int(oid), surfels.take(np.nonzero(s_lab == c)[0]), graph.take(np.nonzero(node_lab == c)[0])))
    if tracker is not None:
        tracker.commit(objs)
    return objs


def surfel_labels(objects, surfels):
    """Object id per surfel of ``surfels``, recovered through supports."""
    lab = np.full(len(surfels), -1, dtype=np.int64)
    for o in objects:
        lab[np.isin(surfels.support, o.graph.ids)] = o.id
    return lab
