"""Run artifacts: binary PLY per frame, graph and event JSON lines, metrics.

Everything written here is a pure function of the model state, so two runs
with the same configuration produce identical bytes.  Wall-clock timings
are kept out of these files; they go to ``timings.jsonl``, which is only
written when the ``timings`` export kind is requested.
"""
import json
from pathlib import Path

import numpy as np

from .segmentation import surfel_labels

PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("radius", "<f4"), ("confidence", "<f4"), ("label", "<i4"),
])

_PLY_TYPES = {"<f4": "float", "u1": "uchar", "<i4": "int"}


def ply_bytes(surfels, labels):
    """Binary little-endian PLY of surfels with their object labels."""
    rec = np.zeros(len(surfels), dtype=PLY_DTYPE)
    for i, c in enumerate("xyz"):
        rec[c] = surfels.pos[:, i]
        rec["n" + c] = surfels.normal[:, i]
    rgb = np.clip(np.rint(surfels.color * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rec["radius"] = surfels.radius
    rec["confidence"] = surfels.conf
    rec["label"] = labels
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rec)}"]
    for name in PLY_DTYPE.names:
        head.append(f"property {_PLY_TYPES[PLY_DTYPE[name].str.replace('|', '')]} {name}")
    head.append("end_header")
    return ("\n".join(head) + "\n").encode("ascii") + rec.tobytes()


def read_ply(path):
    """Read a PLY written by :func:`ply_bytes` into a structured array."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    return np.frombuffer(data[end:], dtype=PLY_DTYPE)


def write_ply(path, surfels, labels):
    Path(path).write_bytes(ply_bytes(surfels, labels))


def _r(x, nd=6):
    return [round(float(v), nd) for v in np.ravel(x)]


def graph_record(frame, graph, dh, objects, floor=0.0):
    """One JSON-ready dict describing the graph after ``frame``.

    Historical distances are sparsified: only pairs whose d_h exceeds the
    current distance by more than ``floor`` are listed, since all other
    entries equal the current distance and follow from the node positions.
    """
    obj_of = {}
    for o in objects:
        for nid in o.graph.ids:
            obj_of[int(nid)] = o.id
    nodes = [{"id": int(i), "p": _r(p), "delta": round(float(d), 6), "object": obj_of.get(int(i), -1)}
             for i, p, d in zip(graph.ids, graph.pos, graph.delta)]
    e = graph.edges()
    edges = [[int(graph.ids[a]), int(graph.ids[b])] for a, b in e]
    dh_list = []
    if len(graph) > 1:
        d_now = np.linalg.norm(graph.pos[:, None, :] - graph.pos[None, :, :], axis=2)
        a, b = np.nonzero(np.triu(dh.matrix - d_now > floor, 1))
        dh_list = [[int(graph.ids[i]), int(graph.ids[j]), round(float(dh.matrix[i, j]), 6)] for i, j in zip(a, b)]
    return {"frame": int(frame), "nodes": nodes, "edges": edges, "dh": dh_list}


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class RunWriter:
    """Writes the selected artifacts of a run into ``out``."""

    KINDS = ("geometry", "graph", "events", "metrics", "timings")

    def __init__(self, out, kinds=("geometry", "graph", "events", "metrics"), dh_floor=0.0):
        unknown = set(kinds) - set(self.KINDS)
        if unknown:
            raise ValueError(f"unknown export kinds {sorted(unknown)}")
        self.out = Path(out)
        self.kinds = set(kinds)
        self.dh_floor = dh_floor
        self.out.mkdir(parents=True, exist_ok=True)
        self._files = {}
        for kind, name in (("graph", "graph.jsonl"), ("events", "events.jsonl"), ("timings", "timings.jsonl")):
            if kind in self.kinds:
                self._files[kind] = open(self.out / name, "w")

    def frame(self, result):
        st = result.state
        if "geometry" in self.kinds:
            lab = surfel_labels(result.objects, st.surfels)
            write_ply(self.out / f"frame_{result.frame:04d}.ply", st.surfels, lab)
        if "graph" in self.kinds:
            self._files["graph"].write(dumps(graph_record(result.frame, st.graph, st.dh, result.objects,
                                                          self.dh_floor)) + "\n")
        if "events" in self.kinds:
            self._files["events"].write(dumps(result.log) + "\n")
        if "timings" in self.kinds:
            rec = {"frame": result.frame, **{k: round(v, 6) for k, v in result.timings.items()}}
            self._files["timings"].write(dumps(rec) + "\n")

    def metrics(self, metrics):
        if "metrics" in self.kinds:
            (self.out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")

    def close(self):
        for f in self._files.values():
            f.close()
        self._files = {}

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
