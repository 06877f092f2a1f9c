"""Per-frame loop: measure, align, update, separate."""
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import dq as dqm
from . import params as pm
from .alignment import align, apply_alignment
from .errors import InitializationFailed, SolverDiverged
from .measurement import FusionBuffer, TsdfVolume, capture, fuse_depth
from .model import DeformationGraph, HistoricalDistanceStore, SceneState, WarpField, pairwise_distances
from .sampling import knn_from_matrix, poisson_disk_sample
from .segmentation import ObjectTracker, split_objects
from .update import update

STAGES = ("measure", "align", "update", "separate")


def init_state(meas, r_sample=0.025, k=8, k_prime=4, delta_factor=2.0, rng=None):
    """Initial model from the first measurement.

    Surfels are the measurement; nodes a Poisson-disk subset of their
    positions at ``r_sample``; kNN lists and historical distances come from
    the current Euclidean distances; supports are the nearest node.
    """
    s = meas.surfels if hasattr(meas, "surfels") else meas
    if len(s) < 2:
        raise InitializationFailed(f"need at least 2 surfels to initialise, got {len(s)}")
    pick = poisson_disk_sample(s.pos, r_sample, rng)
    pos = s.pos[pick]
    ids = np.arange(len(pick), dtype=np.int64)
    d = pairwise_distances(pos)
    graph = DeformationGraph(ids, pos, np.full(len(ids), delta_factor * r_sample), dqm.dq_identity(len(ids)),
                             knn_from_matrix(d, ids, k), k, k_prime)
    _, near = cKDTree(pos).query(s.pos)
    s = s.copy()
    s.support[:] = ids[near]
    return SceneState(s, graph, WarpField.identity(graph), HistoricalDistanceStore(ids, d), int(meas.frame)
                      if hasattr(meas, "frame") else 0)


@dataclass
class FrameResult:
    frame: int
    state: SceneState
    objects: list
    log: dict
    timings: dict = field(default_factory=dict)


class Pipeline:
    """Runs a scene frame by frame.

    ``params`` is a validated flat parameter dict (see :mod:`topofusion.params`).
    The seed drives two independent streams: depth noise and node sampling.
    """

    def __init__(self, scene, params=None, seed=0):
        self.scene = scene
        self.params = pm.validate({}) if params is None else params
        p = self.params
        self.cams = list(scene.cameras)
        lo, hi = scene.bounds(p["volume_margin"])
        self.volume = TsdfVolume.from_bounds(lo, hi, p["voxel_size"], p["trunc_voxels"], p["w_max"])
        self.fusion = FusionBuffer(self.volume)
        self.noise_sigma = scene.noise_sigma if p["noise_sigma"] < 0 else p["noise_sigma"]
        noise_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
        self.noise_rng = np.random.default_rng(noise_seed)
        self.sample_rng = np.random.default_rng(sample_seed)
        self.solver_cfg = pm.solver_config(p)
        self.update_cfg = pm.update_config(p)
        self.tracker = ObjectTracker()
        self.state = None

    def capture(self, frame):
        return capture(self.scene, self.cams, frame, self.noise_sigma, self.noise_rng, self.params["max_view_angle"])

    def measure(self, frame):
        return fuse_depth(*self.capture(frame), self.cams, self.volume, frame, self.fusion)

    def step(self, frame):
        p = self.params
        tim = {}
        # synthetic depth rendering stands in for the camera; timed apart from the pipeline stages
        t0 = time.perf_counter()
        raw, colors = self.capture(frame)
        tim["sensor"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        meas = fuse_depth(raw, colors, self.cams, self.volume, frame, self.fusion)
        tim["measure"] = time.perf_counter() - t0
        log = {"frame": int(frame), "stages": list(STAGES), "degraded": False, "init": self.state is None}
        if self.state is None:
            t0 = time.perf_counter()
            self.state = init_state(meas, p["r_sample"], p["k"], p["k_prime"], p["delta_factor"], self.sample_rng)
            tim["align"] = 0.0
            tim["update"] = time.perf_counter() - t0
            log.update(measured=len(meas.surfels), appended=len(self.state.surfels), new_nodes=len(self.state.graph))
        else:
            st = self.state
            t0 = time.perf_counter()
            try:
                warp, info = align(st.surfels, st.graph, meas, self.cams, self.solver_cfg)
                log["solver"] = {"pairs": [int(x) for x in info.pairs], "iterations": int(info.iterations),
                                 "rejected": int(info.rejected),
                                 "energy_start": float(info.energies[0]) if info.energies else 0.0,
                                 "energy_end": float(info.energies[-1]) if info.energies else 0.0}
            except SolverDiverged as exc:
                warp = WarpField.identity(st.graph)
                log["degraded"] = True
                log["solver"] = {"error": str(exc)}
            s_align, g_upd = apply_alignment(st.surfels, st.graph, warp)
            tim["align"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            s, g, dh, ulog = update(s_align, g_upd, st.dh, meas, self.cams, frame, self.update_cfg, self.sample_rng)
            tim["update"] = time.perf_counter() - t0
            self.state = SceneState(s, g, warp, dh, int(frame))
            log["measured"] = len(meas.surfels)
            log.update(ulog.to_dict())
        t0 = time.perf_counter()
        objects = split_objects(self.state.surfels, self.state.graph, tracker=self.tracker)
        tim["separate"] = time.perf_counter() - t0
        log["n_surfels"] = len(self.state.surfels)
        log["n_nodes"] = len(self.state.graph)
        log["n_components"] = len(objects)
        log["objects"] = [{"id": o.id, "surfels": len(o.surfels), "nodes": len(o.graph)} for o in objects]
        tim["total"] = sum(tim[s] for s in STAGES)
        return FrameResult(int(frame), self.state, objects, log, tim)

    def run(self, frames=None):
        """Generator over :class:`FrameResult` for ``frames`` (default: all)."""
        frames = range(self.scene.frames) if frames is None else frames
        for f in frames:
            yield self.step(f)
