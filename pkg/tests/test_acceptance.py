"""End-to-end acceptance criteria, each at its stated tolerance.

Every check records its outcome; a one-line PASS/FAIL summary per criterion
is printed at the end of the pytest run.  The scenario runs are cached per
session so the LIFT run feeds several criteria.
"""
import os
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_unit_dq
from test_alignment import random_problem
from test_segmentation import graph_with_knn, union_find_components
from test_update import _cam, exhaustive_register
from test_warp import _blend_oracle
from topofusion import alignment as al
from topofusion import dq as dqm
from topofusion import measurement as ms
from topofusion import update as up
from topofusion import warp as wp
from topofusion.alignment import SolverConfig
from topofusion.camera import CameraModel, DepthMap
from topofusion.cli import main as cli_main
from topofusion.harness import get_scene, score_segmentation
from topofusion.harness.builtin import BUILTIN, LIFT_DETACH_FRAME, LIFT_REST_FRAME
from topofusion.params import defaults
from topofusion.pipeline import Pipeline
from topofusion.segmentation import connected_components
from topofusion.update import UpdateConfig

from conftest import make_surfels

pytestmark = pytest.mark.slow


def check(crit, part, ok, detail=""):
    ACCEPTANCE.append((crit, part, bool(ok), detail))
    print(f"criterion {crit} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {crit} {part}: {detail}"


# ---------------------------------------------------------------------------
# cached scene runs

_RUNS = {}


def scene_run(name, seed=0):
    """Full run of a built-in scene with per-frame logs, node positions and a
    frame-by-frame check of the historical distances."""
    key = (name, seed)
    if key in _RUNS:
        return _RUNS[key]
    sc = get_scene(name)
    pipe = Pipeline(sc, seed=seed)
    logs, nodes, totals = [], [], []
    dh_violation = 0.0
    prev = None
    t0 = time.perf_counter()
    scores = {}
    for res in pipe.run():
        st = res.state
        logs.append(res.log)
        nodes.append((st.graph.ids.copy(), st.graph.pos.copy()))
        totals.append(res.timings["total"])
        if prev is not None:
            common, a, b = np.intersect1d(prev[0], st.dh.ids, return_indices=True)
            drop = prev[1][np.ix_(a, a)] - st.dh.matrix[np.ix_(b, b)]
            dh_violation = max(dh_violation, float(drop.max()) if drop.size else 0.0)
        prev = (st.dh.ids.copy(), st.dh.matrix.copy())
        if name == "lift":
            scores[res.frame] = score_segmentation(res.objects, sc.ground_truth(res.frame))
    out = SimpleNamespace(scene=sc, logs=logs, nodes=nodes, totals=totals, dh_violation=dh_violation,
                          wall=time.perf_counter() - t0, scores=scores)
    _RUNS[key] = out
    return out


# ---------------------------------------------------------------------------
# 1. formula fidelity


def test_criterion_1_formula_fidelity():
    geo = make_surfels([[0.0, 0.0, 1.0]], normal=np.array([[0.0, 0.0, 1.0]]), conf=3.0, radius=0.004, t=2)
    geo.color[:] = [0.2, 0.4, 0.6]
    meas = make_surfels([[0.4, 0.0, 0.2]], normal=np.array([[1.0, 0.0, 0.0]]), conf=1.0, radius=0.008, t=7)
    meas.color[:] = [1.0, 0.0, 0.2]
    out = up.fuse_matched(geo, meas, np.array([0]), np.array([0]))
    n = np.array([0.25, 0.0, 0.75])
    err = max(np.abs(out.pos[0] - [0.1, 0.0, 0.8]).max(), np.abs(out.normal[0] - n / np.linalg.norm(n)).max(),
              abs(out.radius[0] - 0.005), np.abs(out.color[0] - [0.4, 0.3, 0.5]).max(), abs(out.conf[0] - 4.0))
    check(1, "fuse_matched", err <= 1e-9 and out.t_stamp[0] == 7, f"max error {err:.1e}")
    cam = CameraModel(100.0, 100.0, 0.0, 0.0, 1, 1)
    kept = []
    for angle in (69.9, 70.0, 70.1):
        a = np.deg2rad(angle)
        dm = DepthMap(np.ones((1, 1)), np.array([np.sin(a), 0.0, -np.cos(a)]).reshape(1, 1, 3))
        kept.append(bool(ms.view_angle_filter(dm, cam).valid[0, 0]))
    check(1, "70 deg cutoff", ms.MAX_VIEW_ANGLE_DEG == 70.0 and kept == [True, True, False], f"kept {kept}")
    check(1, "4x supersampling", up.SUPERSAMPLE == 4, f"SUPERSAMPLE={up.SUPERSAMPLE}")


# ---------------------------------------------------------------------------
# 2. solver correctness


def test_criterion_2_rigid_translation_nodes():
    run = scene_run("translate")
    worst = []
    for (ia, pa), (ib, pb) in zip(run.nodes, run.nodes[1:]):
        common, a, b = np.intersect1d(ia, ib, return_indices=True)
        worst.append(np.linalg.norm(pb[b] - pa[a] - [0.01, 0.0, 0.0], axis=1).max())
    worst = np.array(worst)
    f = int(np.argmax(worst)) + 1
    check(2, "node transforms", worst.max() <= 1e-3,
          f"max node error {worst.max() * 1e3:.2f} mm (frame {f}); frames within 1 mm: "
          f"{int(np.sum(worst <= 1e-3))}/{len(worst)}")


def test_criterion_2_runtime():
    run = scene_run("translate")
    check(2, "runtime", run.wall < 5.0, f"{run.wall:.2f} s for {len(run.logs)} frames")


def test_criterion_2_energy_non_increasing():
    cfg = SolverConfig(max_iterations=10)
    bad = 0
    for trial in range(100):
        rng = np.random.default_rng(5000 + trial)
        prob = random_problem(rng, perturb=0.01)
        _, energies, _, _, _ = al.solve_problem(prob, dqm.dq_identity(prob.n_nodes), cfg)
        bad += int(np.any(np.diff(energies) > 0.0))
    check(2, "energy non-increasing", bad == 0, f"{100 - bad}/100 problems")


def test_criterion_2_jacobians():
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(7000 + trial)
        prob = random_problem(rng)
        q0 = random_unit_dq(rng, prob.n_nodes, rot_scale=0.2, t_scale=0.02)
        _, jac = prob.linearize(q0)
        jac = jac.toarray()
        eps = 1e-6
        num = np.zeros_like(jac)
        for c in range(jac.shape[1]):
            xi = np.zeros(jac.shape[1])
            xi[c] = eps
            num[:, c] = (prob.residuals(al.apply_twists(q0, prob.node_pos, xi))
                         - prob.residuals(al.apply_twists(q0, prob.node_pos, -xi))) / (2 * eps)
        worst = max(worst, np.linalg.norm(jac - num) / np.linalg.norm(num))
    check(2, "jacobians", worst <= 1e-4, f"max relative error {worst:.1e} over 20 graphs of <= 10 nodes")


# ---------------------------------------------------------------------------
# 3-6. LIFT and the other scenes


def _first(logs, pred):
    return next((i for i, L in enumerate(logs) if pred(L)), None)


def test_criterion_3_lift_separation():
    run = scene_run("lift")
    counts = [L["n_components"] for L in run.logs]
    split = _first(run.logs, lambda L: L["n_components"] >= 2)
    ok = split is not None and counts[LIFT_DETACH_FRAME - 1] == 1 and split - LIFT_DETACH_FRAME <= 15
    check(3, "1 -> 2 transition", ok, f"split at frame {split}, detach at {LIFT_DETACH_FRAME}")
    acc = run.scores[LIFT_DETACH_FRAME + 15].accuracy
    check(3, "accuracy at detach+15", acc >= 0.95, f"{acc:.3f}")
    after = set(counts[LIFT_REST_FRAME:])
    check(3, "separate after re-placement", after == {2}, f"counts from frame {LIFT_REST_FRAME}: {sorted(after)}")


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_criterion_4_dh_monotone(name):
    run = scene_run(name)
    check(4, f"d_h monotone ({name})", run.dh_violation <= 0.0, f"largest decrease {run.dh_violation:.1e} m")


def test_criterion_4_lift_stays_separate():
    run = scene_run("lift")
    last = run.logs[-1]["n_components"]
    check(4, "LIFT components after re-placement", last == 2, f"{last} components at the last frame")


def test_criterion_5_compression_guard():
    run = scene_run("lift")
    on_comp = sum(L.get("appended_on_compressed", 0) for L in run.logs)
    frames = [i for i, L in enumerate(run.logs) if L.get("compressed_nodes", 0) > 0]
    rejected = sum(L.get("rejected_compressed", 0) for L in run.logs)
    check(5, "zero appends on compressed supports", on_comp == 0 and len(frames) > 0,
          f"{on_comp} appended; compressed nodes on {len(frames)} frames; {rejected} candidates rejected")


def test_criterion_6_local_reinitialisation():
    run = scene_run("lift")
    gamma = defaults()["gamma_remove"]
    node = _first(run.logs, lambda L: len(L.get("removed_nodes", [])) > 0)
    split = _first(run.logs, lambda L: L["n_components"] >= 2)
    removed_before = sum(L.get("removed_surfels", 0) for L in run.logs[:node + 1]) if node is not None else 0
    ok = (node is not None and split is not None and node <= split and removed_before > 0
          and run.logs[node]["max_node_count"] > gamma)
    check(6, "event order", ok, f"node removal at {node} (count {run.logs[node]['max_node_count'] if node is not None else '-'}"
          f" > {gamma}), components increase at {split}")
    pre = run.logs[LIFT_DETACH_FRAME - 1]["n_surfels"]
    post = run.logs[split]["n_surfels"] if split is not None else 0
    check(6, "surfels kept", post >= 0.8 * pre, f"{post}/{pre} = {post / pre:.1%}")


# ---------------------------------------------------------------------------
# 7. oracles


def test_criterion_7_oracles():
    rng = np.random.default_rng(11)
    mism = 0
    for _ in range(1000):
        n = int(rng.integers(1, 101))
        k = int(rng.integers(1, 5))
        knn = np.full((n, k), -1, dtype=np.int64)
        for i in range(n):
            m = int(rng.integers(0, min(k, n - 1) + 1))
            if m:
                knn[i, :m] = rng.choice(np.delete(np.arange(n), i), size=m, replace=False)
        got = [list(c) for c in connected_components(graph_with_knn(knn))]
        mism += int(got != union_find_components(n, knn))
    check(7, "connected components", mism == 0, f"{1000 - mism}/1000 graphs")

    mism = 0
    trials = 40
    for trial in range(trials):
        r = np.random.default_rng(300 + trial)
        w, h = int(r.integers(2, 9)), int(r.integers(2, 9))
        cams = [_cam(w, h)]
        n_geo = int(r.integers(1, 40))
        z = r.uniform(0.9, 1.1, n_geo)
        gpos = np.stack([(r.uniform(-0.5, w - 0.5, n_geo) - cams[0].cx) / w * z,
                         (r.uniform(-0.5, h - 0.5, n_geo) - cams[0].cy) / w * z, z], axis=1)
        gnrm = r.normal(size=(n_geo, 3)) * 0.3 + [0, 0, -1.0]
        gnrm /= np.linalg.norm(gnrm, axis=1, keepdims=True)
        mpos = gpos[r.integers(0, n_geo, w * h)] + r.normal(scale=0.02, size=(w * h, 3))
        mnrm = r.normal(size=(w * h, 3)) * 0.3 + [0, 0, -1.0]
        mnrm /= np.linalg.norm(mnrm, axis=1, keepdims=True)
        mm = np.arange(w * h).reshape(h, w)
        mm[r.random((h, w)) < 0.2] = -1
        meas = SimpleNamespace(surfels=make_surfels(mpos, normal=mnrm), index_maps=[mm])
        cfg = UpdateConfig()
        reg = up.register(make_surfels(gpos, normal=gnrm), meas, cams, cfg)
        want = exhaustive_register(make_surfels(gpos, normal=gnrm), mpos, mnrm, [mm], cams, 4, cfg.gamma_distance,
                                   cfg.gamma_normal)
        mism += int(sorted(zip(reg.geo.tolist(), reg.meas.tolist())) != want)
    check(7, "register", mism == 0, f"{trials - mism}/{trials} crafted images up to 8x8")

    worst = 0.0
    for trial in range(200):
        r = np.random.default_rng(900 + trial)
        n = int(r.integers(1, 6))
        p = r.normal(scale=0.03, size=(n, 3))
        delta = r.uniform(0.03, 0.08, n)
        q = random_unit_dq(r, n, rot_scale=0.5) * r.choice([-1.0, 1.0], size=(n, 1))
        v = r.normal(scale=0.03, size=3)
        got = wp.blend_warp(v, list(zip(p, delta, q)))
        want = _blend_oracle(v, p, delta, q)
        worst = max(worst, min(np.abs(got - want).max(), np.abs(got + want).max()))
    check(7, "blend_warp", worst <= 1e-6, f"max deviation {worst:.1e} over 200 inputs")


# ---------------------------------------------------------------------------
# 8. desk throughput


def test_criterion_8_desk_throughput():
    run = scene_run("desk")
    surf = run.logs[-1]["n_surfels"]
    nodes = run.logs[-1]["n_nodes"]
    # frame 0 only initialises; the mean covers every tracked frame
    mean = float(np.mean(run.totals[1:]))
    scale_ok = 12000 <= surf <= 14000 and 850 <= nodes <= 950
    check(8, "desk scale", scale_ok, f"{surf} surfels, {nodes} nodes")
    check(8, "mean frame time", mean <= 0.5, f"{mean * 1e3:.0f} ms/frame over {len(run.totals) - 1} frames "
          f"({os.cpu_count()} cores here, criterion stated for 8; sensor rendering excluded)")


# ---------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert cli_main(["run", "--scene", "builtin:lift", "--frames", "0..24", "--seed", "3", "--out", str(out)]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    check(9, "byte-identical exports", same and names == sorted(p.name for p in outs[1].iterdir()),
          f"{len(names)} files compared")
