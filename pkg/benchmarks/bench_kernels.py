"""Compare the numba and numpy backends.

Two measurements per backend, each in its own subprocess because the backend
is fixed at import time by ``TOPOFUSION_NUMBA``:

* kernel: the alignment problem of one tracked frame, timing the depth and
  regularisation terms, normal-equation assembly and the block CG solve;
* pipeline: mean per-stage frame time over a short scene run.

Usage::

    python benchmarks/bench_kernels.py [--scene translate] [--frames 8] [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from topofusion import alignment as al
from topofusion._accel import backend_name
from topofusion.harness import get_scene
from topofusion.pipeline import Pipeline

scene, frames, repeat = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
pipe = Pipeline(get_scene(scene), seed=0)
stage = {}
captured = {}
orig = al.solve_problem

def spy(problem, node_dq, cfg):
    captured.setdefault("p", (problem, node_dq.copy()))
    return orig(problem, node_dq, cfg)

al.solve_problem = spy
for res in pipe.run(range(frames)):
    if res.frame >= 2:
        for k, v in res.timings.items():
            stage.setdefault(k, []).append(v)
al.solve_problem = orig

def best(fn):
    fn()
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)

problem, q = captured["p"]
rd, jd, rr, jr = problem.terms(q)
pattern = al.block_pattern(problem.nbr, problem.edges, problem.n_nodes)
kern = {
    "terms": best(lambda: problem.terms(q)),
    "normal_equations": best(lambda: problem.normal_equations(q, pattern, (rd, jd, rr, jr))),
    "block_pattern": best(lambda: al.block_pattern(problem.nbr, problem.edges, problem.n_nodes)),
}
h, g = problem.normal_equations(q, pattern, (rd, jd, rr, jr))
kern["block_cg"] = best(lambda: al.block_cg(pattern.indptr, pattern.cols, pattern.diag, h, -g, 1e-3, 1e-3, 200))
print(json.dumps({"backend": backend_name(), "nodes": int(problem.n_nodes),
                  "kernel": kern, "stage": {k: float(np.mean(v)) for k, v in stage.items()}}))
"""


def run(flag, args):
    env = dict(os.environ, TOPOFUSION_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, args.scene, str(args.frames), str(args.repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default="translate")
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    t0 = time.perf_counter()
    nb, np_ = run("1", args), run("0", args)
    print(f"scene {args.scene}, {args.frames} frames, alignment problem with {nb['nodes']} nodes")
    print(f"{'':22s}{'numba ms':>10s}{'numpy ms':>10s}{'speedup':>9s}")
    for group in ("kernel", "stage"):
        for k in nb[group]:
            a, b = nb[group][k] * 1e3, np_[group][k] * 1e3
            print(f"{group + ':' + k:22s}{a:10.2f}{b:10.2f}{b / max(a, 1e-9):9.1f}x")
    print(f"(wall {time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
