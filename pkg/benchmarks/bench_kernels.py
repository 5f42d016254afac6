"""Time the numba and numpy kernel paths against each other.

Each backend runs in its own interpreter, so the dispatch goes through the
``RIGFIT_DISABLE_NUMBA`` switch exactly as it would in production::

    python benchmarks/bench_kernels.py [--vertices 5000] [--repeat 5]
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
from rigfit import _accel
from rigfit.kernels import closest_points_on_mesh, lbs_backward, lbs_forward
from rigfit.synth import make_toy_rig, ToyRigConfig

n_vertices, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
rig = make_toy_rig(ToyRigConfig())
faces = rig.mesh.faces
K = 20
verts = rng.normal(size=(n_vertices, 3))
w = rng.random((n_vertices, K)); w /= w.sum(1, keepdims=True)
mats = np.tile(np.eye(4), (K, 1, 1)); mats[:, :3, :] += 0.1 * rng.normal(size=(K, 3, 4))
g = rng.normal(size=(n_vertices, 3))
queries = rng.normal(size=(200, 3)) * 0.5

def best(fn):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter(); fn(); times.append(time.perf_counter() - t)
    return min(times)

print(json.dumps({
    "numba": _accel.USE_NUMBA,
    "lbs_forward": best(lambda: lbs_forward(w, mats, verts)),
    "lbs_backward": best(lambda: lbs_backward(g, w, mats, verts)),
    "closest_points": best(lambda: closest_points_on_mesh(queries, rig.mesh.vertices, faces)),
}))
"""


def run(disable, args):
    env = dict(os.environ)
    env.pop("RIGFIT_DISABLE_NUMBA", None)
    if disable:
        env["RIGFIT_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", WORKER, str(args.vertices), str(args.repeat)],
                         env=env, check=True, capture_output=True, text=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vertices", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    nb, npy = run(False, args), run(True, args)
    if not nb["numba"]:
        print("numba unavailable; both runs used numpy", file=sys.stderr)
    print(f"{'kernel':<16}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for key in ("lbs_forward", "lbs_backward", "closest_points"):
        print(f"{key:<16}{nb[key] * 1e3:>12.3f}{npy[key] * 1e3:>12.3f}{npy[key] / nb[key]:>9.1f}x")


if __name__ == "__main__":
    t0 = time.time()
    main()
    print(f"total {time.time() - t0:.1f}s", file=sys.stderr)
