"""Self-supervised fit of a unit-sphere cloud; prints band error and mesh Chamfer distance.

    python scripts/sphere_fit.py --iterations 2000 --lambda-scc 0.01
"""

import argparse
import time

import numpy as np

from scanfuse.fields import AnalyticField, NetworkField, evaluate_grid
from scanfuse.meshing import marching_cubes, sample_mesh_surface
from scanfuse.metrics import compute_metrics
from scanfuse.network import NetworkArch
from scanfuse.phantom import Sphere
from scanfuse.pointcloud import PointCloud, sample_training_queries
from scanfuse.selfsup import SelfSupConfig, train_view


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--n-uniform", type=int, default=4000)
    ap.add_argument("--lambda-scc", type=float, default=0.01)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", help="write the loss log CSV here")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    p = rng.normal(size=(args.points, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    qs = sample_training_queries(PointCloud(p), 20, 50, n_uniform=args.n_uniform, seed=args.seed + 1)
    cfg = SelfSupConfig(iterations=args.iterations, batch=min(5000, len(qs)), lambda_scc=args.lambda_scc,
                        seed=args.seed)
    arch = NetworkArch(args.layers, args.hidden, args.layers // 2 if args.layers > 1 else None)
    t0 = time.perf_counter()
    net, rows = train_view(qs, cfg, arch, log_path=args.log)
    print(f"trained in {time.perf_counter() - t0:.1f} s, loss {rows[0][2]:.5f} -> {rows[-1][2]:.5f}")

    x = rng.normal(size=(20000, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    x *= rng.uniform(0.9, 1.1, size=(20000, 1))
    print(f"band error {np.mean(np.abs(net(x) - (np.linalg.norm(x, axis=1) - 1))):.5f}")
    box = ((-1.1,) * 3, (1.1,) * 3)
    recon = marching_cubes(evaluate_grid(NetworkField(net), 64, box))
    truth = marching_cubes(evaluate_grid(AnalyticField(Sphere((0, 0, 0), 1.0)), 64, box))
    r = compute_metrics(sample_mesh_surface(recon, 30000, 1), sample_mesh_surface(truth, 30000, 2))
    print(r.to_text(), end="")


if __name__ == "__main__":
    main()
