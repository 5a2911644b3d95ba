"""Row / column / CSG / refined Chamfer distances on a phantom across seeds and thicknesses.

    python scripts/fusion_trend.py --phantom EllipsoidPair --seeds 0 1 2 --thickness 0.1 0.2

Each (seed, thickness) cell runs the full desk pipeline into --out/<phantom>_t<thickness>_s<seed>.
"""

import argparse
import csv
import sys
from pathlib import Path

from scanfuse import pipeline as P


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--phantom", default="EllipsoidPair")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--thickness", type=float, nargs="+", default=[0.2])
    ap.add_argument("--preset", default="desk", choices=sorted(P.PRESETS))
    ap.add_argument("--iterations", type=int, help="override both training stages")
    ap.add_argument("--out", default="runs/fusion_trend")
    args = ap.parse_args(argv)

    rows = []
    for t in args.thickness:
        for seed in args.seeds:
            over = {"phantom": args.phantom, "scan": {"thickness": t}}
            if args.iterations:
                over["selfsup"] = {"iterations": args.iterations}
                over["refine"] = {"iterations": args.iterations}
            out = Path(args.out) / f"{args.phantom}_t{t:g}_s{seed}"
            cfg = P.resolve_config(over, preset=args.preset, seed=seed, out=str(out))
            P.run_pipeline(cfg)
            cd = {n: float((out / f"metrics_{n}.csv").read_text().splitlines()[1].split(",")[0])
                  for n in P.MESH_NAMES}
            gain = 1 - cd["refined"] / min(cd["row"], cd["col"])
            rows.append([args.phantom, t, seed, *(cd[n] for n in P.MESH_NAMES), gain])
            print(f"t={t:g} seed={seed}  " + "  ".join(f"{n} {cd[n]:.4f}" for n in P.MESH_NAMES)
                  + f"  gain vs best view {100 * gain:.1f}%", flush=True)

    w = csv.writer(sys.stdout)
    w.writerow(["phantom", "thickness", "seed", *P.MESH_NAMES, "gain_vs_best_view"])
    w.writerows(rows)


if __name__ == "__main__":
    main()
