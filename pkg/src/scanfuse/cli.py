"""``scanfuse`` command line: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .selfsup import NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("scanfuse")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file; unknown keys are errors")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--preset", choices=sorted(P.PRESETS), help="scale preset (default: desk)")
    p.add_argument("--out", help="output directory or file, depending on the subcommand")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scanfuse", description="Row/column neural SDF fusion and refinement.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline into --out")
    _common(p)

    p = sub.add_parser("synth", help="simulate one scan of the configured phantom")
    _common(p)
    p.add_argument("--view", choices=("row", "col"), required=True)
    p.add_argument("--gt-mesh", help="also write the ground-truth mesh here")

    p = sub.add_parser("normalize", help="fit one transform to both clouds and apply it")
    _common(p)
    p.add_argument("row")
    p.add_argument("col")
    p.add_argument("--identity", action="store_true", help="write the clouds unchanged (phantom inputs)")

    p = sub.add_parser("fit", help="self-supervised fit of one view")
    _common(p)
    p.add_argument("cloud")
    p.add_argument("--view", choices=("row", "col"), required=True)
    p.add_argument("--log", help="loss log CSV")

    p = sub.add_parser("fuse", help="combine two fields (networks or grids) into an RCSD grid")
    _common(p)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--op", choices=("intersect", "union", "difference"), default="intersect")
    p.add_argument("--res", type=int, help="grid resolution (default: the config's mesh_res)")

    p = sub.add_parser("refine", help="supervised refinement of the fused row/col networks")
    _common(p)
    p.add_argument("row")
    p.add_argument("col")
    p.add_argument("--log", help="loss log CSV")

    p = sub.add_parser("mesh", help="marching cubes of a network or grid file into OBJ")
    _common(p)
    p.add_argument("source")
    p.add_argument("--res", type=int, help="grid resolution for networks (default: the config's mesh_res)")

    p = sub.add_parser("eval", help="metric report of a mesh or cloud against ground truth")
    _common(p)
    p.add_argument("recon")
    p.add_argument("gt")
    p.add_argument("--samples", type=int, help="surface samples per mesh (default: the config's)")
    p.add_argument("--transform", help="transform file; report in original units")
    return ap


def _config(args) -> P.PipelineConfig:
    overrides = P.load_config_file(args.config) if args.config else {}
    out = args.out if args.command == "run" else None
    return P.resolve_config(overrides, preset=args.preset, seed=args.seed, out=out)


def _need_out(args, default: str) -> Path:
    return Path(args.out or default)


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")


def dispatch(args) -> int:
    cfg = _config(args)
    cmd = args.command
    if cmd == "run":
        manifest = P.run_pipeline(cfg)
        print(f"wrote {len(manifest['artifacts'])} artifacts to {cfg.out}")
        for name in P.MESH_NAMES:
            report = Path(cfg.out) / f"metrics_{name}.csv"
            if report.exists():
                cd, hd = report.read_text().splitlines()[1].split(",")[:2]
                print(f"  {name:8s} CD {float(cd):.5f}  HD {float(hd):.5f}")
    elif cmd == "synth":
        if not cfg.uses_phantom:
            raise P.ConfigError("synth needs a phantom in the config")
        out = _need_out(args, f"{args.view}.xyz")
        P.stage_synth(cfg, args.view, out, args.gt_mesh)
        print(out)
    elif cmd == "normalize":
        _require(args.row, args.col)
        out = _need_out(args, ".")
        out.mkdir(parents=True, exist_ok=True)
        tf = P.stage_normalize(args.row, args.col, out / "row.xyz", out / "col.xyz", out / "transform.txt",
                               cfg.normalize_margin, identity=args.identity)
        print(tf.to_text(), end="")
    elif cmd == "fit":
        _require(args.cloud)
        out = _need_out(args, f"{args.view}.rcsn")
        P.stage_fit(cfg, args.view, args.cloud, out, args.log)
        print(out)
    elif cmd == "fuse":
        _require(args.a, args.b)
        out = _need_out(args, "fused.rcsd")
        P.stage_fuse(args.a, args.b, out, args.res or cfg.mesh_res, args.op)
        print(out)
    elif cmd == "refine":
        _require(args.row, args.col)
        out = _need_out(args, "refined.rcsn")
        P.stage_refine(cfg, args.row, args.col, out, args.log)
        print(out)
    elif cmd == "mesh":
        _require(args.source)
        out = _need_out(args, Path(args.source).with_suffix(".obj").name)
        mesh = P.stage_mesh(args.source, out, args.res or cfg.mesh_res)
        print(f"{out}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    elif cmd == "eval":
        _require(args.recon, args.gt, args.transform)
        out = _need_out(args, "metrics")
        report = P.stage_eval(args.recon, args.gt, out, args.samples or cfg.metrics.n_samples,
                              P.stage_seed(cfg.seed, "eval"), args.transform)
        print(report.to_text(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except P.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, NumericalFailure):
            return EXIT_NUMERIC
        if isinstance(exc.cause, P.ConfigError):
            return EXIT_CONFIG
        return EXIT_IO if isinstance(exc.cause, (OSError, ValueError)) else 1
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
