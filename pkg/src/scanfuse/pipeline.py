"""End-to-end coarse-to-fine reconstruction: configuration, stages and the artifact manifest.

Every stage reads and writes files only, so running :func:`run_pipeline` is
byte-identical to chaining the ``scanfuse`` subcommands by hand with the same
configuration and seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .fields import Grid, GridField, NetworkField, evaluate_grid, intersect, load_grid
from .meshing import Mesh, load_obj, marching_cubes, sample_mesh_surface
from .metrics import compute_metrics
from .network import NetworkArch, Role, load_network
from .phantom import PHANTOMS, ScanSpec, make_phantom, simulate_scan
from .pointcloud import NormTransform, ViewTag, farthest_point_sampling, fit_transform, \
    read_xyz, sample_training_queries, write_xyz
from .refine import RefineConfig, refine_sdf, sample_refinement_set
from .selfsup import SelfSupConfig, train_view

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; artifacts written by earlier stages are kept."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration ------------------------------------------------------------------

@dataclass
class ScanConfig:
    thickness: float = 0.2
    slice_spacing: float = 0.01
    noise_sigma: float = 0.0
    n_points: int = 4000
    row_direction: tuple = (1.0, 0.0, 0.0)
    col_direction: tuple = (0.0, 1.0, 0.0)


@dataclass
class QueryConfig:
    fps_points: int = 2000
    per_point: int = 20
    nn_rank: int = 50
    n_uniform: int = 4000


@dataclass
class MetricConfig:
    n_samples: int = 30000
    gt_res: int = 256


@dataclass
class PipelineConfig:
    preset: str = "desk"
    phantom: str | None = "VertebraToy"
    row_cloud: str | None = None
    col_cloud: str | None = None
    gt_mesh: str | None = None
    out: str = "scanfuse_out"
    seed: int = 0
    normalize_margin: float = 0.9
    mesh_res: int = 64
    scan: ScanConfig = field(default_factory=ScanConfig)
    queries: QueryConfig = field(default_factory=QueryConfig)
    network: NetworkArch = field(default_factory=lambda: NetworkArch(4, 64, 2))
    selfsup: SelfSupConfig = field(default_factory=lambda: SelfSupConfig(iterations=2000))
    refine: RefineConfig = field(default_factory=lambda: RefineConfig(
        n_uniform=20000, n_surface=80000, iterations=2000))
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        has_files = self.row_cloud is not None or self.col_cloud is not None
        if has_files and (self.row_cloud is None or self.col_cloud is None):
            raise ConfigError("row_cloud and col_cloud must be given together")
        if not has_files:
            if self.phantom is None:
                raise ConfigError("give either a phantom or both row_cloud and col_cloud")
            if self.phantom not in PHANTOMS:
                raise ConfigError(f"unknown phantom {self.phantom!r}; choose from {sorted(PHANTOMS)}")
        if self.mesh_res < 2 or self.metrics.gt_res < 2:
            raise ConfigError("grid resolutions must be >= 2")
        if self.queries.fps_points < 1 or self.metrics.n_samples < 1:
            raise ConfigError("point counts must be positive")
        try:
            self.selfsup.validate()
            self.refine.validate()
            ScanSpec(self.scan.row_direction, self.scan.thickness, self.scan.slice_spacing,
                     self.scan.noise_sigma, self.scan.n_points)
        except (ValueError, NotImplementedError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def uses_phantom(self) -> bool:
        return self.row_cloud is None


def desk_config() -> PipelineConfig:
    return PipelineConfig()


def paper_config() -> PipelineConfig:
    return PipelineConfig(
        preset="paper",
        mesh_res=256,
        scan=ScanConfig(n_points=40000),
        queries=QueryConfig(fps_points=20000, n_uniform=40000),
        network=NetworkArch(8, 256, 4),
        selfsup=SelfSupConfig(iterations=10000),
        refine=RefineConfig(),
    )


PRESETS = {"desk": desk_config, "paper": paper_config}


def _apply(obj, overrides: dict, where: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(overrides).__name__}")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in overrides.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigError(f"unknown config key '{path}'")
        cur = getattr(obj, key)
        if val is None:
            if "None" not in str(names[key].type):
                raise ConfigError(f"{path}: may not be null")
        elif dataclasses.is_dataclass(cur):
            val = _apply(dataclasses.replace(cur), val, path)
        elif isinstance(cur, tuple):
            if not isinstance(val, (list, tuple)) or len(val) != len(cur):
                raise ConfigError(f"{path}: expected a list of {len(cur)} numbers")
            val = tuple(float(v) for v in val)
        elif isinstance(cur, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{path}: expected true or false, got {val!r}")
        elif isinstance(cur, (int, float)) or "int" in str(names[key].type):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path}: expected a number, got {val!r}")
            if isinstance(cur, float):
                val = float(val)
            elif val != int(val):
                raise ConfigError(f"{path}: expected an integer, got {val!r}")
            else:
                val = int(val)
        elif not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string, got {val!r}")
        try:
            object.__setattr__(obj, key, val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if isinstance(obj, NetworkArch):
        try:
            obj = NetworkArch(obj.n_layers, obj.hidden, obj.skip_at, obj.in_dim)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return obj


def resolve_config(overrides: dict | None = None, preset: str | None = None, seed: int | None = None,
                   out: str | None = None) -> PipelineConfig:
    """Preset defaults, then file overrides, then command-line overrides."""
    overrides = dict(overrides or {})
    name = preset or overrides.pop("preset", None) or "desk"
    overrides.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {name!r}")
    cfg = _apply(PRESETS[name](), overrides, "")
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    cfg.validate()
    return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror or exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = config_to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def config_to_yaml(cfg: PipelineConfig) -> str:
    # the output directory is where the file lives, not part of the experiment
    doc = {k: v for k, v in config_to_dict(cfg).items() if k != "out"}
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def stage_seed(seed: int, stage: str) -> int:
    """Stable per-stage seed from the global seed and the stage name."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# -- stages (files in, files out) -----------------------------------------------------

def stage_synth(cfg: PipelineConfig, view: str, cloud_path, gt_mesh_path=None) -> Path:
    """Simulate one scan of the configured phantom; optionally write the ground-truth mesh."""
    spec = PHANTOMS[cfg.phantom]
    direction = cfg.scan.row_direction if view == "row" else cfg.scan.col_direction
    scan = ScanSpec(direction, cfg.scan.thickness, cfg.scan.slice_spacing, cfg.scan.noise_sigma,
                    cfg.scan.n_points, stage_seed(cfg.seed, f"synth_{view}"))
    tag = ViewTag.ROW if view == "row" else ViewTag.COLUMN
    cloud = simulate_scan(spec, scan, tag)
    write_xyz(cloud_path, cloud.points,
              header=f"{cfg.phantom} {view} scan, thickness {cfg.scan.thickness:g}")
    if gt_mesh_path is not None:
        _, mesh = make_phantom(cfg.phantom, cfg.metrics.gt_res)
        mesh.save_obj(gt_mesh_path)
    return Path(cloud_path)


def stage_normalize(row_in, col_in, row_out, col_out, transform_out, margin: float = 0.9,
                    identity: bool = False) -> NormTransform:
    """One transform fitted to both clouds jointly, so the views stay registered."""
    row, col = read_xyz(row_in, ViewTag.ROW), read_xyz(col_in, ViewTag.COLUMN)
    tf = NormTransform.identity() if identity else fit_transform(np.vstack([row.points, col.points]), margin)
    write_xyz(row_out, tf.apply(row.points))
    write_xyz(col_out, tf.apply(col.points))
    Path(transform_out).write_text(tf.to_text())
    return tf


def stage_fit(cfg: PipelineConfig, view: str, cloud_path, net_path, log_path=None):
    cloud = read_xyz(cloud_path, ViewTag.ROW if view == "row" else ViewTag.COLUMN)
    seed = stage_seed(cfg.seed, f"fit_{view}")
    if len(cloud) > cfg.queries.fps_points:
        cloud = cloud.subset(farthest_point_sampling(cloud, cfg.queries.fps_points, seed=seed))
    queries = sample_training_queries(cloud, cfg.queries.per_point, cfg.queries.nn_rank,
                                      cfg.queries.n_uniform, seed=seed + 1)
    role = Role.ROW if view == "row" else Role.COL
    net, _ = train_view(queries, cfg.selfsup, cfg.network, role=role, seed=seed, log_path=log_path)
    net.save(net_path)


def _load_field(path):
    """A field from either a network snapshot or a grid file, told apart by magic bytes."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(4)
    if magic == b"RCSD":
        return GridField(load_grid(path))
    return NetworkField(load_network(path))


def fused_field(row_net_path, col_net_path):
    return intersect(NetworkField(load_network(row_net_path)), NetworkField(load_network(col_net_path)))


def stage_fuse(a_path, b_path, grid_path, res: int, op: str = "intersect") -> Grid:
    """Fuse two fields and snapshot the result on a grid.

    Two grids of equal resolution and box are combined node by node; anything
    else is fused as fields and evaluated on a fresh ``res``^3 lattice.
    """
    from . import fields as F

    combine = {"intersect": F.intersect, "union": F.union, "difference": F.difference}
    if op not in combine:
        raise ValueError(f"unknown fusion op {op!r}")
    fa, fb = _load_field(a_path), _load_field(b_path)
    if isinstance(fa, GridField) and isinstance(fb, GridField) and fa.grid.res == fb.grid.res \
            and np.array_equal(fa.grid.bbox_min, fb.grid.bbox_min) \
            and np.array_equal(fa.grid.bbox_max, fb.grid.bbox_max):
        va, vb = fa.grid.values, fb.grid.values
        vals = {"intersect": np.maximum(va, vb), "union": np.minimum(va, vb),
                "difference": np.maximum(va, -vb)}[op]
        grid = Grid(vals, fa.grid.bbox_min, fa.grid.bbox_max)
    else:
        grid = evaluate_grid(combine[op](fa, fb), res)
    grid.save(grid_path)
    return grid


def stage_refine(cfg: PipelineConfig, row_net_path, col_net_path, net_path, log_path=None):
    # refinement samples the exact composed field, not the grid snapshot
    field_ = fused_field(row_net_path, col_net_path)
    rc = dataclasses.replace(cfg.refine, seed=stage_seed(cfg.seed, "refine_samples"))
    samples = sample_refinement_set(field_, rc)
    net, _ = refine_sdf(samples, rc, cfg.network, seed=stage_seed(cfg.seed, "refine_train"),
                        log_path=log_path)
    net.save(net_path)


def stage_mesh(source_path, mesh_path, res: int) -> Mesh:
    f = _load_field(source_path)
    grid = f.grid if isinstance(f, GridField) else evaluate_grid(f, res)
    mesh = marching_cubes(grid)
    mesh.save_obj(mesh_path)
    return mesh


def _surface_points(path, n: int, seed: int) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".xyz":
        return read_xyz(path).points
    mesh = load_obj(path)
    if mesh.is_empty:
        raise ValueError(f"{path}: mesh has no triangles")
    return sample_mesh_surface(mesh, n, seed)


def stage_eval(recon_path, gt_path, out_prefix, n_samples: int = 30000, seed: int = 0,
               transform_path=None):
    """Metric report (CSV + text) of a reconstruction against ground truth.

    With a transform file, the reconstruction is mapped back to original units
    and the report is in original space.
    """
    recon = _surface_points(recon_path, n_samples, seed)
    # one seed for both sides: identical meshes then give identical samples
    gt = _surface_points(gt_path, n_samples, seed)
    space = "normalized"
    if transform_path is not None:
        tf = NormTransform.from_text(Path(transform_path).read_text())
        if tf != NormTransform.identity():
            recon = tf.invert(recon)
            space = "original"
    report = compute_metrics(recon, gt, seed=seed, space=space)
    out_prefix = Path(out_prefix)
    out_prefix.with_suffix(".csv").write_text(report.to_csv())
    out_prefix.with_suffix(".txt").write_text(report.to_text())
    return report


# -- orchestration ----------------------------------------------------------------------

MESH_NAMES = ("row", "col", "csg", "refined")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, files: list[Path], cfg: PipelineConfig) -> Path:
    entries = [{"path": p.relative_to(out).as_posix(), "bytes": p.stat().st_size, "sha256": _sha256(p)}
               for p in sorted(files)]
    stages = ["synth_row", "synth_col", "fit_row", "fit_col", "refine_samples", "refine_train", "eval"]
    doc = {
        "format": "scanfuse-manifest 1",
        "seed": cfg.seed,
        "preset": cfg.preset,
        "stage_seeds": {s: stage_seed(cfg.seed, s) for s in stages},
        "artifacts": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage into ``cfg.out`` and return the manifest as a dict."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config_to_yaml(cfg))
    p = {
        "row_raw": out / "row_raw.xyz", "col_raw": out / "col_raw.xyz",
        "row_cloud": out / "row.xyz", "col_cloud": out / "col.xyz", "transform": out / "transform.txt",
        "gt": out / "gt.obj",
        "row_net": out / "row.rcsn", "col_net": out / "col.rcsn",
        "row_log": out / "loss_row.csv", "col_log": out / "loss_col.csv",
        "fused": out / "fused.rcsd", "refined_net": out / "refined.rcsn", "refine_log": out / "loss_refine.csv",
    }
    has_gt = cfg.uses_phantom or cfg.gt_mesh is not None

    def stage(name, fn, *args, **kw):
        log.info("stage %s", name)
        try:
            return fn(*args, **kw)
        except (KeyboardInterrupt, StageError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    if cfg.uses_phantom:
        stage("synth", stage_synth, cfg, "row", p["row_raw"], p["gt"])
        stage("synth", stage_synth, cfg, "col", p["col_raw"])
        row_src, col_src = p["row_raw"], p["col_raw"]
    else:
        for key in ("row_cloud", "col_cloud", "gt_mesh"):
            src = getattr(cfg, key)
            if src is not None and not Path(src).is_file():
                raise FileNotFoundError(f"{key}: no such file: {src}")
        row_src, col_src = Path(cfg.row_cloud), Path(cfg.col_cloud)
    stage("normalize", stage_normalize, row_src, col_src, p["row_cloud"], p["col_cloud"], p["transform"],
          cfg.normalize_margin, identity=cfg.uses_phantom)
    stage("fit_row", stage_fit, cfg, "row", p["row_cloud"], p["row_net"], p["row_log"])
    stage("fit_col", stage_fit, cfg, "col", p["col_cloud"], p["col_net"], p["col_log"])
    stage("fuse", stage_fuse, p["row_net"], p["col_net"], p["fused"], cfg.mesh_res)
    stage("refine", stage_refine, cfg, p["row_net"], p["col_net"], p["refined_net"], p["refine_log"])

    sources = {"row": p["row_net"], "col": p["col_net"], "csg": p["fused"], "refined": p["refined_net"]}
    meshes = {}
    for name in MESH_NAMES:
        meshes[name] = out / f"mesh_{name}.obj"
        stage(f"mesh_{name}", stage_mesh, sources[name], meshes[name], cfg.mesh_res)

    reports = {}
    if has_gt:
        gt = p["gt"] if cfg.uses_phantom else Path(cfg.gt_mesh)
        seed = stage_seed(cfg.seed, "eval")
        for name in MESH_NAMES:
            if load_obj(meshes[name]).is_empty:
                log.warning("mesh %s is empty; skipping its metrics", name)
                continue
            reports[name] = stage("eval", stage_eval, meshes[name], gt, out / f"metrics_{name}",
                                  cfg.metrics.n_samples, seed, p["transform"])
        rows = ["mesh," + reports[next(iter(reports))].to_csv().splitlines()[0]] if reports else []
        rows += [f"{n}," + r.to_csv().splitlines()[1] for n, r in reports.items()]
        (out / "metrics.csv").write_text("\n".join(rows) + "\n")

    files = [f for f in out.iterdir() if f.is_file() and f.name != "manifest.json"]
    write_manifest(out, files, cfg)
    return json.loads((out / "manifest.json").read_text())
