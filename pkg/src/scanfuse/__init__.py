"""Coarse-to-fine neural SDF reconstruction from row and column scans."""

from .autodiff import AdamState, Value, adam_update, cosine_lr, grad, input_gradient
from .fields import (
    AnalyticField,
    CsgField,
    Grid,
    GridField,
    NetworkField,
    SdfField,
    difference,
    eval_field,
    evaluate_grid,
    intersect,
    negate,
    union,
)
from .meshing import Mesh, marching_cubes, sample_mesh_surface
from .metrics import MetricReport, compute_metrics
from .network import Network, NetworkArch, Role, init_network, project_to_surface
from .phantom import ScanSpec, analytic_field, dilate_along, make_phantom, simulate_scan
from .pipeline import PipelineConfig, resolve_config, run_pipeline
from .pointcloud import PointCloud, ViewTag, farthest_point_sampling, normalize_to_cube, sample_training_queries
from .refine import RefineConfig, refine_sdf, sample_refinement_set
from .selfsup import SelfSupConfig, train_view

__version__ = "0.1.0"
