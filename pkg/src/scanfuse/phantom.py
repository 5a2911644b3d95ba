"""Analytic ground-truth shapes and a row/column scan simulator.

Shapes are small expression trees with a text form, e.g.::

    union(
      ellipsoid(center=[0, 0.3, 0], radii=[0.32, 0.24, 0.22]),
      capsule(a=[0, 0.05, 0], b=[0, -0.65, -0.1], r=0.08),
    )

Distances are exact for sphere, box and capsule. The ellipsoid uses
``(|p/r| - 1) * min(r)``, a lower bound on the true distance with the exact
zero set. CSG nodes are the usual min/max pseudo-SDFs.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np

from .fields import AnalyticField, SdfField, evaluate_grid
from .meshing import Mesh, marching_cubes
from .pointcloud import PointCloud, ViewTag


def _vec(v) -> tuple[float, float, float]:
    v = tuple(float(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected a 3-vector, got {v}")
    return v


def _fmt(v) -> str:
    return "[" + ", ".join(f"{x:g}" for x in v) + "]"


class Shape:
    def sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_text(self, indent: int = 0) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Sphere(Shape):
    center: tuple
    r: float

    def sdf(self, pts):
        return np.linalg.norm(pts - np.asarray(self.center), axis=1) - self.r

    def to_text(self, indent=0):
        return " " * indent + f"sphere(center={_fmt(self.center)}, r={self.r:g})"


@dataclass(frozen=True)
class Ellipsoid(Shape):
    center: tuple
    radii: tuple

    def sdf(self, pts):
        r = np.asarray(self.radii)
        k = np.linalg.norm((pts - np.asarray(self.center)) / r, axis=1)
        return (k - 1.0) * r.min()

    def to_text(self, indent=0):
        return " " * indent + f"ellipsoid(center={_fmt(self.center)}, radii={_fmt(self.radii)})"


@dataclass(frozen=True)
class Box(Shape):
    center: tuple
    half: tuple

    def sdf(self, pts):
        q = np.abs(pts - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def to_text(self, indent=0):
        return " " * indent + f"box(center={_fmt(self.center)}, half={_fmt(self.half)})"


@dataclass(frozen=True)
class Capsule(Shape):
    a: tuple
    b: tuple
    r: float

    def sdf(self, pts):
        a, b = np.asarray(self.a), np.asarray(self.b)
        pa, ba = pts - a, b - a
        h = np.clip(pa @ ba / (ba @ ba), 0.0, 1.0)
        return np.linalg.norm(pa - h[:, None] * ba, axis=1) - self.r

    def to_text(self, indent=0):
        return " " * indent + f"capsule(a={_fmt(self.a)}, b={_fmt(self.b)}, r={self.r:g})"


@dataclass(frozen=True)
class Csg(Shape):
    op: str
    children: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.op not in ("union", "intersect", "difference"):
            raise ValueError(f"unknown CSG op {self.op!r}")
        if len(self.children) < 2 or (self.op == "difference" and len(self.children) != 2):
            raise ValueError(f"{self.op} needs two operands" + ("" if self.op == "difference" else " or more"))

    def sdf(self, pts):
        vals = [c.sdf(pts) for c in self.children]
        if self.op == "union":
            return np.minimum.reduce(vals)
        if self.op == "intersect":
            return np.maximum.reduce(vals)
        return np.maximum(vals[0], -vals[1])

    def to_text(self, indent=0):
        pad = " " * indent
        inner = ",\n".join(c.to_text(indent + 2) for c in self.children)
        return f"{pad}{self.op}(\n{inner},\n{pad})"


_PRIMITIVES = {
    "sphere": (Sphere, {"center": _vec, "r": float}),
    "ellipsoid": (Ellipsoid, {"center": _vec, "radii": _vec}),
    "box": (Box, {"center": _vec, "half": _vec}),
    "capsule": (Capsule, {"a": _vec, "b": _vec, "r": float}),
}


def parse_shape(text: str) -> Shape:
    """Parse the expression-tree text form. Raises ``ValueError`` on malformed input."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"shape spec: {exc.msg} at line {exc.lineno}, column {exc.offset}") from None
    return _build(tree.body)


def _build(node) -> Shape:
    if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name):
        raise ValueError(f"shape spec: expected a call at line {getattr(node, 'lineno', '?')}")
    name = node.func.id
    if name in ("union", "intersect", "difference"):
        if node.keywords:
            raise ValueError(f"shape spec: {name} takes positional operands only")
        return Csg(name, tuple(_build(a) for a in node.args))
    if name not in _PRIMITIVES:
        raise ValueError(f"shape spec: unknown primitive {name!r} at line {node.lineno}")
    cls, params = _PRIMITIVES[name]
    if node.args:
        raise ValueError(f"shape spec: {name} takes keyword arguments only")
    kw = {}
    for k in node.keywords:
        if k.arg not in params:
            raise ValueError(f"shape spec: {name} has no parameter {k.arg!r}")
        try:
            kw[k.arg] = params[k.arg](ast.literal_eval(k.value))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"shape spec: bad value for {name}.{k.arg}: {exc}") from None
    missing = set(params) - set(kw)
    if missing:
        raise ValueError(f"shape spec: {name} missing {sorted(missing)}")
    return cls(**kw)


def analytic_field(spec: Shape | str) -> AnalyticField:
    if isinstance(spec, str):
        spec = parse_shape(spec)
    return AnalyticField(spec)


class DilatedField(SdfField):
    """Min over copies of ``field`` shifted along ``direction`` within ±thickness/2."""

    def __init__(self, field: SdfField, direction, thickness: float, taps: int = 9):
        if thickness < 0:
            raise ValueError("thickness must be >= 0")
        u = np.asarray(direction, dtype=np.float64)
        self.field = field
        self.direction = u / np.linalg.norm(u)
        self.thickness = float(thickness)
        self.offsets = np.linspace(-thickness / 2, thickness / 2, taps) if thickness > 0 else np.zeros(1)

    def _eval(self, pts):
        out = None
        for d in self.offsets:
            v = self.field(pts - d * self.direction)
            out = v if out is None else np.minimum(out, v)
        return out


def dilate_along(field: SdfField, direction, thickness: float, taps: int = 9) -> SdfField:
    if thickness == 0:
        return field
    return DilatedField(field, direction, thickness, taps)


@dataclass
class ScanSpec:
    direction: tuple = (1.0, 0.0, 0.0)
    thickness: float = 0.2
    slice_spacing: float = 0.01
    noise_sigma: float = 0.0
    n_points: int = 2000
    seed: int = 0
    taps: int = 9

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if np.linalg.norm(d) == 0:
            raise ValueError("scan direction must be non-zero")
        self.direction = tuple(float(x) for x in d / np.linalg.norm(d))
        if not 0 <= self.thickness < 1:
            raise ValueError("thickness must lie in [0, 1)")
        if self.slice_spacing <= 0 or self.noise_sigma < 0:
            raise ValueError("slice_spacing must be > 0 and noise_sigma >= 0")


def _plane_basis(u):
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def simulate_scan(gt: Shape | SdfField, scan: ScanSpec, view_tag: ViewTag = ViewTag.OTHER,
                  tol: float = 1e-6, max_iter: int = 60) -> PointCloud:
    """Surface points of the scan-distorted solid on slice planes across ``scan.direction``."""
    base = gt if isinstance(gt, SdfField) else AnalyticField(gt)
    field = dilate_along(base, scan.direction, scan.thickness, scan.taps)
    u = np.asarray(scan.direction)
    e1, e2 = _plane_basis(u)
    rng = np.random.default_rng(scan.seed)
    k_max = int(np.floor(np.sqrt(3.0) / scan.slice_spacing))
    ks = np.arange(-k_max, k_max + 1)

    # keep only slices whose plane meets the solid, judged on a coarse in-plane lattice
    lattice = np.linspace(-1.0, 1.0, 41)
    a_, b_ = np.meshgrid(lattice, lattice, indexing="ij")
    inplane = a_.ravel()[:, None] * e1 + b_.ravel()[:, None] * e2
    cell = lattice[1] - lattice[0]
    live = [k for k in ks if field(k * scan.slice_spacing * u + inplane).min() < cell]
    if not live:
        raise ValueError("degenerate scan: no slice plane meets the surface")
    live = np.array(live)

    found = []
    n_found = 0
    for _ in range(200):
        if n_found >= scan.n_points:
            break
        m = max(2 * (scan.n_points - n_found), 256)
        k = rng.choice(live, size=m)
        ab = rng.uniform(-1.0, 1.0, size=(m, 2))
        s = k * scan.slice_spacing
        x = s[:, None] * u + ab[:, :1] * e1 + ab[:, 1:] * e2
        ok = np.zeros(m, dtype=bool)
        for _ in range(max_iter):
            f = field(x)
            ok = np.abs(f) < tol
            if ok.all():
                break
            g = field.gradient(x)
            g_in = g - (g @ u)[:, None] * u
            g2 = np.maximum((g_in * g_in).sum(axis=1), 1e-12)
            step = (f / g2)[:, None] * g_in
            step_len = np.linalg.norm(step, axis=1, keepdims=True)
            step *= np.minimum(1.0, 0.25 / np.maximum(step_len, 1e-300))
            step[ok] = 0.0
            x = x - step
            # re-pin to the slice plane so the along-scan coordinate stays exact
            x = s[:, None] * u + (x @ e1)[:, None] * e1 + (x @ e2)[:, None] * e2
        ok = np.abs(field(x)) < tol
        ok &= np.all(np.abs(x) <= 1.0, axis=1)
        found.append(x[ok])
        n_found += int(ok.sum())
    pts = np.concatenate(found)[: scan.n_points] if found else np.zeros((0, 3))
    if len(pts) < scan.n_points:
        raise ValueError(f"degenerate scan: only {len(pts)} of {scan.n_points} surface points found")
    if scan.noise_sigma > 0:
        pts = pts + rng.normal(scale=scan.noise_sigma, size=pts.shape)
    return PointCloud(pts, view_tag)


# -- named phantoms -------------------------------------------------------------------

PHANTOMS = {
    "SphereCap": Csg("intersect", (
        Sphere((0.0, 0.0, 0.0), 0.5),
        Box((0.0, 0.0, -0.35), (0.7, 0.7, 0.65)),
    )),
    "EllipsoidPair": Csg("union", (
        Ellipsoid((-0.2, 0.0, 0.0), (0.42, 0.3, 0.26)),
        Ellipsoid((0.22, 0.06, 0.02), (0.32, 0.36, 0.22)),
    )),
    # body, spinous process and two transverse processes
    "VertebraToy": Csg("union", (
        Ellipsoid((0.0, 0.3, 0.0), (0.32, 0.24, 0.22)),
        Capsule((0.0, 0.05, 0.0), (0.0, -0.62, -0.1), 0.08),
        Capsule((0.0, 0.0, 0.0), (0.58, -0.15, 0.05), 0.07),
        Capsule((0.0, 0.0, 0.0), (-0.58, -0.15, 0.05), 0.07),
    )),
}


def make_phantom(name: str, res: int = 256) -> tuple[Shape, Mesh]:
    """Shape spec and its marching-cubes ground-truth mesh at ``res``^3 over [-1, 1]^3."""
    if name not in PHANTOMS:
        raise ValueError(f"unknown phantom {name!r}; choose from {sorted(PHANTOMS)}")
    spec = PHANTOMS[name]
    mesh = marching_cubes(evaluate_grid(AnalyticField(spec), res))
    return spec, mesh
