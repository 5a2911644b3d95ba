"""Signed distance fields behind one interface, and their boolean composition.

A field is anything with ``field(points) -> values`` on an (N, 3) array.
Composite fields evaluate their children and combine the results exactly
(pointwise max / min / negation), so no approximation is introduced by the
composition itself. The results are pseudo-SDFs away from the surface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRID_MAGIC = b"RCSD"
GRID_VERSION = 1
_CHUNK = 65536


class SdfField:
    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(pts) <= _CHUNK:
            return self._eval(pts)
        return np.concatenate([self._eval(pts[i:i + _CHUNK]) for i in range(0, len(pts), _CHUNK)])

    def _eval(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value(self, x) -> float:
        return float(self(np.asarray(x, dtype=np.float64).reshape(1, 3))[0])

    def gradient(self, points, h: float = 1e-6) -> np.ndarray:
        """Central-difference gradient; subclasses may override with exact ones."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty_like(pts)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            out[:, k] = (self(pts + e) - self(pts - e)) / (2 * h)
        return out


class NetworkField(SdfField):
    def __init__(self, net):
        self.net = net

    def _eval(self, pts):
        return self.net(pts)

    def gradient(self, points, h: float = 1e-6):
        from .network import spatial_gradient

        return spatial_gradient(self.net, points)


class AnalyticField(SdfField):
    """Wraps a shape expression (anything with ``sdf(points)``)."""

    def __init__(self, shape):
        self.shape = shape

    def _eval(self, pts):
        return self.shape.sdf(pts)


class FunctionField(SdfField):
    def __init__(self, fn):
        self.fn = fn

    def _eval(self, pts):
        return np.asarray(self.fn(pts), dtype=np.float64).reshape(len(pts))


class CsgField(SdfField):
    OPS = ("intersect", "union", "difference", "negate")

    def __init__(self, op: str, left: SdfField, right: SdfField | None = None):
        if op not in self.OPS:
            raise ValueError(f"unknown CSG op {op!r}")
        if (right is None) != (op == "negate"):
            raise ValueError(f"{op} takes {'one' if op == 'negate' else 'two'} operand(s)")
        self.op, self.left, self.right = op, left, right

    def _eval(self, pts):
        a = self.left(pts)
        if self.op == "negate":
            return -a
        b = self.right(pts)
        if self.op == "intersect":
            return np.maximum(a, b)
        if self.op == "union":
            return np.minimum(a, b)
        return np.maximum(a, -b)


def intersect(a: SdfField, b: SdfField) -> CsgField:
    return CsgField("intersect", a, b)


def union(a: SdfField, b: SdfField) -> CsgField:
    return CsgField("union", a, b)


def difference(a: SdfField, b: SdfField) -> CsgField:
    """``a`` minus ``b``: max(a, -b)."""
    return CsgField("difference", a, b)


def negate(a: SdfField) -> CsgField:
    return CsgField("negate", a)


def eval_field(field: SdfField, x) -> float:
    return field.value(x)


# -- sampled grids -------------------------------------------------------------------

@dataclass
class Grid:
    """Field samples on a lattice spanning ``bbox_min..bbox_max`` inclusively.

    ``values[i, j, k]`` is the sample at x-index i, y-index j, z-index k.
    """

    values: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float32).astype(np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float32).astype(np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")

    @property
    def res(self) -> tuple[int, int, int]:
        return tuple(int(r) for r in self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.res) - 1)

    def axes(self):
        return [np.linspace(self.bbox_min[d], self.bbox_max[d], self.res[d]) for d in range(3)]

    def to_bytes(self) -> bytes:
        head = GRID_MAGIC + struct.pack("<I3I", GRID_VERSION, *self.res)
        head += np.concatenate([self.bbox_min, self.bbox_max]).astype("<f4").tobytes()
        return head + np.asarray(self.values, dtype="<f4").ravel(order="F").tobytes()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())


def grid_from_bytes(raw: bytes, name: str = "<bytes>") -> Grid:
    if raw[:4] != GRID_MAGIC:
        raise ValueError(f"{name}: bad magic at byte offset 0 (expected 'RCSD')")
    if len(raw) < 44:
        raise ValueError(f"{name}: truncated header at byte offset {len(raw)} (need 44 bytes)")
    version, nx, ny, nz = struct.unpack_from("<I3I", raw, 4)
    if version != GRID_VERSION:
        raise ValueError(f"{name}: unsupported grid version {version} at byte offset 4")
    bbox = np.frombuffer(raw, dtype="<f4", count=6, offset=20)
    n = nx * ny * nz
    if len(raw) != 44 + 4 * n:
        raise ValueError(f"{name}: expected {44 + 4 * n} bytes for a {nx}x{ny}x{nz} grid, "
                         f"found {len(raw)} (payload starts at byte offset 44)")
    vals = np.frombuffer(raw, dtype="<f4", count=n, offset=44).reshape((nx, ny, nz), order="F")
    return Grid(vals.astype(np.float32), bbox[:3], bbox[3:])


def load_grid(path) -> Grid:
    return grid_from_bytes(Path(path).read_bytes(), str(path))


class GridField(SdfField):
    """Trilinear interpolation inside the box; outside, the value at the clamped
    point plus the distance to the box."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self._vals = grid.values.astype(np.float64)

    def _eval(self, pts):
        g = self.grid
        lo, hi = g.bbox_min, g.bbox_max
        clamped = np.clip(pts, lo, hi)
        outside = np.linalg.norm(pts - clamped, axis=1)
        res = np.array(g.res)
        u = (clamped - lo) / (hi - lo) * (res - 1)
        i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
        t = u - i0
        v = self._vals
        out = np.zeros(len(pts))
        for dx in (0, 1):
            wx = t[:, 0] if dx else 1.0 - t[:, 0]
            for dy in (0, 1):
                wy = t[:, 1] if dy else 1.0 - t[:, 1]
                for dz in (0, 1):
                    wz = t[:, 2] if dz else 1.0 - t[:, 2]
                    out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out + outside


def evaluate_grid(field: SdfField, res, bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> Grid:
    """Sample ``field`` on a res^3 lattice (or res=(nx, ny, nz)) spanning ``bbox``."""
    res = (res, res, res) if np.isscalar(res) else tuple(res)
    if min(res) < 2:
        raise ValueError("res must be >= 2")
    lo = np.asarray(bbox[0], dtype=np.float32).astype(np.float64)
    hi = np.asarray(bbox[1], dtype=np.float32).astype(np.float64)
    axes = [np.linspace(lo[d], hi[d], res[d]) for d in range(3)]
    out = np.empty(res, dtype=np.float32)
    xs, ys = np.meshgrid(axes[0], axes[1], indexing="ij")
    plane = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
    # one z-slab at a time bounds memory at 256^3
    for k, z in enumerate(axes[2]):
        plane[:, 2] = z
        out[:, :, k] = field(plane).reshape(res[0], res[1])
    return Grid(out, lo, hi)
