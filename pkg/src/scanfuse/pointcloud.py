"""Point clouds: I/O, normalization, FPS, exact k-NN and training query sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class ViewTag(str, enum.Enum):
    ROW = "Row"
    COLUMN = "Column"
    OTHER = "Other"


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    view_tag: ViewTag = ViewTag.OTHER

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("point cloud is empty")
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains NaN or Inf coordinates")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[np.asarray(idx)], self.view_tag)


@dataclass(frozen=True)
class NormTransform:
    center: tuple[float, float, float]
    scale: float  # original units per normalized unit

    def apply(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.center)) / self.scale

    def invert(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.scale + np.asarray(self.center)

    def to_text(self) -> str:
        c = self.center
        return f"center {c[0]!r} {c[1]!r} {c[2]!r}\nscale {self.scale!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "NormTransform":
        vals = {}
        for line in text.splitlines():
            if line.strip() and not line.startswith("#"):
                key, *rest = line.split()
                vals[key] = [float(v) for v in rest]
        return cls(tuple(vals["center"]), vals["scale"][0])

    @classmethod
    def identity(cls) -> "NormTransform":
        return cls((0.0, 0.0, 0.0), 1.0)


def normalize_to_cube(raw, margin: float = 0.9, view_tag: ViewTag = ViewTag.OTHER):
    """Center on the bounding box and scale the longest half-extent to ``margin``."""
    pts = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
    if not 0 < margin <= 1:
        raise ValueError("margin must lie in (0, 1]")
    tf = fit_transform(pts, margin)
    return PointCloud(tf.apply(pts), view_tag), tf


def fit_transform(pts, margin: float = 0.9) -> NormTransform:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo) / 2.0)
    if half == 0.0:
        raise ValueError("degenerate input: all points are identical")
    return NormTransform(tuple(float(c) for c in center), half / margin)


def farthest_point_sampling(cloud: PointCloud, k: int, seed: int | None = None,
                            start: int | None = None) -> np.ndarray:
    """Greedy FPS; the first index is ``start`` or drawn from ``seed``."""
    pts = cloud.points
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


class NeighborIndex:
    """Exact k-NN over a fixed cloud (kd-tree), ties broken by lower index."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty cloud")
        self.tree = cKDTree(self.points)

    def query(self, q, k: int = 1):
        q = np.asarray(q, dtype=np.float64).reshape(3)
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        d, _ = self.tree.query(q, k=k)
        radius = float(np.atleast_1d(d)[-1])
        # everything up to the k-th distance, so ties can be ordered by index
        cand = np.asarray(self.tree.query_ball_point(q, radius * (1 + 1e-12) + 1e-300), dtype=np.int64)
        dist = np.sqrt(np.sum((self.points[cand] - q) ** 2, axis=1))
        order = np.lexsort((cand, dist))[:k]
        return cand[order], dist[order]

    def nearest(self, queries):
        """Index and distance of the nearest point for each row of ``queries``."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _, idx = self.tree.query(q, k=1)
        dist = np.sqrt(np.sum((self.points[idx] - q) ** 2, axis=1))
        return idx, dist

    def kth_distance(self, k: int) -> np.ndarray:
        """Distance from every cloud point to its k-th nearest other point."""
        d, _ = self.tree.query(self.points, k=k + 1)
        return d[:, k]


def nearest_neighbor(cloud: PointCloud, query, k: int = 1):
    idx, dist = NeighborIndex(cloud.points).query(query, k)
    return list(zip(idx.tolist(), dist.tolist()))


@dataclass
class QuerySet:
    queries: np.ndarray  # (M, 3)
    nearest: np.ndarray  # (M, 3), exact members of the cloud
    nearest_index: np.ndarray
    n_gaussian: int
    n_uniform: int

    def __len__(self):
        return len(self.queries)


def sample_training_queries(cloud: PointCloud, per_point: int = 20, nn_rank: int = 50,
                            n_uniform: int = 0, seed: int = 0) -> QuerySet:
    """Gaussian queries around each point (std = distance to its nn_rank-th neighbour)
    plus uniform queries in the cube, each paired with its nearest cloud point."""
    pts = cloud.points
    if len(pts) < 2:
        raise ValueError("need at least two points")
    rng = np.random.default_rng(seed)
    index = NeighborIndex(pts)
    rank = min(nn_rank, len(pts) - 1)
    sigma = index.kth_distance(rank)
    centers = np.repeat(pts, per_point, axis=0)
    gauss = centers + rng.normal(size=centers.shape) * np.repeat(sigma, per_point)[:, None]
    unif = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    q = np.concatenate([gauss, unif], axis=0)
    idx, _ = index.nearest(q)
    return QuerySet(q, pts[idx], idx, len(gauss), n_uniform)


# -- file format: "x y z" per line, '#' comments -------------------------------

def read_xyz(path, view_tag: ViewTag = ViewTag.OTHER) -> PointCloud:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                xyz = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(xyz)):
                raise ValueError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(xyz)
    if not rows:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(rows), view_tag)


def write_xyz(path, points, header: str | None = None):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with Path(path).open("w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
