"""Marching cubes on a sampled grid, the Mesh type, OBJ I/O and surface sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import EDGE_CORNERS, TRI_TABLE
from .fields import Grid

_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)

_TRI = np.full((256, 16), -1, dtype=np.int64)
for _case, _tris in enumerate(TRI_TABLE):
    _TRI[_case, :len(_tris)] = _tris


def _edge_geometry():
    """Per cube edge: the grid axis it runs along and its lower corner offset."""
    axis, start = [], []
    for a, b in EDGE_CORNERS:
        ca, cb = _CORNERS[a], _CORNERS[b]
        axis.append(int(np.argmax(ca != cb)))
        start.append(np.minimum(ca, cb))
    return np.array(axis), np.array(start)


_EDGE_AXIS, _EDGE_START = _edge_geometry()


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def edge_use_counts(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_use_counts() == 2))

    def save_obj(self, path):
        with Path(path).open("w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in self.triangles + 1:
                fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def load_obj(path) -> Mesh:
    verts, tris = [], []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
            else:
                raise ValueError(f"{path}:{lineno}: unsupported OBJ record {parts[0]!r}")
    mesh = Mesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
    if len(mesh.triangles) and (mesh.triangles.min() < 0 or mesh.triangles.max() >= len(mesh.vertices)):
        raise ValueError(f"{path}: face index out of range")
    return mesh


def marching_cubes(grid: Grid, iso: float = 0.0) -> Mesh:
    """Classic table-driven marching cubes with linear edge interpolation.

    Vertices are shared between neighbouring cells (one per crossed grid edge),
    and triangles are wound so their normals point toward increasing values.
    """
    vals = grid.values.astype(np.float64)
    nx, ny, nz = vals.shape
    below = vals < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.uint8) << np.uint8(bit)
    cells = np.nonzero((case != 0) & (case != 255))
    if len(cells[0]) == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cell_idx = np.stack(cells, axis=1)
    tri_edges = _TRI[case[cells]]  # (C, 16)

    tri_cells, tri_slots = [], []
    for slot in range(0, 15, 3):
        ok = tri_edges[:, slot] >= 0
        tri_cells.append(np.nonzero(ok)[0])
        tri_slots.append(tri_edges[ok, slot:slot + 3])
    tri_cell = np.concatenate(tri_cells)
    tri_local = np.concatenate(tri_slots)  # (T, 3) cube-edge ids

    # global id of each referenced grid edge: axis * n_nodes + lower node index
    start = cell_idx[tri_cell][:, None, :] + _EDGE_START[tri_local]  # (T, 3, 3)
    axis = _EDGE_AXIS[tri_local]
    node = (start[..., 0] * ny + start[..., 1]) * nz + start[..., 2]
    gid = axis * (nx * ny * nz) + node
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    tris = inverse.reshape(-1, 3)

    u_axis = uniq // (nx * ny * nz)
    u_node = uniq % (nx * ny * nz)
    a_idx = np.stack(np.unravel_index(u_node, (nx, ny, nz)), axis=1)
    b_idx = a_idx.copy()
    b_idx[np.arange(len(uniq)), u_axis] += 1
    va = vals[a_idx[:, 0], a_idx[:, 1], a_idx[:, 2]]
    vb = vals[b_idx[:, 0], b_idx[:, 1], b_idx[:, 2]]
    t = (iso - va) / (vb - va)
    axes = grid.axes()
    pa = np.stack([axes[d][a_idx[:, d]] for d in range(3)], axis=1)
    pb = np.stack([axes[d][b_idx[:, d]] for d in range(3)], axis=1)
    verts = pa + t[:, None] * (pb - pa)

    mesh = _clean(verts, tris)
    return _orient(mesh, grid, iso)


def _clean(verts, tris) -> Mesh:
    # vertices that landed on the same grid node collapse to one
    uverts, remap = np.unique(verts, axis=0, return_inverse=True)
    tris = remap.reshape(-1)[tris]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[keep]
    mesh = Mesh(uverts, tris)
    if len(tris):
        mesh.triangles = tris[mesh.triangle_areas() > 0]
    used = np.unique(mesh.triangles)
    lookup = np.full(len(uverts), -1, dtype=np.int64)
    lookup[used] = np.arange(len(used))
    return Mesh(uverts[used], lookup[mesh.triangles])


def _orient(mesh: Mesh, grid: Grid, iso: float) -> Mesh:
    """Flip the table's winding if its normals point toward decreasing values."""
    if mesh.is_empty:
        return mesh
    from .fields import GridField

    v = mesh.vertices[mesh.triangles]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    centers = v.mean(axis=1)
    h = 0.25 * float(grid.spacing.min())
    unit = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    field = GridField(grid)
    step = field(centers + h * unit) - field(centers - h * unit)
    if np.sum(np.sign(step)) < 0:
        mesh = Mesh(mesh.vertices, mesh.triangles[:, ::-1].copy())
    return mesh


def sample_mesh_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.triangles[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2])
