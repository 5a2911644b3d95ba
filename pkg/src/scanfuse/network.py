"""Coordinate MLP decoder f(x) -> signed distance, with a skip connection."""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Value, concat, input_gradient, no_grad

SNAPSHOT_MAGIC = "RCSN"
SNAPSHOT_VERSION = 1
EPS_GRAD = 1e-8


class Role(str, enum.Enum):
    ROW = "RowView"
    COL = "ColView"
    REFINED = "Refined"
    OTHER = "Other"


@dataclass(frozen=True)
class NetworkArch:
    n_layers: int = 8
    hidden: int = 256
    skip_at: int | None = 4
    in_dim: int = 3

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1:
            raise ValueError("n_layers and hidden must be positive")
        if self.skip_at is not None:
            if not 1 <= self.skip_at < self.n_layers:
                raise ValueError(f"skip_at must satisfy 1 <= skip_at < n_layers, got {self.skip_at}")
            if self.hidden <= self.in_dim:
                raise ValueError("hidden must exceed the input width when a skip is used")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) for every linear layer, hidden layers first, then the scalar head.

        Hidden layer ``skip_at - 1`` emits ``hidden - in_dim`` channels so that
        concatenating the raw input before layer ``skip_at`` restores the width.
        """
        dims = []
        for i in range(self.n_layers):
            d_in = self.in_dim if i == 0 else self.hidden
            d_out = self.hidden
            if self.skip_at is not None and i + 1 == self.skip_at:
                d_out = self.hidden - self.in_dim
            dims.append((d_in, d_out))
        dims.append((self.hidden, 1))
        return dims


@dataclass
class Network:
    arch: NetworkArch
    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]
    role: Role = Role.OTHER
    seed: int = 0
    _params: list[Value] | None = field(default=None, repr=False, compare=False)

    # -- parameter views used by the training loops ---------------------
    def parameters(self) -> list[Value]:
        """Leaf Values wrapping the weights, created once and reused."""
        if self._params is None:
            self._params = []
            for w, b in zip(self.weights, self.biases):
                self._params += [Value(w, requires_grad=True), Value(b, requires_grad=True)]
        return self._params

    def set_parameter_arrays(self, arrays: list[np.ndarray]):
        self.weights = [np.asarray(a, dtype=np.float64) for a in arrays[0::2]]
        self.biases = [np.asarray(a, dtype=np.float64) for a in arrays[1::2]]
        if self._params is not None:
            for p, a in zip(self._params, arrays):
                p.data = np.asarray(a, dtype=np.float64)
                p.grad = None

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Network":
        return Network(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                       self.role, self.seed)

    # -- evaluation --------------------------------------------------------
    def forward(self, x: Value) -> Value:
        """Graph-building forward pass; ``x`` has shape (N, 3), result (N, 1)."""
        params = self.parameters()
        n_lin = len(self.weights)
        h = x
        for i in range(n_lin):
            w, b = params[2 * i], params[2 * i + 1]
            if self.arch.skip_at is not None and i == self.arch.skip_at:
                h = concat([h, x], axis=1) * (1.0 / np.sqrt(2.0))
            h = h @ w.T + b
            if i < n_lin - 1:
                h = h.relu()
        return h

    def __call__(self, points) -> np.ndarray:
        """Batched signed distance of an (N, 3) array, returned as shape (N,)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n_lin = len(self.weights)
        h = pts
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if self.arch.skip_at is not None and i == self.arch.skip_at:
                h = np.concatenate([h, pts], axis=1) * (1.0 / np.sqrt(2.0))
            h = h @ w.T + b
            if i < n_lin - 1:
                h = np.maximum(h, 0.0)
        return h[:, 0]

    def save(self, path):
        Path(path).write_bytes(snapshot_bytes(self))


def init_network(arch: NetworkArch, seed: int, role: Role = Role.OTHER, radius: float = 0.5) -> Network:
    """Geometric initialization: the fresh network approximates ``|x| - radius``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    dims = arch.layer_dims()
    for i, (d_in, d_out) in enumerate(dims):
        if i == len(dims) - 1:
            w = rng.normal(np.sqrt(np.pi) / np.sqrt(d_in), 1e-4, size=(d_out, d_in))
            b = np.full(d_out, -radius)
        else:
            w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(d_out), size=(d_out, d_in))
            b = np.zeros(d_out)
        weights.append(w)
        biases.append(b)
    return Network(arch, weights, biases, role, seed)


def eval_sdf(net: Network, x) -> float:
    return float(net(np.asarray(x, dtype=np.float64).reshape(1, 3))[0])


def spatial_gradient(net: Network, points) -> np.ndarray:
    """Exact input gradient at each of the (N, 3) points (no graph kept)."""
    x = Value(np.atleast_2d(np.asarray(points, dtype=np.float64)), requires_grad=True)
    f = net.forward(x)
    g = input_gradient(f, x)
    return g.data


def projection_graph(f: Value, g: Value, x: Value, normalize_direction: bool = True,
                     eps_grad: float = EPS_GRAD):
    """Pull ``x`` onto the zero level along the field gradient.

    Returns ``(x_proj, valid)``; ``valid`` marks rows whose gradient norm is
    above ``eps_grad`` (rows below it must be left out of any loss).
    """
    if not normalize_direction:
        return x - f * g, np.ones(len(x.data), dtype=bool)
    sq = (g * g).sum(axis=1, keepdims=True)
    norm_data = np.sqrt(sq.data[:, 0])
    valid = norm_data > eps_grad
    # degenerate rows get a harmless denominator; callers mask them out
    safe = sq + Value((~valid).astype(np.float64)[:, None])
    direction = g / safe.sqrt()
    return x - f * direction, valid


def project_to_surface(field, x, normalize_direction: bool = True, eps_grad: float = EPS_GRAD):
    """Project points with any differentiable field (a Network or a callable on Values).

    Raises ``ValueError`` for points whose gradient is degenerate.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xv = Value(pts, requires_grad=True)
    f = field.forward(xv) if isinstance(field, Network) else field(xv)
    if f.data.ndim == 1:
        f = f.reshape(-1, 1)
    g = input_gradient(f, xv)
    with no_grad():
        xp, valid = projection_graph(f, g, xv, normalize_direction, eps_grad)
    if not valid.all():
        raise ValueError(f"degenerate gradient at {int((~valid).sum())} point(s); sample skipped")
    return xp.data


# -- snapshot format ------------------------------------------------------------

def snapshot_bytes(net: Network) -> bytes:
    a = net.arch
    skip = "none" if a.skip_at is None else str(a.skip_at)
    header = (
        f"{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}\n"
        f"n_layers {a.n_layers}\n"
        f"hidden {a.hidden}\n"
        f"skip_at {skip}\n"
        f"in_dim {a.in_dim}\n"
        f"role {net.role.value}\n"
        f"seed {net.seed}\n"
        "end\n"
    ).encode("ascii")
    buf = io.BytesIO()
    buf.write(header)
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return buf.getvalue()


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes(), str(path))


def network_from_bytes(raw: bytes, name: str = "<bytes>") -> Network:
    end = raw.find(b"end\n")
    if not raw.startswith(SNAPSHOT_MAGIC.encode()) or end < 0:
        raise ValueError(f"{name}: not a network snapshot (byte 0: missing '{SNAPSHOT_MAGIC}' header)")
    lines = raw[:end].decode("ascii").splitlines()
    version = int(lines[0].split()[1])
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{name}: unsupported snapshot version {version}")
    meta = dict(line.split(" ", 1) for line in lines[1:])
    skip = None if meta["skip_at"] == "none" else int(meta["skip_at"])
    arch = NetworkArch(int(meta["n_layers"]), int(meta["hidden"]), skip, int(meta.get("in_dim", 3)))
    offset = end + 4
    weights, biases = [], []
    for d_in, d_out in arch.layer_dims():
        for shape in ((d_out, d_in), (d_out,)):
            n = int(np.prod(shape)) * 4
            if offset + n > len(raw):
                raise ValueError(f"{name}: truncated weight blob at byte offset {offset} "
                                 f"(need {n} bytes, have {len(raw) - offset})")
            arr = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=offset).astype(np.float64).reshape(shape)
            (weights if len(shape) == 2 else biases).append(arr)
            offset += n
    if offset != len(raw):
        raise ValueError(f"{name}: {len(raw) - offset} trailing bytes after weight blob at byte offset {offset}")
    return Network(arch, weights, biases, Role(meta["role"]), int(meta["seed"]))


def quantize(net: Network) -> Network:
    """Round-trip through the 32-bit snapshot so in-memory and on-disk nets agree."""
    return network_from_bytes(snapshot_bytes(net))
