"""Supervised refinement of a fused field: dense near-surface sampling plus L1 regression."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Value, adam_update, cosine_lr
from .fields import SdfField
from .network import Network, NetworkArch, Role, init_network
from .selfsup import NumericalFailure, _state_dump, write_loss_log

SAMPLES_MAGIC = b"RCSS"
SAMPLES_VERSION = 1
LOSS_LOG_COLUMNS = ("iteration", "lr", "loss_total", "loss_l1", "loss_mfd_weighted")
_SAMPLE_DTYPE = np.dtype([("x", "<f4", (3,)), ("target", "<f4"), ("near", "u1")])


class DegenerateField(ValueError):
    pass


@dataclass
class RefineConfig:
    n_uniform: int = 100000
    n_surface: int = 400000
    sigma_refine: float = 0.05
    tau_surf: float = 0.01
    lambda_mfd: float = 0.6
    iterations: int = 10000
    batch: int = 5000
    base_lr: float = 0.001
    seed: int = 0
    candidate_batch: int = 200000
    candidate_budget: int = 10_000_000

    def validate(self):
        if self.n_uniform <= 0 or self.n_surface <= 0:
            raise ValueError("sample counts must be positive")
        if self.sigma_refine <= 0:
            raise ValueError("sigma_refine must be positive")
        if self.lambda_mfd < 0 or self.tau_surf < 0:
            raise ValueError("lambda_mfd and tau_surf must be >= 0")
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be positive")


@dataclass
class RefineSet:
    x: np.ndarray  # (N, 3)
    target: np.ndarray  # (N,)
    near_surface: np.ndarray  # (N,) bool

    def __len__(self):
        return len(self.x)

    def to_bytes(self) -> bytes:
        rec = np.zeros(len(self), dtype=_SAMPLE_DTYPE)
        rec["x"] = self.x
        rec["target"] = self.target
        rec["near"] = self.near_surface
        return SAMPLES_MAGIC + struct.pack("<IQ", SAMPLES_VERSION, len(self)) + rec.tobytes()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())


def refine_set_from_bytes(raw: bytes, name: str = "<bytes>") -> RefineSet:
    if raw[:4] != SAMPLES_MAGIC:
        raise ValueError(f"{name}: bad magic at byte offset 0 (expected 'RCSS')")
    if len(raw) < 16:
        raise ValueError(f"{name}: truncated header at byte offset {len(raw)} (need 16 bytes)")
    version, count = struct.unpack_from("<IQ", raw, 4)
    if version != SAMPLES_VERSION:
        raise ValueError(f"{name}: unsupported sample-set version {version} at byte offset 4")
    need = 16 + count * _SAMPLE_DTYPE.itemsize
    if len(raw) != need:
        raise ValueError(f"{name}: expected {need} bytes for {count} samples, found {len(raw)} "
                         f"(records start at byte offset 16)")
    rec = np.frombuffer(raw, dtype=_SAMPLE_DTYPE, count=count, offset=16)
    return RefineSet(rec["x"].astype(np.float64), rec["target"].astype(np.float64), rec["near"].astype(bool))


def load_refine_set(path) -> RefineSet:
    return refine_set_from_bytes(Path(path).read_bytes(), str(path))


def sample_refinement_set(field: SdfField, config: RefineConfig) -> RefineSet:
    """Uniform samples in [-1, 1]^3 plus near-surface samples drawn by rejection.

    A uniform candidate with value t is accepted with probability
    exp(-t^2 / (2 sigma^2)); candidates beyond 4 sigma are never accepted.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    xu = rng.uniform(-1.0, 1.0, size=(config.n_uniform, 3))
    tu = field(xu)

    sigma = config.sigma_refine
    kept_x, kept_t, n_kept, n_cand = [], [], 0, 0
    while n_kept < config.n_surface:
        if n_cand >= config.candidate_budget and n_kept < 1e-4 * n_cand:
            raise DegenerateField(
                f"acceptance rate {n_kept / n_cand:.2e} over {n_cand} candidates: "
                "the field has no zero level in the cube")
        cand = rng.uniform(-1.0, 1.0, size=(config.candidate_batch, 3))
        t = field(cand)
        keep = (rng.random(len(t)) < np.exp(-t * t / (2 * sigma * sigma))) & (np.abs(t) <= 4 * sigma)
        kept_x.append(cand[keep])
        kept_t.append(t[keep])
        n_kept += int(keep.sum())
        n_cand += len(cand)
    xs = np.concatenate(kept_x)[: config.n_surface]
    ts = np.concatenate(kept_t)[: config.n_surface]
    return RefineSet(
        np.concatenate([xu, xs]),
        np.concatenate([tu, ts]),
        np.concatenate([np.zeros(len(xu), dtype=bool), np.ones(len(xs), dtype=bool)]),
    )


def loss_supervised(pred, target, near_surface, lambda_mfd: float = 0.6, tau_surf: float = 0.01) -> float:
    """|pred - target| plus lambda_mfd * |pred| at on-surface samples."""
    on = near_surface and abs(target) <= tau_surf
    return abs(pred - target) + (lambda_mfd * abs(pred) if on else 0.0)


def supervised_loss(net: Network, x: np.ndarray, target: np.ndarray, on_surface: np.ndarray,
                    lambda_mfd: float):
    pred = net.forward(Value(x)).reshape(-1)
    l1 = (pred - Value(target)).abs()
    if lambda_mfd > 0 and on_surface.any():
        mfd = pred.abs() * Value(lambda_mfd * on_surface.astype(np.float64))
        per = l1 + mfd
        mfd_mean = float(mfd.data.mean())
    else:
        per = l1
        mfd_mean = 0.0
    return per.mean(), {"loss_l1": float(l1.data.mean()), "loss_mfd_weighted": mfd_mean}


def refine_sdf(samples: RefineSet, config: RefineConfig, arch: NetworkArch | None = None,
               seed: int | None = None, log_path=None):
    """Regress a fresh network onto the sampled targets. Returns ``(network, loss_rows)``."""
    if len(samples) == 0:
        raise ValueError("empty sample set")
    config.validate()
    seed = config.seed if seed is None else seed
    arch = arch or NetworkArch()
    net = init_network(arch, seed, Role.REFINED)
    rng = np.random.default_rng(seed + 1)
    on_surface = samples.near_surface & (np.abs(samples.target) <= config.tau_surf)
    state = AdamState.fresh(net.parameter_arrays())
    params = net.parameters()
    rows = []
    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.base_lr)
        idx = rng.integers(0, len(samples), size=config.batch)
        loss, parts = supervised_loss(net, samples.x[idx], samples.target[idx], on_surface[idx],
                                      config.lambda_mfd)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalFailure(f"non-finite loss at iteration {it}", _state_dump(net, it, lr, parts))
        for p in params:
            p.grad = None
        loss.backward(params)
        new, state = adam_update(net.parameter_arrays(), [p.grad for p in params], state, lr)
        net.set_parameter_arrays(new)
        rows.append((it, lr, value, parts["loss_l1"], parts["loss_mfd_weighted"]))
    if log_path is not None:
        write_loss_log(log_path, rows, LOSS_LOG_COLUMNS)
    return net, rows
