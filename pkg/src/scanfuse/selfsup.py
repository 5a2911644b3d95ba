"""Self-supervised per-view fitting: pull queries onto their nearest cloud points."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Value, adam_update, cosine_lr, input_gradient
from .network import Network, NetworkArch, Role, init_network, projection_graph
from .pointcloud import QuerySet

log = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("iteration", "lr", "loss_total", "loss_sdf", "loss_scc_weighted")


class NumericalFailure(RuntimeError):
    """Training produced a non-finite loss; ``state`` holds a diagnostic dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class SelfSupConfig:
    iterations: int = 10000
    batch: int = 5000
    base_lr: float = 0.001
    lambda_scc: float = 0.01
    alpha_nonmfd: float = 100.0
    lambda_adl: float = 0.0  # adversarial term: hook only, must stay 0
    eps_pair: float = 1e-9
    normalize_direction: bool = True
    seed: int = 0

    def validate(self, n_queries: int | None = None):
        for name in ("base_lr", "lambda_scc", "alpha_nonmfd", "lambda_adl", "eps_pair"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be positive")
        if n_queries is not None and self.batch > n_queries:
            raise ValueError(f"batch {self.batch} exceeds the query set size {n_queries}")
        if self.lambda_adl != 0:
            raise NotImplementedError("the adversarial loss is a reserved hook; lambda_adl must be 0")


# -- per-sample loss terms (scalar forms) -------------------------------------

def loss_sdf(x_proj, x_hat) -> float:
    d = np.asarray(x_proj, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)
    return float(d @ d)


def loss_scc(grad, x_proj, x_hat, eps_pair: float = 1e-9) -> float:
    """1 - cos(grad, unit(x_proj - x_hat)); degenerate pairs contribute 0."""
    g = np.asarray(grad, dtype=np.float64)
    d = np.asarray(x_proj, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)
    ng, nd = np.linalg.norm(g), np.linalg.norm(d)
    if ng < eps_pair or nd < eps_pair:
        return 0.0
    return float(1.0 - (g @ d) / (ng * nd))


def reg_nonmanifold(f_val, alpha: float):
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return np.exp(-alpha * np.abs(f_val))


# -- batched objective ------------------------------------------------------------

def self_supervised_loss(net: Network, queries: np.ndarray, nearest: np.ndarray,
                         config: SelfSupConfig):
    """Mean of L_sdf + lambda_scc * R_nonmfd * L_scc over the valid rows of a batch.

    Returns ``(loss, parts)`` where ``parts`` holds the unweighted means of the
    two terms for logging.
    """
    x = Value(queries, requires_grad=True)
    f = net.forward(x)
    g = input_gradient(f, x)
    x_proj, valid = projection_graph(f, g, x, config.normalize_direction)
    diff = x_proj - Value(nearest)
    sdf_term = (diff * diff).sum(axis=1)

    if config.lambda_scc > 0:
        d2 = (diff * diff).sum(axis=1)
        g2 = (g * g).sum(axis=1)
        eps2 = config.eps_pair ** 2
        pair_ok = (d2.data >= eps2) & (g2.data >= eps2)
        pad = Value((~pair_ok).astype(np.float64))
        cos = (g * diff).sum(axis=1) / ((d2 + pad).sqrt() * (g2 + pad).sqrt())
        scc = (1.0 - cos) * Value(pair_ok.astype(np.float64))
        weight = (f.reshape(-1).abs() * (-config.alpha_nonmfd)).exp()
        scc_term = scc * weight * config.lambda_scc
        per_sample = sdf_term + scc_term
        scc_mean = float((scc_term.data * valid).sum() / max(valid.sum(), 1))
    else:
        per_sample = sdf_term
        scc_mean = 0.0

    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NumericalFailure("every sample in the batch has a degenerate gradient", {})
    loss = (per_sample * Value(valid.astype(np.float64))).sum() * (1.0 / n_valid)
    sdf_mean = float((sdf_term.data * valid).sum() / n_valid)
    return loss, {"loss_sdf": sdf_mean, "loss_scc_weighted": scc_mean}


def _state_dump(net: Network, it: int, lr: float, parts: dict) -> dict:
    return {
        "iteration": it,
        "lr": lr,
        "terms": parts,
        "param_norms": [float(np.linalg.norm(p)) for p in net.parameter_arrays()],
        "finite_params": all(np.isfinite(p).all() for p in net.parameter_arrays()),
    }


def train_view(queries: QuerySet, config: SelfSupConfig, arch: NetworkArch | None = None,
               role: Role = Role.OTHER, seed: int | None = None, log_path=None,
               net: Network | None = None):
    """Fit one view's network. Returns ``(network, loss_rows)``."""
    if len(queries) == 0:
        raise ValueError("empty query set")
    config.validate(len(queries))
    seed = config.seed if seed is None else seed
    arch = arch or NetworkArch()
    net = net or init_network(arch, seed, role)
    rng = np.random.default_rng(seed + 1)
    state = AdamState.fresh(net.parameter_arrays())
    rows = []
    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.base_lr)
        idx = rng.integers(0, len(queries), size=config.batch)
        loss, parts = self_supervised_loss(net, queries.queries[idx], queries.nearest[idx], config)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalFailure(f"non-finite loss at iteration {it}", _state_dump(net, it, lr, parts))
        params = net.parameters()
        for p in params:
            p.grad = None
        loss.backward(params)
        new, state = adam_update(net.parameter_arrays(), [p.grad for p in params], state, lr)
        net.set_parameter_arrays(new)
        rows.append((it, lr, value, parts["loss_sdf"], parts["loss_scc_weighted"]))
        if it % 500 == 0:
            log.debug("iter %d lr %.2e loss %.6f", it, lr, value)
    if log_path is not None:
        write_loss_log(log_path, rows, LOSS_LOG_COLUMNS)
    return net, rows


def write_loss_log(path, rows, columns):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
