"""Point-set distances between a reconstruction and the ground truth.

Conventions, with d(p, Q) = min over q in Q of |p - q|, A = reconstruction and
B = ground truth:

* CD   = (mean_a d(a, B) + mean_b d(b, A)) / 2      (symmetric)
* HD   = max(max_a d(a, B), max_b d(b, A))          (symmetric)
* MAD  = mean_a d(a, B)                             (recon -> gt)
* RMSE = sqrt(mean_a d(a, B)^2)                     (recon -> gt)
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

CONVENTION = "CD=0.5*(mean d(A,B)+mean d(B,A)); HD=max of both directed maxima; MAD,RMSE directed A=recon->B=gt"
REPORT_COLUMNS = ("cd", "hd", "mad", "rmse", "n_recon", "n_gt", "seed", "space")


def directed_distances(a, b) -> np.ndarray:
    """Exact nearest distance from each point of ``a`` to the set ``b``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be non-empty")
    _, idx = cKDTree(b).query(a, k=1)
    return np.sqrt(np.sum((a - b[idx]) ** 2, axis=-1))


@dataclass
class MetricReport:
    cd: float
    hd: float
    mad: float
    rmse: float
    n_recon: int
    n_gt: int
    seed: int | None = None
    space: str = "normalized"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        d = asdict(self)
        w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in REPORT_COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        return (
            f"# metric report ({self.space} space)\n"
            f"# convention: {CONVENTION}\n"
            f"CD    {self.cd:.6g}\n"
            f"HD    {self.hd:.6g}\n"
            f"MAD   {self.mad:.6g}\n"
            f"RMSE  {self.rmse:.6g}\n"
            f"samples recon={self.n_recon} gt={self.n_gt} seed={self.seed}\n"
        )


def compute_metrics(recon_points, gt_points, seed: int | None = None, space: str = "normalized") -> MetricReport:
    a = np.asarray(recon_points, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    d_ab = directed_distances(a, b)
    d_ba = directed_distances(b, a)
    return MetricReport(
        cd=float(0.5 * (d_ab.mean() + d_ba.mean())),
        hd=float(max(d_ab.max(), d_ba.max())),
        mad=float(d_ab.mean()),
        rmse=float(np.sqrt(np.mean(d_ab ** 2))),
        n_recon=len(a),
        n_gt=len(b),
        seed=seed,
        space=space,
    )
