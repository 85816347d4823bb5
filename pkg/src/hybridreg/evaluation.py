"""Control-point evaluation: RMSE, acceptance rate and AUC, plus checkerboard mosaics."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_points

ACCEPT_THRESHOLD = 20.0
AUC_T_MAX = 25
AUC_STEP = 1


def rmse(points_f, points_transferred):
    """Root mean squared Euclidean distance between paired point sets."""
    a = check_points(points_f, "points_f")
    b = check_points(points_transferred, "points_transferred")
    if len(a) != len(b):
        raise ValueError(f"point counts differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("rmse needs at least one point pair")
    # correctly rounded sum, so the value does not depend on summation order
    return math.sqrt(math.fsum(((a - b) ** 2).ravel().tolist()) / len(a))


def accepted(rmse_value, threshold=ACCEPT_THRESHOLD):
    """A registration is acceptable when its RMSE is strictly below ``threshold``."""
    return bool(rmse_value < threshold)


def auc_thresholds(t_max=AUC_T_MAX, step=AUC_STEP):
    n = int(round(t_max / step))
    return [k * step for k in range(n + 1)]


def success_curve(rmse_list, t_max=AUC_T_MAX, step=AUC_STEP):
    vals = np.asarray(rmse_list, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("need at least one RMSE value")
    ts = np.asarray(auc_thresholds(t_max, step), dtype=np.float64)
    return ts, np.mean(vals[None, :] <= ts[:, None], axis=1)


def auc(rmse_list, t_max=AUC_T_MAX, step=AUC_STEP):
    """Mean over thresholds ``0, step, ..., t_max`` of the fraction of pairs with RMSE <= t."""
    vals = np.asarray(rmse_list, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("need at least one RMSE value")
    ts = np.asarray(auc_thresholds(t_max, step), dtype=np.float64)
    hits = int(np.count_nonzero(vals[None, :] <= ts[:, None]))
    return hits / (vals.size * ts.size)


@dataclass
class PairResult:
    pair_id: str
    rmse_global: float
    rmse_final: float
    accepted: bool = None
    category: str = ""

    def __post_init__(self):
        for name in ("rmse_global", "rmse_final"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {val}")
            setattr(self, name, val)
        self.accepted = accepted(self.rmse_final)


@dataclass
class BatchResult:
    pairs: list
    accept_rate: float
    accept_rate_global: float
    auc: float
    auc_global: float
    thresholds: list
    errors: list = field(default_factory=list)
    by_category: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        return d

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["pair_id", "rmse_global", "rmse_final", "accepted", "category"])
            for p in self.pairs:
                wr.writerow([p.pair_id, repr(p.rmse_global), repr(p.rmse_final), int(p.accepted), p.category])


def summarize(pair_results, errors=(), t_max=AUC_T_MAX, step=AUC_STEP):
    """Aggregate per-pair results; an empty list yields zero rates."""
    pairs = list(pair_results)
    thresholds = auc_thresholds(t_max, step)
    if not pairs:
        return BatchResult([], 0.0, 0.0, 0.0, 0.0, thresholds, list(errors))
    fin = [p.rmse_final for p in pairs]
    glo = [p.rmse_global for p in pairs]
    cats = {}
    for p in pairs:
        if p.category:
            cats.setdefault(p.category, []).append(p)
    by_cat = {
        c: {"n": len(ps), "auc": auc([p.rmse_final for p in ps], t_max, step),
            "accept_rate": float(np.mean([p.accepted for p in ps]))}
        for c, ps in sorted(cats.items())
    }
    return BatchResult(
        pairs=pairs,
        accept_rate=float(np.mean([accepted(r) for r in fin])),
        accept_rate_global=float(np.mean([accepted(r) for r in glo])),
        auc=auc(fin, t_max, step),
        auc_global=auc(glo, t_max, step),
        thresholds=thresholds,
        errors=list(errors),
        by_category=by_cat,
    )


def render_checkerboard(fixed, warped, tile=64):
    """Alternate ``tile``-pixel squares of ``fixed`` (even tiles) and ``warped`` (odd tiles)."""
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    if fixed.shape != warped.shape:
        raise ValueError(f"image sizes differ: {fixed.shape} vs {warped.shape}")
    if tile < 8:
        raise ValueError("tile must be at least 8 pixels")
    h, w = fixed.shape
    yy, xx = np.mgrid[0:h, 0:w]
    odd = ((yy // tile) + (xx // tile)) % 2 == 1
    return np.where(odd, warped, fixed)
