"""Lesion segmentation metrics on binary 3-D masks with anisotropic voxels.

Masks are indexed (z, y, x). Spacing is given the way scanners report it,
(x, y, z) in millimetres, e.g. (1, 1, 5) for 5 mm axial slices.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

METRICS = ("dice", "hausdorff_mm", "avg_dist_mm", "precision", "recall", "avd_ml")
LABELS = {
    "dice": "Dice",
    "hausdorff_mm": "Hausdorff Distance",
    "avg_dist_mm": "Average Distance",
    "precision": "Precision",
    "recall": "Recall",
    "avd_ml": "Absolute Volume Difference",
}
HIGHER_IS_BETTER = {"dice": True, "hausdorff_mm": False, "avg_dist_mm": False,
                    "precision": True, "recall": True, "avd_ml": False}


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def _volume(mask: np.ndarray) -> np.ndarray:
    """Collapse a leading singleton channel axis so masks are (z, y, x)."""
    if mask.ndim == 4 and mask.shape[0] == 1:
        mask = mask[0]
    if mask.ndim == 2:
        mask = mask[None]
    if mask.ndim != 3:
        raise ValueError(f"expected a 3-D mask, got shape {mask.shape}")
    return mask


def _axis_spacing(spacing) -> np.ndarray:
    sx, sy, sz = (float(v) for v in spacing)
    return np.array([sz, sy, sx])


def dice(pred, gt) -> float:
    p, g = _check(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2 * np.logical_and(p, g).sum() / denom)


def precision(pred, gt) -> float:
    p, g = _check(pred, gt)
    n = p.sum()
    if n == 0:
        return 1.0 if g.sum() == 0 else 0.0
    return float(np.logical_and(p, g).sum() / n)


def recall(pred, gt) -> float:
    p, g = _check(pred, gt)
    n = g.sum()
    if n == 0:
        return 1.0 if p.sum() == 0 else 0.0
    return float(np.logical_and(p, g).sum() / n)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-connected neighbour outside the mask or volume."""
    m = np.pad(mask.astype(bool), 1)
    interior = m[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(m, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask.astype(bool) & ~interior


def physical_diagonal(shape, spacing) -> float:
    return float(np.linalg.norm(np.asarray(shape, dtype=np.float64) * _axis_spacing(spacing)))


def _directed(src: np.ndarray, dst: np.ndarray, sp: np.ndarray) -> np.ndarray:
    """Distance from every boundary voxel of ``src`` to the nearest boundary voxel of ``dst``."""
    _, idx = ndimage.distance_transform_edt(~dst, sampling=sp, return_indices=True)
    pts = np.argwhere(src)
    nearest = idx[:, pts[:, 0], pts[:, 1], pts[:, 2]].T
    return np.sqrt((((pts - nearest) * sp) ** 2).sum(axis=1))


def surface_distances(pred, gt, spacing=(1.0, 1.0, 5.0)):
    """Directed boundary distances (pred->gt, gt->pred) in mm, or None if a mask is empty."""
    p, g = _check(pred, gt)
    p, g = _volume(p), _volume(g)
    if not p.any() or not g.any():
        return None
    sp = _axis_spacing(spacing)
    bp, bg = boundary(p), boundary(g)
    return _directed(bp, bg, sp), _directed(bg, bp, sp)


def _empty_case(pred, gt, spacing) -> float:
    p, g = _volume(np.asarray(pred)), _volume(np.asarray(gt))
    if not p.any() and not g.any():
        return 0.0
    return physical_diagonal(p.shape, spacing)


def hausdorff_mm(pred, gt, spacing=(1.0, 1.0, 5.0)) -> float:
    d = surface_distances(pred, gt, spacing)
    if d is None:
        return _empty_case(pred, gt, spacing)
    return float(max(d[0].max(), d[1].max()))


def avg_dist_mm(pred, gt, spacing=(1.0, 1.0, 5.0)) -> float:
    """Average symmetric surface distance: mean of the two directed mean distances."""
    d = surface_distances(pred, gt, spacing)
    if d is None:
        return _empty_case(pred, gt, spacing)
    return float((d[0].mean() + d[1].mean()) / 2.0)


def avd_ml(pred, gt, spacing=(1.0, 1.0, 5.0)) -> float:
    p, g = _check(pred, gt)
    voxel_mm3 = float(np.prod([float(v) for v in spacing]))
    return abs(int(p.sum()) - int(g.sum())) * voxel_mm3 / 1000.0


def scan_metrics(pred, gt, spacing=(1.0, 1.0, 5.0)) -> dict[str, float]:
    p, g = _check(pred, gt)
    d = surface_distances(p, g, spacing)
    if d is None:
        hd = ad = _empty_case(p, g, spacing)
    else:
        hd = float(max(d[0].max(), d[1].max()))
        ad = float((d[0].mean() + d[1].mean()) / 2.0)
    return {"dice": dice(p, g), "hausdorff_mm": hd, "avg_dist_mm": ad,
            "precision": precision(p, g), "recall": recall(p, g), "avd_ml": avd_ml(p, g, spacing)}


# ---------------------------------------------------------------------------
# Aggregation and reporting
# ---------------------------------------------------------------------------
@dataclass
class MetricsReport:
    label: str
    rows: list[dict] = field(default_factory=list)
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.rows)

    def to_json(self) -> dict:
        return {"label": self.label, "count": self.count, "mean": self.mean, "std": self.std,
                "rows": self.rows}

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        return cls(doc["label"], list(doc["rows"]), dict(doc["mean"]), dict(doc["std"]))


def aggregate(rows: list[dict], label: str = "FCN") -> MetricsReport:
    """Mean and sample (n-1) standard deviation per metric; std is 0 for a single row."""
    if not rows:
        raise ValueError("cannot aggregate an empty set of rows")
    mean, std = {}, {}
    for name in METRICS:
        vals = np.array([float(r[name]) for r in rows], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return MetricsReport(label, [dict(r) for r in rows], mean, std)


def format_table(reports: list[MetricsReport]) -> str:
    """Plain-text table: one metric per line, ``mean ± std`` per configuration."""
    name_w = max(len(LABELS[m]) for m in METRICS) + 2
    col_w = 18
    head = f"{'Metric':<{name_w}}" + "".join(f"{r.label:>{col_w}}" for r in reports)
    lines = [head, "-" * len(head)]
    for m in METRICS:
        arrow = "↑" if HIGHER_IS_BETTER[m] else "↓"
        cells = "".join(f"{f'{r.mean[m]:.2f} ± {r.std[m]:.2f}':>{col_w}}" for r in reports)
        lines.append(f"{arrow} {LABELS[m]:<{name_w - 2}}" + cells)
    counts = "".join(f"{f'n={r.count}':>{col_w}}" for r in reports)
    lines.append(f"{'scans':<{name_w}}" + counts)
    return "\n".join(lines) + "\n"


def report_json(reports: list[MetricsReport]) -> str:
    doc = {"metrics": list(METRICS), "higher_is_better": HIGHER_IS_BETTER,
           "configurations": [r.to_json() for r in reports]}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def is_finite_report(report: MetricsReport) -> bool:
    return all(math.isfinite(v) for v in list(report.mean.values()) + list(report.std.values()))
