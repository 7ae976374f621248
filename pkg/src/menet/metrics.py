"""Hard-segmentation evaluation over the nested BraTS regions.

ET is the enhancing class alone (code 4), TC adds necrosis (codes 1
and 4), WT adds edema (codes 1, 2 and 4); nesting ET within TC within
WT holds by construction. Dice, sensitivity and specificity come from
exact voxel counts; Hausdorff95 is the max over both directed surface
distance sets of their 95th percentile, in physical millimetres. Any
empty mask makes hausdorff95 NaN, and means exclude those cases with a
reported count.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, ShapeMismatch, UnknownLabelCode

REGIONS = ("ET", "WT", "TC")
_REGION_CODES = {"ET": (4,), "WT": (1, 2, 4), "TC": (1, 4)}
METRIC_COLUMNS = ("dice", "sensitivity", "specificity", "hausdorff95")


def compose_regions(labels: np.ndarray) -> dict[str, np.ndarray]:
    """Three nested binary masks (ET, WT, TC) from a {0,1,2,4} label volume."""
    codes = set(int(c) for c in np.unique(labels))
    if codes - {0, 1, 2, 4}:
        raise UnknownLabelCode(f"label codes {sorted(codes - {0, 1, 2, 4})}")
    return {
        name: np.isin(labels, _REGION_CODES[name])
        for name in REGIONS
    }


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray) -> ConfusionCounts:
    if pred_mask.shape != true_mask.shape:
        raise ShapeMismatch(f"{pred_mask.shape} vs {true_mask.shape}")
    p = pred_mask.astype(bool)
    t = true_mask.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp, fp, fn, tn)


def dice_sens_spec(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(Dice, sensitivity, specificity); empty denominators count as perfect."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    dice = 1.0 if tp + fp + fn == 0 else 2.0 * tp / (fn + fp + 2.0 * tp)
    sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
    spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return dice, sens, spec


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one six-connected background neighbour
    (the volume border counts as background)."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def hausdorff95(
    pred_mask: np.ndarray,
    true_mask: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    percentile: float = 95.0,
) -> float:
    """Percentile Hausdorff distance between mask surfaces, in mm.

    Computes both directed nearest-surface distance sets, takes the
    given percentile of each and returns the larger one; percentile=100
    recovers the classical Hausdorff distance. Returns NaN when either
    mask is empty.
    """
    if pred_mask.shape != true_mask.shape:
        raise ShapeMismatch(f"{pred_mask.shape} vs {true_mask.shape}")
    if not pred_mask.any() or not true_mask.any():
        return math.nan
    scale = np.asarray(spacing, dtype=np.float64)
    p_pts = np.argwhere(surface_voxels(pred_mask)) * scale
    t_pts = np.argwhere(surface_voxels(true_mask)) * scale
    d_true_to_pred = cKDTree(p_pts).query(t_pts)[0]
    d_pred_to_true = cKDTree(t_pts).query(p_pts)[0]
    return float(max(
        np.percentile(d_true_to_pred, percentile),
        np.percentile(d_pred_to_true, percentile),
    ))


@dataclass(frozen=True)
class RegionMetrics:
    dice: float
    sensitivity: float
    specificity: float
    hausdorff95: float  # NaN when either mask was empty


@dataclass(frozen=True)
class MetricsReport:
    case_id: str
    regions: dict[str, RegionMetrics]


def evaluate_case(
    pred_labels: np.ndarray,
    true_labels: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    case_id: str = "",
) -> MetricsReport:
    if pred_labels.shape != true_labels.shape:
        raise ShapeMismatch(f"{pred_labels.shape} vs {true_labels.shape}")
    pred_regions = compose_regions(pred_labels)
    true_regions = compose_regions(true_labels)
    out = {}
    for name in REGIONS:
        d, sn, sp = dice_sens_spec(confusion(pred_regions[name], true_regions[name]))
        hd = hausdorff95(pred_regions[name], true_regions[name], spacing)
        out[name] = RegionMetrics(d, sn, sp, hd)
    return MetricsReport(case_id, out)


def _region_means(reports) -> dict[str, dict[str, float | int]]:
    means: dict[str, dict[str, float | int]] = {}
    for region in REGIONS:
        col = {}
        for metric in ("dice", "sensitivity", "specificity"):
            col[metric] = float(np.mean([
                getattr(r.regions[region], metric) for r in reports
            ]))
        hds = [r.regions[region].hausdorff95 for r in reports]
        valid = [h for h in hds if not math.isnan(h)]
        col["hausdorff95"] = float(np.mean(valid)) if valid else math.nan
        col["hausdorff95_excluded"] = len(hds) - len(valid)
        means[region] = col
    return means


def report_table(reports, format: str = "text") -> str:
    """Mean per metric per region; CSV rows are region,dice,sensitivity,
    specificity,hausdorff95."""
    reports = list(reports)
    if not reports:
        raise EmptyInput("no case reports to aggregate")
    means = _region_means(reports)
    if format == "csv":
        buf = io.StringIO()
        buf.write("region,dice,sensitivity,specificity,hausdorff95\n")
        for region in REGIONS:
            m = means[region]
            buf.write(
                f"{region},{m['dice']:.6f},{m['sensitivity']:.6f},"
                f"{m['specificity']:.6f},{m['hausdorff95']:.6f}\n"
            )
        return buf.getvalue()
    if format != "text":
        raise ValueError(f"unknown format {format!r}")
    lines = [f"cases: {len(reports)}"]
    header = f"{'':12s}" + "".join(f"{m:>14s}" for m in METRIC_COLUMNS)
    lines.append(header)
    for region in REGIONS:
        m = means[region]
        lines.append(
            f"{region:12s}"
            + f"{m['dice']:14.4f}{m['sensitivity']:14.4f}{m['specificity']:14.4f}"
            + f"{m['hausdorff95']:14.4f}"
        )
        if m["hausdorff95_excluded"]:
            lines.append(
                f"    ({m['hausdorff95_excluded']} case(s) with empty {region} masks"
                " excluded from hausdorff95)"
            )
    return "\n".join(lines) + "\n"
