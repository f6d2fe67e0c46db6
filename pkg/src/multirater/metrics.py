"""Segmentation evaluation metrics on binary masks.

Surface distances use the documented conventions: a boundary pixel is a
foreground pixel with at least one background 4-neighbor (the image border
counts as background); distances are Euclidean, pooled over both directed
boundary-to-boundary distance sets; ASD is the pooled mean, HD95 the
nearest-rank 95th percentile of the pooled set. Computation is brute force
over all boundary-pixel pairs — trivially fast at desk scale and directly
comparable to an all-pairs oracle.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricReport:
    dice: float
    jaccard: float
    asd: float
    hd95: float

    def as_dict(self):
        return {"dice": self.dice, "jaccard": self.jaccard,
                "asd": self.asd, "hd95": self.hd95}


def _as_bool(mask, name):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(a, b):
    """2|a&b| / (|a|+|b|); 1.0 when both masks are empty."""
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    _check_shapes(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / (sa + sb)


def jaccard(a, b):
    """Intersection over union; 1.0 when both masks are empty."""
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    _check_shapes(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / union


def boundary_pixels(mask):
    """(N,2) row/col coordinates of 4-connected boundary pixels."""
    m = _as_bool(mask, "mask")
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior).astype(np.float64)


def surface_distances(a, b):
    """(asd, hd95) in pixels; (nan, nan) with a warning if a mask is empty."""
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    _check_shapes(a, b)
    if not a.any() or not b.any():
        warnings.warn("surface distances undefined for an empty mask",
                      RuntimeWarning, stacklevel=2)
        return float("nan"), float("nan")
    pa = boundary_pixels(a)
    pb = boundary_pixels(b)
    diff = pa[:, None, :] - pb[None, :, :]
    dmat = np.sqrt((diff * diff).sum(axis=2))
    pooled = np.concatenate([dmat.min(axis=1), dmat.min(axis=0)])
    asd = float(pooled.mean())
    rank = int(np.ceil(0.95 * pooled.size)) - 1
    hd95 = float(np.sort(pooled)[rank])
    return asd, hd95


def evaluate_masks(pred, reference):
    """Full MetricReport for one predicted mask against its reference."""
    asd, hd95 = surface_distances(pred, reference)
    return MetricReport(dice=dice(pred, reference),
                        jaccard=jaccard(pred, reference),
                        asd=asd, hd95=hd95)


def aggregate_reports(reports):
    """Mean MetricReport; undefined (NaN) surface distances are excluded."""
    def nanmean(values):
        arr = np.asarray(values, dtype=np.float64)
        good = arr[~np.isnan(arr)]
        return float(good.mean()) if good.size else float("nan")

    return MetricReport(
        dice=float(np.mean([r.dice for r in reports])),
        jaccard=float(np.mean([r.jaccard for r in reports])),
        asd=nanmean([r.asd for r in reports]),
        hd95=nanmean([r.hd95 for r in reports]),
    )


METRIC_NAMES = ("dice", "jaccard", "asd", "hd95")


def write_metric_csv(path, rows, aggregate):
    """Per-sample metric rows plus exactly one trailing aggregate row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("sample_id",) + METRIC_NAMES)
        for sample_id, report in rows:
            writer.writerow([sample_id] + [repr(getattr(report, m))
                                           for m in METRIC_NAMES])
        writer.writerow(["aggregate"] + [repr(getattr(aggregate, m))
                                         for m in METRIC_NAMES])


def read_metric_csv(path):
    """Returns (per-sample rows, aggregate MetricReport)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[1:]) != METRIC_NAMES:
            raise ValueError(f"{path}: unexpected metric columns {header}")
        rows = []
        aggregate = None
        for record in reader:
            report = MetricReport(*(float(v) for v in record[1:]))
            if record[0] == "aggregate":
                aggregate = report
            else:
                rows.append((record[0], report))
    if aggregate is None:
        raise ValueError(f"{path}: missing aggregate row")
    return rows, aggregate
