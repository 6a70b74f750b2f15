"""Depth evaluation metrics.

All statistics are computed over a boolean mask (everywhere by default) after
clamping predictions to a small positive floor so the log-based metrics stay
finite.  ``abs_diff`` follows the reporting convention of taking the square
root of the mean absolute difference; ``mean_abs_diff`` is the plain mean for
anyone who wants the conventional number.  The ``delta`` accuracies use a
strict ``<`` on the max of the two depth ratios.
"""

import csv
from dataclasses import dataclass, fields

import numpy as np

PRED_FLOOR = 1e-6
_COLUMNS = ["abs_rel", "rmse", "sq_rel", "rmse_log", "abs_diff", "log10",
            "delta1", "delta2", "delta3"]
_LABELS = {"abs_rel": "AbsRel", "rmse": "RMSE", "sq_rel": "SqRel",
           "rmse_log": "RMSELog", "abs_diff": "AbsDiff", "log10": "Log10",
           "delta1": "d<1.25", "delta2": "d<1.25^2", "delta3": "d<1.25^3"}


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    abs_diff: float
    mean_abs_diff: float
    delta1: float
    delta2: float
    delta3: float
    thresholds: tuple          # ((x, fraction), ...)
    pixel_count: int

    def row(self):
        vals = [getattr(self, c) for c in _COLUMNS]
        return vals + [frac for _, frac in self.thresholds]

    def labels(self):
        return [_LABELS[c] for c in _COLUMNS] + [
            f"thre@{x:g}" for x, _ in self.thresholds]


def evaluate(pred, gt, mask=None, thresholds=(0.125, 0.25)):
    """Masked depth metrics; predictions are clamped to PRED_FLOOR first."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ValueError("mask shape must match depth shape")
    if not mask.any():
        raise ValueError("empty evaluation mask")
    p = np.maximum(pred[mask], PRED_FLOOR)
    g = gt[mask]
    if not np.all(g > 0.0) or not np.all(np.isfinite(g)):
        raise ValueError("ground truth must be positive and finite on the mask")

    diff = np.abs(p - g)
    ratio = np.maximum(p / g, g / p)
    thr = tuple((float(x), float(np.mean(diff < x))) for x in thresholds)
    return MetricsReport(
        abs_rel=float(np.mean(diff / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        abs_diff=float(np.sqrt(np.mean(diff))),
        mean_abs_diff=float(np.mean(diff)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        thresholds=thr,
        pixel_count=int(mask.sum()))


def evaluate_scale_aligned(pred, gt, mask=None, thresholds=(0.125, 0.25)):
    """Rescale pred by the masked median of gt/pred, then evaluate.

    Returns (report, scale).  Useful for methods whose output is only defined
    up to a global scale.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    p = np.maximum(pred[mask], PRED_FLOOR)
    scale = float(np.median(gt[mask] / p))
    if not np.isfinite(scale) or scale <= 0.0:
        raise ValueError("scale alignment needs positive finite depth ratios")
    return evaluate(pred * scale, gt, mask, thresholds), scale


def format_table(reports):
    """Fixed-width table for a {name: MetricsReport} mapping."""
    items = list(reports.items())
    labels = items[0][1].labels()
    name_w = max(len("method"), max(len(n) for n, _ in items))
    head = "method".ljust(name_w) + "".join(f"{lab:>11}" for lab in labels)
    lines = [head]
    for name, rep in items:
        lines.append(name.ljust(name_w)
                     + "".join(f"{v:>11.4f}" for v in rep.row()))
    return "\n".join(lines)


def write_csv(path, reports):
    items = list(reports.items())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + items[0][1].labels())
        for name, rep in items:
            writer.writerow([name] + [f"{v:.17g}" for v in rep.row()])
