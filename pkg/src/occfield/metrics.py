"""Depth and occupancy evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .grid import WEIGHT_MODE, OccupancyGrid, activate

FREE = 255
DEPTH_CLIP = (0.1, 80.0)


@dataclass
class DepthMetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta_1: float
    delta_2: float
    delta_3: float
    valid_pixels: int

    def as_tuple(self):
        return (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta_1, self.delta_2, self.delta_3)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        names = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta_1", "delta_2", "delta_3")
        head = "".join(f"{n:>10}" for n in names) + f"{'pixels':>10}"
        row = "".join(f"{v:10.4f}" for v in self.as_tuple()) + f"{self.valid_pixels:10d}"
        return head + "\n" + row + "\n"


def depth_metrics(pred, gt, clip=DEPTH_CLIP, mask=None) -> DepthMetricsReport:
    """Standard depth statistics over pixels whose ground truth lies in ``clip``.

    Predictions are clipped to the same range; no median scaling is applied.
    NaN predictions are excluded.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidParameterError(f"shape mismatch {pred.shape} vs {gt.shape}")
    lo, hi = clip
    valid = np.isfinite(gt) & (gt >= lo) & (gt <= hi) & ~np.isnan(pred)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise InvalidParameterError("no valid pixels for depth evaluation")
    d = np.clip(pred[valid], lo, hi)
    g = gt[valid]
    ratio = np.maximum(d / g, g / d)
    return DepthMetricsReport(
        abs_rel=float(np.mean(np.abs(d - g) / g)),
        sq_rel=float(np.mean((d - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((d - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        delta_1=float(np.mean(ratio < 1.25)),
        delta_2=float(np.mean(ratio < 1.25**2)),
        delta_3=float(np.mean(ratio < 1.25**3)),
        valid_pixels=n,
    )


@dataclass
class OccMetricsReport:
    per_class_iou: dict
    miou: float
    iou: float
    precision: float
    recall: float
    confusion: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return d

    def to_text(self, names: dict | None = None) -> str:
        lines = [f"{'class':<24}{'IoU':>8}{'TP':>9}{'FP':>9}{'FN':>9}"]
        for k, v in self.per_class_iou.items():
            tp, fp, fn = self.confusion["per_class"][k]
            label = names.get(k, str(k)) if names else str(k)
            lines.append(f"{label:<24}{v:8.4f}{tp:9d}{fp:9d}{fn:9d}")
        lines.append(f"{'mIoU':<24}{self.miou:8.4f}")
        lines.append(f"{'IoU (occupied)':<24}{self.iou:8.4f}")
        lines.append(f"{'precision':<24}{self.precision:8.4f}")
        lines.append(f"{'recall':<24}{self.recall:8.4f}")
        return "\n".join(lines) + "\n"


def _ratio(a, b):
    return float(a) / float(b) if b else 0.0


def occupancy_metrics(pred, gt, classes=None, ignore=None) -> OccMetricsReport:
    """Voxel label metrics; ``FREE`` marks empty voxels in both inputs.

    ``classes`` defaults to the occupied classes present in ``gt``.  Voxels
    where ``ignore`` is true are left out of every count.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidParameterError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if ignore is not None:
        keep = ~np.asarray(ignore, dtype=bool)
        pred, gt = pred[keep], gt[keep]
    pred = pred.reshape(-1)
    gt = gt.reshape(-1)
    if classes is None:
        classes = [int(c) for c in np.unique(gt) if c != FREE]
    classes = [int(c) for c in classes]
    if not classes:
        raise InvalidParameterError("no classes to evaluate")

    per_class, counts = {}, {}
    for c in classes:
        p, g = pred == c, gt == c
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        counts[c] = (tp, fp, fn)
        per_class[c] = _ratio(tp, tp + fp + fn)
    po, go = pred != FREE, gt != FREE
    tp = int(np.count_nonzero(po & go))
    fp = int(np.count_nonzero(po & ~go))
    fn = int(np.count_nonzero(~po & go))
    tn = int(np.count_nonzero(~po & ~go))
    return OccMetricsReport(
        per_class_iou=per_class,
        miou=float(np.mean(list(per_class.values()))),
        iou=_ratio(tp, tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn, "per_class": counts},
    )


def voxel_opacity(grid: OccupancyGrid) -> np.ndarray:
    """Activated per-voxel opacity; density is integrated across one voxel edge."""
    v = activate(grid.opacity_raw, grid.mode)
    if grid.mode == WEIGHT_MODE:
        return v
    return -np.expm1(-v * grid.d_v)


def extract_occupancy(grid: OccupancyGrid, threshold: float = 0.5):
    """Inside-region ``(occupied, labels)``; labels are the semantic argmax or 0."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidParameterError("threshold must lie in [0, 1]")
    sl = grid.inside_slices()
    occ = voxel_opacity(grid)[sl] > threshold
    labels = np.full(occ.shape, FREE, dtype=np.uint8)
    if grid.semantic_raw is not None:
        labels[occ] = np.argmax(grid.semantic_raw[sl][occ], axis=-1).astype(np.uint8)
    else:
        labels[occ] = 0
    return occ, labels


def threshold_sweep(grid: OccupancyGrid, gt_labels, thresholds, classes=None):
    out = []
    for t in thresholds:
        _, lab = extract_occupancy(grid, t)
        out.append((float(t), occupancy_metrics(lab, gt_labels, classes)))
    return out

