"""Segmentation metrics and the per-nodule-slice evaluation protocol.

Aggregate scores average only over slices whose ground truth contains at
least one positive voxel; empty slices are listed per-row but never enter
the aggregate. When both masks are empty of positives, overlap metrics
score 1.0 (perfect agreement); an empty ground truth against a non-empty
prediction scores 0.0.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

METRIC_NAMES = ("iou", "dsc", "sen", "acc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise UsageError(f"{name} must be binary 0/1")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def metrics(c):
    """IOU, DSC, Sen, Acc from confusion counts."""
    both_empty = c.tp == 0 and c.fp == 0 and c.fn == 0
    gt_empty = c.tp + c.fn == 0
    return {
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, both_empty),
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, both_empty),
        "sen": _ratio(c.tp, c.tp + c.fn, gt_empty and c.fp == 0),
        "acc": (c.tp + c.tn) / c.total if c.total else 1.0,
    }


@dataclass
class SliceRow:
    index: int
    iou: float
    dsc: float
    sen: float
    acc: float
    has_nodule: bool

    def to_dict(self):
        return {"slice": self.index, "iou": self.iou, "dsc": self.dsc,
                "sen": self.sen, "acc": self.acc, "has_nodule": self.has_nodule}


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    aggregate: "dict | None" = None
    nodule_slices: int = 0
    threshold: float = 0.5

    def to_dict(self):
        return {"threshold": self.threshold,
                "nodule_slices": self.nodule_slices,
                "aggregate": self.aggregate,
                "slices": [r.to_dict() for r in self.rows]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        """Aligned text table, one row per slice plus the nodule-slice mean."""
        lines = [f"{'slice':>6} {'IOU':>8} {'DSC':>8} {'Sen':>8} {'Acc':>8}  nodule"]
        for r in self.rows:
            lines.append(f"{r.index:>6} {r.iou:>8.4f} {r.dsc:>8.4f} {r.sen:>8.4f} "
                         f"{r.acc:>8.4f}  {'yes' if r.has_nodule else 'no'}")
        if self.aggregate is None:
            lines.append("mean over nodule slices: undefined (no nodule slices)")
        else:
            a = self.aggregate
            lines.append(f"{'mean':>6} {a['iou']:>8.4f} {a['dsc']:>8.4f} "
                         f"{a['sen']:>8.4f} {a['acc']:>8.4f}  over {self.nodule_slices} nodule slices")
        return "\n".join(lines)


def evaluate_volume(pred, gt, threshold=0.5):
    """Per-slice metrics plus the mean over slices that contain nodules.

    `pred` may be probabilistic (binarized at `threshold`); `gt` must be
    binary. Volumes must share dims.
    """
    if pred.dims != gt.dims:
        raise UsageError(f"pred dims {pred.dims} != gt dims {gt.dims}")
    pv = pred.voxels
    if pv.dtype != np.uint8:
        pv = (pv >= threshold).astype(np.uint8)
    gv = gt.voxels
    if not np.isin(gv, (0, 1)).all():
        raise UsageError("gt volume must be binary 0/1")

    rows = []
    for i in range(pred.dims[0]):
        c = confusion(pv[i], gv[i])
        m = metrics(c)
        rows.append(SliceRow(index=i, has_nodule=bool(gv[i].any()), **m))

    nodule_rows = [r for r in rows if r.has_nodule]
    aggregate = None
    if nodule_rows:
        aggregate = {k: float(np.mean([getattr(r, k) for r in nodule_rows]))
                     for k in METRIC_NAMES}
    return EvalReport(rows=rows, aggregate=aggregate,
                      nodule_slices=len(nodule_rows), threshold=threshold)
