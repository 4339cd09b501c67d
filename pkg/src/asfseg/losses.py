"""Loss stack: binary (BCE+Dice), edge-constrained, multi-scale, and total.

Losses are graph nodes so the trainer can differentiate through them; the
module-level functions evaluate the same nodes eagerly on plain arrays.
All losses average over pixels, so the lambda weights mean the same thing
at every resolution. Predictions are clamped to [1e-7, 1 - 1e-7] before the
logs (see autodiff.BCE_EPS).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import UsageError


@dataclass(frozen=True)
class LossWeights:
    edge_bce: float = 1.0          # lambda_1
    edge_dice: float = 1.0         # lambda_2
    scale: tuple = (1.0, 1.0, 1.0)  # lambda_i over scales 1, 1/2, 1/4
    dice_smooth: float = 1e-6

    def __post_init__(self):
        vals = (self.edge_bce, self.edge_dice, *self.scale, self.dice_smooth)
        if any(v < 0 for v in vals):
            raise UsageError("loss weights must be non-negative")
        if len(self.scale) != 3:
            raise UsageError(f"need 3 scale weights, got {len(self.scale)}")

    def to_dict(self):
        return {"edge_bce": self.edge_bce, "edge_dice": self.edge_dice,
                "scale": list(self.scale), "dice_smooth": self.dice_smooth}


@dataclass
class LossReport:
    l_bin: float
    l_edge: float
    l_ms: float
    l_total: float
    parts: dict

    def to_dict(self):
        out = {"l_bin": self.l_bin, "l_edge": self.l_edge,
               "l_ms": self.l_ms, "l_total": self.l_total}
        out.update(self.parts)
        return out


def _scaled(node, weight, name):
    return ad.mul(node, ad.const(np.full((1, 1, 1, 1), weight, dtype=np.float32)), name=name)


@dataclass
class LossGraph:
    """Loss term nodes attached to a network graph; `total` is the root."""
    total: ad.GraphNode
    l_bin: ad.GraphNode
    l_edge: "ad.GraphNode | None"
    l_ms: "ad.GraphNode | None"
    parts: dict

    def report(self, root=None):
        """LossReport from the cached values of the latest evaluate()."""
        root = root or self.total

        def value(n):
            return float(ad.fetch(root, n).reshape(())) if n is not None else 0.0

        return LossReport(
            l_bin=value(self.l_bin),
            l_edge=value(self.l_edge),
            l_ms=value(self.l_ms),
            l_total=value(self.total),
            parts={k: value(n) for k, n in self.parts.items()},
        )


def binary_loss_nodes(pred, target, smooth, prefix):
    b = ad.bce_loss(pred, target, name=f"{prefix}/bce")
    d = ad.dice_loss_node(pred, target, smooth=smooth, name=f"{prefix}/dice")
    return b, d, ad.add(b, d, name=prefix)


def build_loss_graph(outputs, targets, weights):
    """Wire the loss terms over network output nodes.

    `outputs` must expose .final, .scales (list), .edge (None when the branch
    is off); `targets` maps "mask", "edge", "scale0..2" to target leaf nodes.
    Disabled branches contribute exactly zero by omission.
    """
    parts = {}
    bce_b, dice_b, l_bin = binary_loss_nodes(outputs.final, targets["mask"], weights.dice_smooth, "loss/bin")
    parts["bce_bin"] = bce_b
    parts["dice_bin"] = dice_b

    l_edge = None
    if outputs.edge is not None:
        bce_e = ad.bce_loss(outputs.edge, targets["edge"], name="loss/edge/bce")
        dice_e = ad.dice_loss_node(outputs.edge, targets["edge"], smooth=weights.dice_smooth, name="loss/edge/dice")
        parts["bce_edge"] = bce_e
        parts["dice_edge"] = dice_e
        l_edge = ad.add(_scaled(bce_e, weights.edge_bce, "loss/edge/bce_w"),
                        _scaled(dice_e, weights.edge_dice, "loss/edge/dice_w"),
                        name="loss/edge")

    l_ms = None
    if outputs.scales:
        terms = []
        for i, (o, lam) in enumerate(zip(outputs.scales, weights.scale)):
            b = ad.bce_loss(o, targets[f"scale{i}"], name=f"loss/ms/bce{i}")
            parts[f"bce_ms{i}"] = b
            terms.append(_scaled(b, lam, f"loss/ms/bce{i}_w"))
        l_ms = terms[0]
        for t in terms[1:]:
            l_ms = ad.add(l_ms, t)
        l_ms.name = "loss/ms"

    total = l_bin
    if l_edge is not None:
        total = ad.add(total, l_edge)
    if l_ms is not None:
        total = ad.add(total, l_ms)
    total.name = "loss/total"
    return LossGraph(total=total, l_bin=l_bin, l_edge=l_edge, l_ms=l_ms, parts=parts)


# ---------------------------------------------------------------------------
# eager entry points (same primitives, evaluated on the spot)

def _eval_pair(build, pred, target):
    p = ad.as_array4d(pred, "pred")
    t = ad.as_array4d(target, "target")
    if p.shape != t.shape:
        raise UsageError(f"pred shape {p.shape} != target shape {t.shape}")
    pl = ad.leaf("pred")
    tl = ad.leaf("target")
    root = build(pl, tl)
    return float(ad.evaluate(root, {"pred": p, "target": t}).item())


def bce(pred, target):
    """Mean binary cross-entropy over all pixels."""
    return _eval_pair(lambda p, t: ad.bce_loss(p, t), pred, target)


def dice_loss(pred, target, smooth=1e-6):
    """Soft Dice loss, 1 - (2*overlap + s) / (|pred| + |target| + s)."""
    return _eval_pair(lambda p, t: ad.dice_loss_node(p, t, smooth=smooth), pred, target)


def loss_bin(pred, target, smooth=1e-6):
    return bce(pred, target) + dice_loss(pred, target, smooth)


def loss_edge(pred_edge, target_edge, weights=LossWeights()):
    if pred_edge is None:
        raise UsageError("edge branch is disabled; no edge prediction to score")
    return (weights.edge_bce * bce(pred_edge, target_edge)
            + weights.edge_dice * dice_loss(pred_edge, target_edge, weights.dice_smooth))


def loss_ms(preds, targets, weights=LossWeights()):
    if len(preds) != len(targets) or len(preds) != len(weights.scale):
        raise UsageError(f"need {len(weights.scale)} per-scale pairs, got {len(preds)}/{len(targets)}")
    return sum(lam * bce(p, t) for p, t, lam in zip(preds, targets, weights.scale))


def loss_total(outputs, gts, weights=LossWeights()):
    """LossReport over eager NetworkOutputs and a MaskSet-like gt bundle.

    `gts` needs .mask, .edge and .scales matching the enabled outputs.
    Disabled branches (missing in outputs) contribute zero.
    """
    parts = {}
    parts["bce_bin"] = bce(outputs.final, gts.mask)
    parts["dice_bin"] = dice_loss(outputs.final, gts.mask, weights.dice_smooth)
    l_bin = parts["bce_bin"] + parts["dice_bin"]

    l_edge_v = 0.0
    if outputs.edge is not None:
        parts["bce_edge"] = bce(outputs.edge, gts.edge)
        parts["dice_edge"] = dice_loss(outputs.edge, gts.edge, weights.dice_smooth)
        l_edge_v = weights.edge_bce * parts["bce_edge"] + weights.edge_dice * parts["dice_edge"]

    l_ms_v = 0.0
    if outputs.scales:
        if len(outputs.scales) != len(gts.scales):
            raise UsageError(f"{len(outputs.scales)} scale outputs vs {len(gts.scales)} scale masks")
        for i, (o, g, lam) in enumerate(zip(outputs.scales, gts.scales, weights.scale)):
            parts[f"bce_ms{i}"] = bce(o, g)
            l_ms_v += lam * parts[f"bce_ms{i}"]

    return LossReport(l_bin=l_bin, l_edge=l_edge_v, l_ms=l_ms_v,
                      l_total=l_bin + l_edge_v + l_ms_v, parts=parts)
