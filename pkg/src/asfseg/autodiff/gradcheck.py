"""Finite-difference verification of analytic gradients.

The numeric side evaluates the (float32) graph at perturbed leaf values and
forms central differences in float64, dividing by the actually-realized
float32 step so quantization of x +/- h does not bias the estimate.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import GraphUsageError
from .graph import backward, evaluate, mean
from .tensor import Tensor


@dataclass
class LeafCheck:
    name: str
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    leaves: list = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def max_rel_err(self):
        return max((l.max_rel_err for l in self.leaves), default=0.0)

    @property
    def passed(self):
        return all(l.passed for l in self.leaves)

    def failing(self):
        return [l.name for l in self.leaves if not l.passed]


def _rel_err(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(root, bindings, step=1e-3, tolerance=1e-3, sample=None, seed=0):
    """Compare backward() against central finite differences.

    Checks every requires_grad leaf elementwise; `sample` caps the number of
    elements probed per leaf (chosen by a seeded RNG) to keep large graphs
    affordable. The graph output is reduced to a scalar with mean() when it
    is not one already.

    `step` may be a sequence of probe steps; the per-element error is then
    the minimum over steps. A wrong gradient is wrong at every step, while
    the two artifact regimes each vanish at one end: large probes straddle
    ReLU-style kinks, tiny probes amplify float32 round-off of the
    objective.
    """
    steps = tuple(step) if np.iterable(step) else (step,)
    grad_leaves = sorted(k for k, v in bindings.items()
                         if isinstance(v, Tensor) and v.requires_grad)
    if not grad_leaves:
        raise GraphUsageError("grad_check: no differentiable leaves in bindings")

    out = evaluate(root, bindings)
    objective = root if out.shape == (1, 1, 1, 1) else mean(root)
    evaluate(objective, bindings)
    analytic = backward(objective, Tensor.scalar(1.0))

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for key in grad_leaves:
        base = bindings[key].numpy()
        grad = analytic[key].numpy() if key in analytic else np.zeros_like(base)
        flat_idx = np.arange(base.size)
        if sample is not None and base.size > sample:
            flat_idx = np.sort(rng.choice(base.size, size=sample, replace=False))
        worst = 0.0
        probe = dict(bindings)
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape)
            err = np.inf
            for h0 in steps:
                xp = base.copy()
                xp[idx] = np.float32(base[idx] + h0)
                xm = base.copy()
                xm[idx] = np.float32(base[idx] - h0)
                probe[key] = Tensor(xp)
                fp = float(evaluate(objective, probe).item())
                probe[key] = Tensor(xm)
                fm = float(evaluate(objective, probe).item())
                h = float(xp[idx]) - float(xm[idx])
                numeric = (fp - fm) / h
                err = min(err, _rel_err(float(grad[idx]), numeric))
            worst = max(worst, err)
        report.leaves.append(LeafCheck(key, worst, len(flat_idx), worst <= tolerance))
    # restore caches for the unperturbed point
    evaluate(objective, bindings)
    return report
