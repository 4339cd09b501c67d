"""Finite-difference verification suite over every primitive and the full
training graph.

Primitives with kinks (relu, maxpool, amax) are probed at inputs kept away
from their non-differentiable points: a central difference across a kink
measures nothing useful, so samplers enforce a margin (values separated by
much more than the probe step). Everything else is sampled from plain
Gaussians.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import build_loss_graph, LossWeights
from .network import Network, NetworkConfig


@dataclass
class SuiteRow:
    name: str
    max_rel_err: float
    tolerance: float
    passed: bool


def _t(rng, shape, scale=1.0, grad=True):
    return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=grad)


def _separated(rng, shape, spacing=0.05):
    """Values with pairwise gaps >> the finite-difference step, so max-like
    ops see no ties within probe distance."""
    n = int(np.prod(shape))
    vals = (np.arange(n, dtype=np.float32) - n / 2) * spacing
    return ad.Tensor(rng.permutation(vals).reshape(shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.2):
    mag = rng.uniform(margin, 1.0 + margin, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return ad.Tensor(mag * sign, requires_grad=True)


def _binary(rng, shape):
    return ad.Tensor((rng.random(shape) > 0.5).astype(np.float32))


def _prob(rng, shape):
    return ad.Tensor(rng.uniform(0.1, 0.9, size=shape), requires_grad=True)


SHAPE = (1, 2, 6, 6)


def _conv_case(stride, pad, k=3, bias=True):
    def build(rng):
        leaves = {"x": _t(rng, SHAPE), "w": _t(rng, (3, 2, k, k), 0.5)}
        args = [ad.leaf("x", requires_grad=True), ad.leaf("w", requires_grad=True)]
        if bias:
            leaves["b"] = _t(rng, (1, 3, 1, 1), 0.3)
            args.append(ad.leaf("b", requires_grad=True))
        return ad.conv2d(*args, stride=stride, pad=pad), leaves
    return build


def _bn_case(training):
    def build(rng):
        state = ad.BatchNormState(2)
        state.training = training
        if not training:
            state.running_mean = rng.normal(0, 0.5, 2).astype(np.float32)
            state.running_var = rng.uniform(0.5, 2.0, 2).astype(np.float32)
        node = ad.batchnorm2d(ad.leaf("x", requires_grad=True),
                              ad.leaf("g", requires_grad=True),
                              ad.leaf("b", requires_grad=True), state)
        return node, {"x": _t(rng, SHAPE),
                      "g": ad.Tensor(rng.uniform(0.5, 1.5, (1, 2, 1, 1)), requires_grad=True),
                      "b": _t(rng, (1, 2, 1, 1), 0.3)}
    return build


def _two_input(op, shape_b=SHAPE):
    def build(rng):
        node = op(ad.leaf("a", requires_grad=True), ad.leaf("b", requires_grad=True))
        return node, {"a": _t(rng, SHAPE), "b": _t(rng, shape_b)}
    return build


def _one_input(op, sampler=_t):
    def build(rng):
        return op(ad.leaf("x", requires_grad=True)), {"x": sampler(rng, SHAPE)}
    return build


def _loss_case(op):
    def build(rng):
        node = op(ad.leaf("p", requires_grad=True), ad.leaf("t"))
        return node, {"p": _prob(rng, SHAPE), "t": _binary(rng, SHAPE)}
    return build


def _fc_case(rng):
    node = ad.fully_connected(ad.leaf("x", requires_grad=True),
                              ad.leaf("w", requires_grad=True),
                              ad.leaf("b", requires_grad=True))
    return node, {"x": _t(rng, (2, 5, 1, 1)), "w": _t(rng, (4, 5, 1, 1), 0.5),
                  "b": _t(rng, (1, 4, 1, 1), 0.3)}


def _stack_case(rng):
    st = ad.stack_batch(ad.leaf("a", requires_grad=True), ad.leaf("b", requires_grad=True),
                        ad.leaf("c", requires_grad=True))
    node = ad.mul(ad.slice_batch(st, 0, 3), ad.slice_batch(st, 2, 3))
    return node, {k: _t(rng, SHAPE) for k in ("a", "b", "c")}


PRIMITIVE_CASES = [
    ("conv2d (3x3, s1, p1)", _conv_case(1, 1)),
    ("conv2d (3x3, s2, p1)", _conv_case(2, 1)),
    ("conv2d (1x1, s1, p0)", _conv_case(1, 0, k=1)),
    ("batchnorm2d (train)", _bn_case(True)),
    ("batchnorm2d (eval)", _bn_case(False)),
    ("relu", _one_input(ad.relu, _away_from_zero)),
    ("sigmoid", _one_input(ad.sigmoid)),
    ("add", _two_input(ad.add)),
    ("add (broadcast)", _two_input(ad.add, (1, 2, 1, 1))),
    ("mul", _two_input(ad.mul)),
    ("mul (broadcast)", _two_input(ad.mul, (1, 2, 1, 1))),
    ("concat", _two_input(lambda a, b: ad.concat(a, b))),
    ("maxpool", _one_input(ad.maxpool, _separated)),
    ("upsample-nearest", _one_input(ad.upsample_nearest)),
    ("resize-bilinear (up)", _one_input(lambda x: ad.resize_bilinear(x, 9, 8))),
    ("resize-bilinear (down)", _one_input(lambda x: ad.resize_bilinear(x, 3, 4))),
    ("global-mean-pool", _one_input(ad.global_mean_pool)),
    ("mean (channel)", _one_input(lambda x: ad.mean(x, axis=(1,)))),
    ("mean (all)", _one_input(ad.mean)),
    ("sum (spatial)", _one_input(lambda x: ad.tensor_sum(x, axis=(2, 3)))),
    ("amax (channel)", _one_input(lambda x: ad.amax(x, axis=(1,)), _separated)),
    ("amax (spatial)", _one_input(lambda x: ad.amax(x, axis=(2, 3)), _separated)),
    ("fully-connected", _fc_case),
    ("stack/slice-batch", _stack_case),
    ("bce-loss", _loss_case(ad.bce_loss)),
    ("dice-loss", _loss_case(lambda p, t: ad.dice_loss_node(p, t))),
]


def check_primitives(seeds=10, step=1e-3, tolerance=1e-3):
    """One row per primitive case; max relative error over `seeds` draws."""
    rows = []
    for name, build in PRIMITIVE_CASES:
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            root, leaves = build(rng)
            report = ad.grad_check(root, leaves, step=step, tolerance=tolerance)
            worst = max(worst, report.max_rel_err)
        rows.append(SuiteRow(name, worst, tolerance, worst <= tolerance))
    return rows


def toy_network_config(seed=0):
    return NetworkConfig(base_channels=4, encoder_depth=4, asf_variant="F3",
                         msf_enabled=True, edge_branch_enabled=True,
                         ms_outputs_enabled=True, attention_reduction=2, seed=seed)


def full_model_bindings(net, tile=16, batch=2, seed=0):
    """Loss-graph root plus bindings for a toy end-to-end check."""
    graph = net.graph((tile, tile))
    targets = {"mask": ad.leaf("target/mask"), "edge": ad.leaf("target/edge")}
    for i in range(3):
        targets[f"scale{i}"] = ad.leaf(f"target/scale{i}")
    loss_graph = build_loss_graph(graph.outputs, targets, LossWeights())
    rng = np.random.default_rng(seed)
    bindings = dict(net.params)
    for key in ("input/prev", "input/cur", "input/next"):
        bindings[key] = ad.Tensor(rng.random((batch, 1, tile, tile)))
    bindings["target/mask"] = _binary(rng, (batch, 1, tile, tile))
    bindings["target/edge"] = _binary(rng, (batch, 1, tile, tile))
    bindings["target/scale0"] = bindings["target/mask"]
    bindings["target/scale1"] = _binary(rng, (batch, 1, tile // 2, tile // 2))
    bindings["target/scale2"] = _binary(rng, (batch, 1, tile // 4, tile // 4))
    return loss_graph.total, bindings


def check_full_model(tolerance=1e-2, step=(3e-4, 1e-4), sample=5, seed=0):
    """Finite-difference check of the total loss through the 16x16 toy model.

    Runs with BatchNorm statistics warmed on the probe batch and then
    frozen. With live batch statistics a nudge to an early parameter is
    almost exactly cancelled by downstream re-centering, so the true
    derivative is a residue of large cancelling float32 terms and central
    differences measure rounding noise instead of the gradient; the
    train-mode statistics path has its own primitive-level check. Elements
    are scored at two probe steps (kink crossings dominate large steps,
    round-off small ones; a wrong gradient fails at both).
    """
    net = Network(toy_network_config(seed))
    root, bindings = full_model_bindings(net, seed=seed)
    net.set_training(True)
    ad.evaluate(root, bindings)     # one pass to give running stats data scale
    net.set_training(False)
    report = ad.grad_check(root, bindings, step=step, tolerance=tolerance,
                           sample=sample, seed=seed)
    return SuiteRow("full model (total loss, 16x16 toy)", report.max_rel_err,
                    tolerance, report.passed), report
