"""Recorded computation graph: node type, op constructors, evaluate, backward.

A graph is a DAG of GraphNode values built once and evaluated many times.
Leaves are named placeholders bound at evaluate(); parameters are leaves
with requires_grad=True, and gradients for a leaf name accumulate across
every node that binds it (this is how weight sharing works). Evaluation
caches every intermediate on the root, so backward() can run afterwards
without recomputing the forward pass.
"""

import numpy as np

from ..errors import GraphUsageError, NumericFaultError, ShapeMismatchError
from .primitives import (FORWARD, BACKWARD, BatchNormState, to_internal,
                         from_internal, public_shape)
from .tensor import Tensor

_COUNTER = [0]


class GraphNode:
    __slots__ = ("kind", "inputs", "params", "name", "requires_grad",
                 "_grad_inputs", "_topo", "_run")

    def __init__(self, kind, inputs=(), params=None, name=None, requires_grad=False):
        _COUNTER[0] += 1
        self.kind = kind
        self.inputs = tuple(inputs)
        self.params = params or {}
        self.name = name or f"{kind}#{_COUNTER[0]}"
        if kind in ("leaf", "const"):
            self.requires_grad = requires_grad
            self._grad_inputs = ()
        else:
            self._grad_inputs = tuple(i for i, x in enumerate(self.inputs) if x.requires_grad)
            self.requires_grad = bool(self._grad_inputs)
        self._topo = None
        self._run = None

    def needs_grad(self, i):
        return i in self._grad_inputs

    def __repr__(self):
        return f"GraphNode({self.name})"


def leaf(key, shape=None, requires_grad=False):
    """Named placeholder bound at evaluate(); `shape`, when given, is enforced."""
    return GraphNode("leaf", params={"key": key, "shape": shape},
                     name=key, requires_grad=requires_grad)


def const(value, name=None):
    """Embedded constant; never bound, never differentiated."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float32)
    if arr.ndim != 4:
        raise GraphUsageError(f"const must be rank 4, got shape {arr.shape}")
    return GraphNode("const", params={"value": to_internal(arr)}, name=name)


def conv2d(x, w, b=None, stride=1, pad=0, name=None):
    inputs = (x, w) if b is None else (x, w, b)
    return GraphNode("conv2d", inputs, {"stride": stride, "pad": pad}, name)


def batchnorm2d(x, gamma, beta, state, eps=1e-5, momentum=0.1, name=None):
    if not isinstance(state, BatchNormState):
        raise GraphUsageError("batchnorm2d needs a BatchNormState")
    return GraphNode("batchnorm2d", (x, gamma, beta),
                     {"state": state, "eps": eps, "momentum": momentum}, name)


def relu(x, name=None):
    return GraphNode("relu", (x,), name=name)


def sigmoid(x, name=None):
    return GraphNode("sigmoid", (x,), name=name)


def add(a, b, name=None):
    return GraphNode("add", (a, b), name=name)


def mul(a, b, name=None):
    return GraphNode("mul", (a, b), name=name)


def concat(*xs, name=None):
    if len(xs) < 2:
        raise GraphUsageError("concat needs at least two inputs")
    return GraphNode("concat", xs, name=name)


def maxpool(x, name=None):
    return GraphNode("maxpool", (x,), {"kernel": 2, "stride": 2}, name)


def upsample_nearest(x, name=None):
    return GraphNode("upsample-nearest", (x,), {"factor": 2}, name)


def resize_bilinear(x, target_h, target_w, name=None):
    return GraphNode("resize-bilinear", (x,), {"target": (int(target_h), int(target_w))}, name)


def global_mean_pool(x, name=None):
    return GraphNode("global-mean-pool", (x,), name=name)


def mean(x, axis=None, name=None):
    return GraphNode("mean", (x,), {"axis": axis}, name)


def tensor_sum(x, axis=None, name=None):
    return GraphNode("sum", (x,), {"axis": axis}, name)


def amax(x, axis, name=None):
    return GraphNode("amax", (x,), {"axis": axis}, name)


def fully_connected(x, w, b, name=None):
    return GraphNode("fully-connected", (x, w, b), name=name)


def stack_batch(*xs, name=None):
    if len(xs) < 2:
        raise GraphUsageError("stack_batch needs at least two inputs")
    return GraphNode("stack-batch", xs, name=name)


def slice_batch(x, index, parts, name=None):
    if not 0 <= index < parts:
        raise GraphUsageError(f"slice_batch index {index} out of range for {parts} parts")
    return GraphNode("slice-batch", (x,), {"index": index, "parts": parts}, name)


def bce_loss(pred, target, name=None):
    if target.requires_grad:
        raise GraphUsageError("loss targets must not require gradients")
    return GraphNode("bce-loss", (pred, target), name=name)


def dice_loss_node(pred, target, smooth=1e-6, name=None):
    if target.requires_grad:
        raise GraphUsageError("loss targets must not require gradients")
    return GraphNode("dice-loss", (pred, target), {"smooth": smooth}, name)


# ---------------------------------------------------------------------------
# evaluation

class _Run:
    __slots__ = ("values", "caches")

    def __init__(self):
        self.values = {}
        self.caches = {}


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def evaluate(root, bindings, check_finite=True):
    """Forward pass. Returns the root value as a Tensor.

    `bindings` maps leaf keys to Tensors (or float32 arrays). Intermediates
    are cached on the root for a subsequent backward(). Deterministic for
    fixed bindings. Extra bindings are ignored; a missing one is an error.
    """
    if root._topo is None:
        root._topo = _toposort(root)
    run = _Run()
    values = run.values
    for node in root._topo:
        nid = id(node)
        if node.kind == "leaf":
            key = node.params["key"]
            try:
                bound = bindings[key]
            except KeyError:
                raise GraphUsageError(f"no binding for leaf '{key}'") from None
            is_tensor = isinstance(bound, Tensor)
            arr = bound.data if is_tensor else np.asarray(bound, dtype=np.float32)
            if arr.ndim != 4:
                raise ShapeMismatchError(node.name, f"binding for '{key}' must be rank 4, got {arr.shape}")
            want = node.params["shape"]
            if want is not None and tuple(arr.shape) != tuple(want):
                raise ShapeMismatchError(node.name, f"binding for '{key}' has shape {arr.shape}, declared {tuple(want)}")
            values[nid] = bound.internal() if is_tensor else to_internal(arr)
            continue
        if node.kind == "const":
            values[nid] = node.params["value"]
            continue
        xs = [values[id(inp)] for inp in node.inputs]
        out, cache = FORWARD[node.kind](node, xs)
        if check_finite and not np.all(np.isfinite(out)):
            raise NumericFaultError(node.name)
        values[nid] = out
        if cache is not None:
            run.caches[nid] = cache
    root._run = run
    return Tensor(from_internal(values[id(root)]))


def evaluate_multi(roots, bindings, check_finite=True):
    """Forward pass over several roots sharing one value cache.

    Returns one Tensor per root; the run is attached to the first root, so
    fetch()/backward() on that root can see every evaluated node.
    """
    anchor = roots[0]
    order, seen = [], set()
    for r in roots:
        for node in _toposort(r):
            if id(node) not in seen:
                seen.add(id(node))
                order.append(node)
    saved = anchor._topo
    anchor._topo = order
    try:
        evaluate(anchor, bindings, check_finite=check_finite)
    finally:
        anchor._topo = saved
    run = anchor._run
    return [Tensor(from_internal(run.values[id(r)])) for r in roots]


def fetch(root, node):
    """Value of an interior node from the most recent evaluate() on root,
    in public (N,C,H,W) layout."""
    if root._run is None:
        raise GraphUsageError("fetch() before evaluate()")
    try:
        return from_internal(root._run.values[id(node)])
    except KeyError:
        raise GraphUsageError(f"node '{node.name}' is not part of the evaluated graph") from None


def backward(root, seed_grad):
    """Reverse pass from root. Returns {leaf key: Tensor} for every
    requires_grad leaf, accumulating additively over shared leaves."""
    if root._run is None:
        raise GraphUsageError("backward() before evaluate()")
    if root._topo is None:
        root._topo = _toposort(root)
    seed = seed_grad.data if isinstance(seed_grad, Tensor) else np.asarray(seed_grad, dtype=np.float32)
    root_val = root._run.values[id(root)]
    if seed.shape != public_shape(root_val):
        raise ShapeMismatchError(root.name, f"seed gradient shape {seed.shape} != "
                                            f"output shape {public_shape(root_val)}")

    values, caches = root._run.values, root._run.caches
    grads = {id(root): to_internal(seed)}
    leaf_grads = {}
    for node in reversed(root._topo):
        if not node.requires_grad:
            continue
        go = grads.pop(id(node), None)
        if go is None:
            continue
        if node.kind == "leaf":
            key = node.params["key"]
            prev = leaf_grads.get(key)
            leaf_grads[key] = go if prev is None else prev + go
            continue
        xs = [values[id(inp)] for inp in node.inputs]
        gin = BACKWARD[node.kind](node, xs, values[id(node)], caches.pop(id(node), None), go)
        for inp, g in zip(node.inputs, gin):
            if g is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = g if prev is None else prev + g
    if not leaf_grads:
        raise GraphUsageError("graph has no differentiable leaves")
    return {k: Tensor(from_internal(v)) for k, v in leaf_grads.items()}
