"""Forward and backward kernels for every graph primitive.

Each forward takes (node, input_arrays) and returns (output, cache); each
backward takes (node, input_arrays, output, cache, grad_out) and returns one
gradient array per input (None where an input needs no gradient).

Internally arrays are laid out channels-last, (N, H, W, C): the im2col
gather then copies contiguous channel runs, which is what makes conv2d fast
on CPU. The public tensor contract stays (N, C, H, W); graph.evaluate and
graph.backward convert at the leaf/root boundary, and axis parameters given
in public coordinates are remapped here. Storage is float32 throughout;
reductions accumulate in float64 before casting back.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatchError

FORWARD = {}
BACKWARD = {}

# public NCHW axis -> internal NHWC axis
AXIS_MAP = {0: 0, 1: 3, 2: 1, 3: 2}


def to_internal(arr):
    """(N,C,H,W) float32 -> contiguous (N,H,W,C)."""
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))


def from_internal(arr):
    """(N,H,W,C) -> contiguous (N,C,H,W)."""
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def public_shape(arr):
    n, h, w, c = arr.shape
    return (n, c, h, w)


def _register(kind, fwd, bwd):
    FORWARD[kind] = fwd
    BACKWARD[kind] = bwd


def _f32(a):
    return a.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# conv2d

def _pad_hw(x, pad):
    if pad == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:h + pad, pad:w + pad] = x
    return xp


def _im2col(xp, kh, kw, stride):
    n = xp.shape[0]
    c = xp.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    _, ho, wo, _, _, _ = win.shape
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def conv2d_fwd(node, xs):
    x, w = xs[0], xs[1]
    b = xs[2] if len(xs) > 2 else None
    stride, pad = node.params["stride"], node.params["pad"]
    co, kh, kw, ci = w.shape            # internal layout of a (Co,Ci,kh,kw) kernel
    if x.shape[3] != ci:
        raise ShapeMismatchError(node.name, f"input has {x.shape[3]} channels, kernel expects {ci}")
    if b is not None and b.shape != (1, 1, 1, co):
        raise ShapeMismatchError(node.name, f"bias must have {co} channels, got shape {public_shape(b)}")
    xp = _pad_hw(x, pad)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeMismatchError(node.name, f"padded input {public_shape(xp)} smaller than kernel {kh}x{kw}")
    if kh == 1 and kw == 1:
        # a 1x1 conv is a plain channel matmul; no im2col gather needed
        if stride > 1:
            xp = np.ascontiguousarray(xp[:, ::stride, ::stride])
        ho, wo = xp.shape[1], xp.shape[2]
        cols = xp.reshape(-1, ci)
    else:
        cols, ho, wo = _im2col(xp, kh, kw, stride)
    w_mat = w.transpose(1, 2, 3, 0).reshape(kh * kw * ci, co)
    out = cols @ w_mat
    if b is not None:
        out += b.reshape(1, co)
    return out.reshape(x.shape[0], ho, wo, co), (cols, w_mat)


def conv2d_bwd(node, xs, out, cache, go):
    x, w = xs[0], xs[1]
    has_bias = len(xs) > 2
    cols, w_mat = cache
    stride, pad = node.params["stride"], node.params["pad"]
    co, kh, kw, ci = w.shape
    n, ho, wo, _ = go.shape
    go_m = go.reshape(n * ho * wo, co)

    gw = None
    if node.needs_grad(1):
        gw = (cols.T @ go_m).reshape(kh, kw, ci, co).transpose(3, 0, 1, 2)
    gb = None
    if has_bias and node.needs_grad(2):
        gb = _f32(go_m.sum(axis=0, dtype=np.float64)).reshape(1, 1, 1, co)
    gx = None
    if node.needs_grad(0):
        if kh == 1 and kw == 1 and stride == 1 and pad == 0:
            gx = (go_m @ w_mat.T).reshape(x.shape)
        elif stride == 1 and kh == kw and pad <= kh - 1:
            # input gradient as a correlation of go with the flipped kernel:
            # one gemm on an im2col of go instead of a scatter-add over offsets
            w_flip = w[:, ::-1, ::-1, :].transpose(1, 2, 0, 3).reshape(kh * kw * co, ci)
            gop = _pad_hw(go, kh - 1 - pad) if kh - 1 - pad else go
            gcols, gh, gww = _im2col(gop, kh, kw, 1)
            gx = (gcols @ w_flip).reshape(n, gh, gww, ci)
        else:
            gcols = (go_m @ w_mat.T).reshape(n, ho, wo, kh, kw, ci)
            hp, wp = x.shape[1] + 2 * pad, x.shape[2] + 2 * pad
            gxp = np.zeros((n, hp, wp, ci), dtype=np.float32)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += gcols[:, :, :, i, j]
            gx = gxp[:, pad:hp - pad, pad:wp - pad] if pad else gxp
    grads = [gx, gw]
    if has_bias:
        grads.append(gb)
    return grads


_register("conv2d", conv2d_fwd, conv2d_bwd)


# ---------------------------------------------------------------------------
# batchnorm2d
#
# The node carries a BatchNormState with the train/eval flag and running
# statistics; train mode normalizes with batch statistics and updates the
# running buffers in place (the state is owned by a single model instance).

class BatchNormState:
    __slots__ = ("running_mean", "running_var", "training")

    def __init__(self, channels):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.training = True


def batchnorm2d_fwd(node, xs):
    x, gamma, beta = xs
    c = x.shape[3]
    if gamma.shape != (1, 1, 1, c) or beta.shape != (1, 1, 1, c):
        raise ShapeMismatchError(node.name, f"scale/shift must carry {c} channels")
    state = node.params["state"]
    eps = node.params["eps"]
    if state.training:
        # two-pass statistics; numpy's pairwise float32 summation is accurate
        # enough here and keeps the hot path single-precision
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mu = x.mean(axis=(0, 1, 2))
        centered = x - mu
        var = np.square(centered).mean(axis=(0, 1, 2))
        inv_std = _f32(1.0 / np.sqrt(var.astype(np.float64) + eps))
        xhat = centered * inv_std
        mom = node.params["momentum"]
        var_unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean = _f32((1.0 - mom) * state.running_mean + mom * mu)
        state.running_var = _f32((1.0 - mom) * state.running_var + mom * var_unbiased)
    else:
        inv_std = _f32(1.0 / np.sqrt(state.running_var.astype(np.float64) + eps))
        xhat = (x - state.running_mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, state.training)


def batchnorm2d_bwd(node, xs, out, cache, go):
    x, gamma, _ = xs
    xhat, inv_std, was_training = cache
    sum_axes = (0, 1, 2)
    dgamma = (go * xhat).sum(axis=sum_axes).reshape(gamma.shape)
    dbeta = go.sum(axis=sum_axes).reshape(gamma.shape)
    gx = None
    if node.needs_grad(0):
        if was_training:
            m = x.shape[0] * x.shape[1] * x.shape[2]
            gx = (gamma * inv_std / m) * (m * go - xhat * dgamma - dbeta)
        else:
            gx = go * gamma * inv_std
    return [gx,
            dgamma if node.needs_grad(1) else None,
            dbeta if node.needs_grad(2) else None]


_register("batchnorm2d", batchnorm2d_fwd, batchnorm2d_bwd)


# ---------------------------------------------------------------------------
# pointwise

def relu_fwd(node, xs):
    return np.maximum(xs[0], 0.0), None


def relu_bwd(node, xs, out, cache, go):
    return [go * (xs[0] > 0)]


_register("relu", relu_fwd, relu_bwd)


def sigmoid_fwd(node, xs):
    x = xs[0]
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _f32(out), None


def sigmoid_bwd(node, xs, out, cache, go):
    return [go * out * (1.0 - out)]


_register("sigmoid", sigmoid_fwd, sigmoid_bwd)


# ---------------------------------------------------------------------------
# broadcast binary ops (broadcast only over size-1 axes)

def _check_broadcast(node, a, b):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatchError(
                node.name, f"cannot broadcast {public_shape(a)} with {public_shape(b)}")


def _unbroadcast(g, shape):
    axes = tuple(i for i, (dg, ds) in enumerate(zip(g.shape, shape)) if ds == 1 and dg != 1)
    if axes:
        g = _f32(g.sum(axis=axes, keepdims=True, dtype=np.float64))
    return g


def add_fwd(node, xs):
    _check_broadcast(node, xs[0], xs[1])
    return xs[0] + xs[1], None


def add_bwd(node, xs, out, cache, go):
    return [_unbroadcast(go, xs[0].shape) if node.needs_grad(0) else None,
            _unbroadcast(go, xs[1].shape) if node.needs_grad(1) else None]


_register("add", add_fwd, add_bwd)


def mul_fwd(node, xs):
    _check_broadcast(node, xs[0], xs[1])
    return xs[0] * xs[1], None


def mul_bwd(node, xs, out, cache, go):
    a, b = xs
    return [_unbroadcast(go * b, a.shape) if node.needs_grad(0) else None,
            _unbroadcast(go * a, b.shape) if node.needs_grad(1) else None]


_register("mul", mul_fwd, mul_bwd)


# ---------------------------------------------------------------------------
# concat (channel axis)

def concat_fwd(node, xs):
    ref = xs[0]
    for a in xs[1:]:
        if a.shape[:3] != ref.shape[:3]:
            raise ShapeMismatchError(node.name, f"concat inputs differ outside channel axis: "
                                                f"{public_shape(ref)} vs {public_shape(a)}")
    return np.concatenate(xs, axis=3), None


def concat_bwd(node, xs, out, cache, go):
    grads, off = [], 0
    for i, a in enumerate(xs):
        c = a.shape[3]
        grads.append(np.ascontiguousarray(go[..., off:off + c]) if node.needs_grad(i) else None)
        off += c
    return grads


_register("concat", concat_fwd, concat_bwd)


# ---------------------------------------------------------------------------
# pooling / resampling

def maxpool_fwd(node, xs):
    x = xs[0]
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(node.name, f"maxpool 2x2 needs even H,W, got {h}x{w}")
    xr = x.reshape(n, h // 2, 2, w // 2, 2, c)
    return xr.max(axis=(2, 4)), None


def maxpool_bwd(node, xs, out, cache, go):
    # ties split the gradient evenly, matching central differences exactly
    x = xs[0]
    n, h, w, c = x.shape
    xr = x.reshape(n, h // 2, 2, w // 2, 2, c)
    mask = xr == out[:, :, None, :, None]
    cnt = mask.sum(axis=(2, 4), dtype=np.float32)[:, :, None, :, None]
    g = mask * (go[:, :, None, :, None] / cnt)
    return [g.reshape(n, h, w, c)]


_register("maxpool", maxpool_fwd, maxpool_bwd)


def upsample_fwd(node, xs):
    return xs[0].repeat(2, axis=1).repeat(2, axis=2), None


def upsample_bwd(node, xs, out, cache, go):
    n, h, w, c = xs[0].shape
    return [_f32(go.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4), dtype=np.float64))]


_register("upsample-nearest", upsample_fwd, upsample_bwd)


_RESIZE_MATS = {}


def _resize_matrix(size_in, size_out):
    """Half-pixel-centered linear interpolation as a (out, in) matrix."""
    key = (size_in, size_out)
    mat = _RESIZE_MATS.get(key)
    if mat is None:
        mat = np.zeros((size_out, size_in), dtype=np.float32)
        scale = size_in / size_out
        for d in range(size_out):
            src = (d + 0.5) * scale - 0.5
            src = min(max(src, 0.0), size_in - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, size_in - 1)
            t = src - i0
            mat[d, i0] += 1.0 - t
            mat[d, i1] += t
        _RESIZE_MATS[key] = mat
    return mat


def _resize_apply(x, rh, rw):
    n, h, w, c = x.shape
    th, tw = rh.shape[0], rw.shape[0]
    z = (rh @ x.reshape(n, h, w * c)).reshape(n * th, w, c)
    out = rw @ z
    return np.ascontiguousarray(out.reshape(n, th, tw, c))


def resize_fwd(node, xs):
    x = xs[0]
    th, tw = node.params["target"]
    rh = _resize_matrix(x.shape[1], th)
    rw = _resize_matrix(x.shape[2], tw)
    return _resize_apply(x, rh, rw), (rh, rw)


def resize_bwd(node, xs, out, cache, go):
    rh, rw = cache
    return [_resize_apply(go, rh.T, rw.T)]


_register("resize-bilinear", resize_fwd, resize_bwd)


def gmp_fwd(node, xs):
    return _f32(xs[0].mean(axis=(1, 2), keepdims=True, dtype=np.float64)), None


def gmp_bwd(node, xs, out, cache, go):
    _, h, w, _ = xs[0].shape
    return [np.broadcast_to(go / (h * w), xs[0].shape)]


_register("global-mean-pool", gmp_fwd, gmp_bwd)


# ---------------------------------------------------------------------------
# axis reductions (keepdims so rank 4 is preserved; axes given in public
# NCHW coordinates and remapped to the internal layout)

def _norm_axes(node):
    ax = node.params["axis"]
    if ax is None:
        return (0, 1, 2, 3)
    if not isinstance(ax, tuple):
        ax = (ax,)
    return tuple(AXIS_MAP[a] for a in ax)


def mean_fwd(node, xs):
    return _f32(xs[0].mean(axis=_norm_axes(node), keepdims=True, dtype=np.float64)), None


def mean_bwd(node, xs, out, cache, go):
    x = xs[0]
    count = 1
    for ax in _norm_axes(node):
        count *= x.shape[ax]
    return [np.broadcast_to(go / count, x.shape)]


_register("mean", mean_fwd, mean_bwd)


def sum_fwd(node, xs):
    return _f32(xs[0].sum(axis=_norm_axes(node), keepdims=True, dtype=np.float64)), None


def sum_bwd(node, xs, out, cache, go):
    return [np.broadcast_to(go, xs[0].shape)]


_register("sum", sum_fwd, sum_bwd)


def amax_fwd(node, xs):
    return xs[0].max(axis=_norm_axes(node), keepdims=True), None


def amax_bwd(node, xs, out, cache, go):
    # subgradient: split evenly among tied maxima (matches central differences
    # at exact ties, which perturb every tied element symmetrically)
    x = xs[0]
    mask = x == out
    cnt = mask.sum(axis=_norm_axes(node), keepdims=True, dtype=np.float32)
    return [mask * (go / cnt)]


_register("amax", amax_fwd, amax_bwd)


# ---------------------------------------------------------------------------
# batch-axis stacking (lets one shared-weight encoder pass run all three
# slices of a triplet as a single batch)

def stack_batch_fwd(node, xs):
    ref = xs[0]
    for a in xs[1:]:
        if a.shape != ref.shape:
            raise ShapeMismatchError(node.name, f"stack-batch inputs differ: "
                                                f"{public_shape(ref)} vs {public_shape(a)}")
    return np.concatenate(xs, axis=0), None


def stack_batch_bwd(node, xs, out, cache, go):
    n = xs[0].shape[0]
    return [go[i * n:(i + 1) * n] if node.needs_grad(i) else None
            for i in range(len(xs))]


_register("stack-batch", stack_batch_fwd, stack_batch_bwd)


def slice_batch_fwd(node, xs):
    x = xs[0]
    parts = node.params["parts"]
    if x.shape[0] % parts:
        raise ShapeMismatchError(node.name, f"batch {x.shape[0]} not divisible into {parts} parts")
    n = x.shape[0] // parts
    i = node.params["index"]
    return x[i * n:(i + 1) * n], None


def slice_batch_bwd(node, xs, out, cache, go):
    x = xs[0]
    g = np.zeros_like(x)
    n = x.shape[0] // node.params["parts"]
    i = node.params["index"]
    g[i * n:(i + 1) * n] = go
    return [g]


_register("slice-batch", slice_batch_fwd, slice_batch_bwd)


# ---------------------------------------------------------------------------
# fully connected (operates on (N, C, 1, 1) descriptors, internally (N,1,1,C))

def fc_fwd(node, xs):
    x, w, b = xs
    n, h, wd, c = x.shape
    if h != 1 or wd != 1:
        raise ShapeMismatchError(node.name, f"fully-connected expects (N,C,1,1), got {public_shape(x)}")
    co, ci = w.shape[0], w.shape[3]
    if w.shape[1:3] != (1, 1) or ci != c:
        raise ShapeMismatchError(node.name, f"weight shape {public_shape(w)} incompatible with input {public_shape(x)}")
    if b.shape != (1, 1, 1, co):
        raise ShapeMismatchError(node.name, f"bias must carry {co} channels")
    out = x.reshape(n, c) @ w.reshape(co, ci).T + b.reshape(1, co)
    return out.reshape(n, 1, 1, co), None


def fc_bwd(node, xs, out, cache, go):
    x, w, _ = xs
    n, c = x.shape[0], x.shape[3]
    co = w.shape[0]
    go_m = go.reshape(n, co)
    gx = (go_m @ w.reshape(co, c)).reshape(x.shape) if node.needs_grad(0) else None
    gw = (go_m.T @ x.reshape(n, c)).reshape(w.shape) if node.needs_grad(1) else None
    gb = _f32(go_m.sum(axis=0, dtype=np.float64)).reshape(1, 1, 1, co) if node.needs_grad(2) else None
    return [gx, gw, gb]


_register("fully-connected", fc_fwd, fc_bwd)


# ---------------------------------------------------------------------------
# loss heads (fused scalar primitives; targets never receive gradients)

BCE_EPS = 1e-7


def bce_fwd(node, xs):
    pred, target = xs
    if pred.shape != target.shape:
        raise ShapeMismatchError(node.name, f"pred {public_shape(pred)} vs target {public_shape(target)}")
    p = np.clip(pred.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = target.astype(np.float64)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    return np.full((1, 1, 1, 1), loss, dtype=np.float32), p


def bce_bwd(node, xs, out, p, go):
    if not node.needs_grad(0):
        return [None, None]
    t = xs[1].astype(np.float64)
    inside = (xs[0] > BCE_EPS) & (xs[0] < 1.0 - BCE_EPS)
    g = (p - t) / (p * (1.0 - p)) / p.size
    g = np.where(inside, g, 0.0)
    return [_f32(g * float(go.reshape(()))), None]


_register("bce-loss", bce_fwd, bce_bwd)


def dice_fwd(node, xs):
    pred, target = xs
    if pred.shape != target.shape:
        raise ShapeMismatchError(node.name, f"pred {public_shape(pred)} vs target {public_shape(target)}")
    s = node.params["smooth"]
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + s
    loss = 1.0 - (2.0 * inter + s) / denom
    return np.full((1, 1, 1, 1), loss, dtype=np.float32), (inter, denom, t)


def dice_bwd(node, xs, out, cache, go):
    if not node.needs_grad(0):
        return [None, None]
    inter, denom, t = cache
    s = node.params["smooth"]
    g = -(2.0 * t * denom - (2.0 * inter + s)) / (denom * denom)
    return [_f32(g * float(go.reshape(()))), None]


_register("dice-loss", dice_fwd, dice_bwd)
