"""Encoder / adjacent-slice-fusion / decoder / multi-scale-fusion network.

The architecture is built as a static graph over named parameter leaves:
one shared residual encoder runs over the previous, target and next tile,
the deepest features are fused by attention-derived weight maps that
multiply the target features, and a skip-connected decoder emits per-scale
heads, an optional fused final head, and an optional independent edge
decoder. Fusion variants:

    F0  target features pass through untouched (neighbors ignored)
    F1  gates are plain 1x1 convs on concat(neighbor, target), no attention
    F2  gates are CBAM + 1x1 conv on the neighbor alone
    F3  gates are CBAM + 1x1 conv on concat(neighbor, target)   (full model)

Graphs are cached per tile shape; parameters and BatchNorm running
statistics are shared across shapes, so one model serves training and any
compatible inference size.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UsageError

ASF_VARIANTS = ("F0", "F1", "F2", "F3")
RESNET34_BLOCKS = (3, 4, 6, 3)
NUM_SCALE_HEADS = 3


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    encoder_depth: int = 4
    asf_variant: str = "F3"
    msf_enabled: bool = True
    edge_branch_enabled: bool = True
    ms_outputs_enabled: bool = True
    attention_reduction: int = 8
    seed: int = 0

    def validate(self):
        if self.base_channels < 1:
            raise ConfigError("network.base_channels", f"must be >= 1, got {self.base_channels}")
        if not 1 <= self.encoder_depth <= len(RESNET34_BLOCKS):
            raise ConfigError("network.encoder_depth", f"must be in 1..{len(RESNET34_BLOCKS)}, got {self.encoder_depth}")
        if self.asf_variant not in ASF_VARIANTS:
            raise ConfigError("network.asf_variant", f"must be one of {ASF_VARIANTS}, got '{self.asf_variant}'")
        if self.ms_outputs_enabled and self.encoder_depth < NUM_SCALE_HEADS:
            raise ConfigError("network.encoder_depth",
                              f"multi-scale outputs need depth >= {NUM_SCALE_HEADS}")
        if self.attention_reduction < 1:
            raise ConfigError("network.attention_reduction", "must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class OutputNodes:
    final: ad.GraphNode
    scales: list
    edge: "ad.GraphNode | None"

    def all_nodes(self):
        nodes = [self.final] + list(self.scales)
        if self.edge is not None:
            nodes.append(self.edge)
        return nodes


@dataclass
class NetworkOutputs:
    final: np.ndarray
    scales: list
    edge: "np.ndarray | None"


@dataclass
class NetGraph:
    outputs: OutputNodes
    input_keys: tuple
    probes: dict = field(default_factory=dict)


class ParamRegistry:
    """Records parameter specs in creation order and materializes them once."""

    def __init__(self):
        self.specs = {}      # name -> (shape, init kind, fan_in)
        self.order = []

    def _declare(self, name, shape, init, fan_in=None):
        if name in self.specs:
            prev = self.specs[name]
            if prev[0] != shape:
                raise UsageError(f"parameter '{name}' redeclared with shape {shape}, was {prev[0]}")
        else:
            self.specs[name] = (shape, init, fan_in)
            self.order.append(name)
        return ad.leaf(name, shape=shape, requires_grad=True)

    def conv_weight(self, name, c_out, c_in, k):
        return self._declare(name, (c_out, c_in, k, k), "kaiming", c_in * k * k)

    def fc_weight(self, name, c_out, c_in):
        return self._declare(name, (c_out, c_in, 1, 1), "kaiming", c_in)

    def bias(self, name, c):
        return self._declare(name, (1, c, 1, 1), "zeros")

    def bn_scale(self, name, c):
        return self._declare(name, (1, c, 1, 1), "ones")

    def bn_shift(self, name, c):
        return self._declare(name, (1, c, 1, 1), "zeros")

    def init_params(self, seed):
        """Kaiming-uniform conv/fc weights, zero biases, unit BN scales."""
        rng = np.random.default_rng(seed)
        params = {}
        for name in self.order:
            shape, init, fan_in = self.specs[name]
            if init == "kaiming":
                bound = np.sqrt(6.0 / fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            elif init == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = ad.Tensor(arr.astype(np.float32), requires_grad=True)
        return params


class _Builder:
    """Layer-level helpers over a ParamRegistry plus shared BN states."""

    def __init__(self, reg, bn_states, bn_pending):
        self.reg = reg
        self.bn_states = bn_states
        self.bn_pending = bn_pending

    def conv(self, name, x, c_in, c_out, k, stride=1, pad=None, bias=True):
        pad = (k // 2) if pad is None else pad
        w = self.reg.conv_weight(f"{name}/w", c_out, c_in, k)
        b = self.reg.bias(f"{name}/b", c_out) if bias else None
        return ad.conv2d(x, w, b, stride=stride, pad=pad, name=name)

    def bn(self, name, x, c):
        state = self.bn_states.get(name)
        if state is None:
            state = ad.BatchNormState(c)
            pend = self.bn_pending.pop(name, None)
            if pend is not None:
                state.running_mean, state.running_var = pend
            self.bn_states[name] = state
        return ad.batchnorm2d(x, self.reg.bn_scale(f"{name}/gamma", c),
                              self.reg.bn_shift(f"{name}/beta", c), state, name=name)

    def conv_bn_relu(self, name, x, c_in, c_out, k=3, stride=1):
        x = self.conv(f"{name}/conv", x, c_in, c_out, k, stride=stride, bias=False)
        x = self.bn(f"{name}/bn", x, c_out)
        return ad.relu(x)

    def fc(self, name, x, c_in, c_out):
        w = self.reg.fc_weight(f"{name}/w", c_out, c_in)
        b = self.reg.bias(f"{name}/b", c_out)
        return ad.fully_connected(x, w, b, name=name)

    def res_block(self, name, x, c_in, c_out, stride):
        y = self.conv(f"{name}/conv1", x, c_in, c_out, 3, stride=stride, bias=False)
        y = ad.relu(self.bn(f"{name}/bn1", y, c_out))
        y = self.conv(f"{name}/conv2", y, c_out, c_out, 3, bias=False)
        y = self.bn(f"{name}/bn2", y, c_out)
        if stride != 1 or c_in != c_out:
            skip = self.conv(f"{name}/proj", x, c_in, c_out, 1, stride=stride, pad=0, bias=False)
            skip = self.bn(f"{name}/proj_bn", skip, c_out)
        else:
            skip = x
        return ad.relu(ad.add(y, skip), name=name)


# ---------------------------------------------------------------------------
# blocks

def encode(b, cfg, x, prefix="encoder"):
    """Shared residual encoder: stem plus `encoder_depth` stride-2 stages.

    Stage s carries base_channels * 2**s channels at 1/2**(s+1) resolution;
    block counts follow the 3/4/6/3 topology. Returns (stem, [stages]).
    """
    base = cfg.base_channels
    stem = b.conv_bn_relu(f"{prefix}/stem", x, 1, base)
    feats = []
    c_in = base
    y = stem
    for s in range(cfg.encoder_depth):
        c_out = base * 2 ** s
        for j in range(RESNET34_BLOCKS[s]):
            y = b.res_block(f"{prefix}/stage{s}/block{j}", y, c_in, c_out, stride=2 if j == 0 else 1)
            c_in = c_out
        feats.append(y)
    return stem, feats


def cbam(b, name, x, c, reduction):
    """Channel attention (shared MLP over mean and max descriptors) followed
    by spatial attention (7x7 conv over channel mean/max maps)."""
    hidden = max(1, c // reduction)

    def mlp(desc):
        h = ad.relu(b.fc(f"{name}/ca/fc1", desc, c, hidden))
        return b.fc(f"{name}/ca/fc2", h, hidden, c)

    ca = ad.sigmoid(ad.add(mlp(ad.global_mean_pool(x)), mlp(ad.amax(x, axis=(2, 3)))))
    x = ad.mul(x, ca)
    stats = ad.concat(ad.mean(x, axis=(1,)), ad.amax(x, axis=(1,)))
    sa = ad.sigmoid(b.conv(f"{name}/sa/conv", stats, 2, 1, 7))
    return ad.mul(x, sa)


def attention_gate(b, name, x_a, x_b, c, reduction):
    """Weight map in (0,1)^(N,C,H,W): concat -> CBAM -> 1x1 conv -> sigmoid."""
    g = cbam(b, name, ad.concat(x_a, x_b), 2 * c, reduction)
    return ad.sigmoid(b.conv(f"{name}/reduce", g, 2 * c, c, 1, pad=0), name=f"{name}/weight")


def asf_fuse(b, x_prev, x_cur, x_next, c, variant, reduction, gate_fn=None, prefix="asf"):
    """Fuse neighbor context into the target features.

    Returns (fused, probes). Both gates share one parameter set (the same
    fusion module applied to either neighbor). `gate_fn(side, a, b)` lets
    tests pin the weight maps.
    """
    if variant not in ASF_VARIANTS:
        raise UsageError(f"unknown fusion variant '{variant}'")
    if variant == "F0":
        return x_cur, {}
    if gate_fn is not None:
        w_prev = gate_fn("prev", x_prev, x_cur)
        w_next = gate_fn("next", x_cur, x_next)
    elif variant == "F1":
        w_prev = b.conv(f"{prefix}/gate", ad.concat(x_prev, x_cur), 2 * c, c, 1, pad=0)
        w_next = b.conv(f"{prefix}/gate", ad.concat(x_cur, x_next), 2 * c, c, 1, pad=0)
    elif variant == "F2":
        w_prev = ad.sigmoid(b.conv(f"{prefix}/gate/reduce", cbam(b, f"{prefix}/gate", x_prev, c, reduction), c, c, 1, pad=0))
        w_next = ad.sigmoid(b.conv(f"{prefix}/gate/reduce", cbam(b, f"{prefix}/gate", x_next, c, reduction), c, c, 1, pad=0))
    else:
        w_prev = attention_gate(b, f"{prefix}/gate", x_prev, x_cur, c, reduction)
        w_next = attention_gate(b, f"{prefix}/gate", x_cur, x_next, c, reduction)
    fused = ad.mul(ad.mul(w_prev, x_cur), w_next, name=f"{prefix}/fused")
    return fused, {"asf/w_prev": w_prev, "asf/w_next": w_next}


def msf_fuse(b, feats, target_hw, c_out, reduction, prefix="msf"):
    """Resize every decoder feature to the finest scale, unify channels,
    concatenate, apply squeeze-and-excitation, and restore c_out through a
    conv stack with a 1x1 residual projection.

    `feats` is a list of (node, channels). Returns (out, probes)."""
    if not feats:
        raise UsageError("msf_fuse needs at least one feature map")
    th, tw = target_hw
    unified = []
    for i, (f, c) in enumerate(feats):
        f = ad.resize_bilinear(f, th, tw, name=f"{prefix}/resize{i}")
        unified.append(b.conv_bn_relu(f"{prefix}/in{i}", f, c, c_out, k=1))
    cat = unified[0] if len(unified) == 1 else ad.concat(*unified, name=f"{prefix}/concat")
    c_cat = c_out * len(unified)

    hidden = max(1, c_cat // reduction)
    se = ad.relu(b.fc(f"{prefix}/se/fc1", ad.global_mean_pool(cat), c_cat, hidden))
    se = ad.sigmoid(b.fc(f"{prefix}/se/fc2", se, hidden, c_cat))
    gated = ad.mul(cat, se, name=f"{prefix}/gated")

    y = b.conv_bn_relu(f"{prefix}/conv1", gated, c_cat, c_out)
    y = b.conv(f"{prefix}/conv2", y, c_out, c_out, 3, bias=False)
    y = b.bn(f"{prefix}/bn2", y, c_out)
    residual = b.conv(f"{prefix}/proj", gated, c_cat, c_out, 1, pad=0)
    out = ad.relu(ad.add(y, residual), name=prefix)
    probes = {"msf/concat": cat, "msf/gated": gated, "msf/conv_path": y, "msf/residual": residual}
    return out, probes


def head(b, name, x, c):
    return ad.sigmoid(b.conv(name, x, c, 1, 1, pad=0), name=f"{name}/prob")


# ---------------------------------------------------------------------------

def build_graph(cfg, reg, bn_states, tile_hw, bn_pending=None, gate_fn=None):
    """Wire the full forward graph for one tile shape.

    Input leaves are input/prev, input/cur, input/next (F0 builds only the
    target path, which is what makes it structurally neighbor-invariant).
    """
    h, w = tile_hw
    stride_total = 2 ** cfg.encoder_depth
    if h % stride_total or w % stride_total:
        raise UsageError(f"tile shape {tile_hw} not divisible by 2^depth = {stride_total}")
    b = _Builder(reg, bn_states, bn_pending if bn_pending is not None else {})
    base = cfg.base_channels
    red = cfg.attention_reduction

    cur = ad.leaf("input/cur")
    c_deep = base * 2 ** (cfg.encoder_depth - 1)

    if cfg.asf_variant == "F0":
        stem, feats = encode(b, cfg, cur)
        fused, probes = asf_fuse(b, None, feats[-1], None, c_deep, "F0", red)
        input_keys = ("input/cur",)
    else:
        # one shared-weight encoder pass over the stacked (prev, cur, next)
        # batch; the target pyramid is the middle third
        prev = ad.leaf("input/prev")
        nxt = ad.leaf("input/next")
        stem_all, feats_all = encode(b, cfg, ad.stack_batch(prev, cur, nxt))
        stem = ad.slice_batch(stem_all, 1, 3)
        feats = [ad.slice_batch(f, 1, 3) for f in feats_all[:-1]]
        deep = [ad.slice_batch(feats_all[-1], i, 3) for i in range(3)]
        feats.append(deep[1])
        fused, probes = asf_fuse(b, deep[0], deep[1], deep[2],
                                 c_deep, cfg.asf_variant, red, gate_fn=gate_fn)
        input_keys = ("input/prev", "input/cur", "input/next")
    probes["fused"] = fused

    # main decoder with skips from the target pyramid (stem is the finest skip)
    skips = list(reversed(feats[:-1])) + [stem]
    skip_ch = [base * 2 ** s for s in reversed(range(cfg.encoder_depth - 1))] + [base]
    dec_ch = skip_ch[:-1] + [base]
    decoder = []
    y, c_in = fused, c_deep
    for k, (skip, c_skip, c_out) in enumerate(zip(skips, skip_ch, dec_ch)):
        y = ad.upsample_nearest(y, name=f"decoder/stage{k}/up")
        y = ad.concat(y, skip, name=f"decoder/stage{k}/cat")
        y = b.conv_bn_relu(f"decoder/stage{k}/conv1", y, c_in + c_skip, c_out)
        y = b.conv_bn_relu(f"decoder/stage{k}/conv2", y, c_out, c_out)
        decoder.append((y, c_out))
        c_in = c_out

    scales = []
    if cfg.ms_outputs_enabled:
        # head i sits at 1/2**i of tile resolution
        for i in range(NUM_SCALE_HEADS):
            f, c = decoder[-(i + 1)]
            scales.append(head(b, f"head/scale{i}", f, c))

    if cfg.msf_enabled:
        fused_ms, msf_probes = msf_fuse(b, decoder, (h, w), dec_ch[-1], red)
        probes.update(msf_probes)
        final = head(b, "head/final", fused_ms, dec_ch[-1])
    else:
        final = head(b, "head/final", decoder[-1][0], decoder[-1][1])

    edge = None
    if cfg.edge_branch_enabled:
        e = b.conv_bn_relu("edge/in", fused, c_deep, base, k=1)
        for k in range(cfg.encoder_depth):
            e = ad.upsample_nearest(e, name=f"edge/up{k}")
            e = b.conv_bn_relu(f"edge/up{k}/conv", e, base, base)
        edge = head(b, "head/edge", e, base)

    return NetGraph(outputs=OutputNodes(final=final, scales=scales, edge=edge),
                    input_keys=input_keys, probes=probes)


class Network:
    """A model instance: config, parameters, BN statistics, cached graphs."""

    def __init__(self, cfg, params=None, buffers=None):
        self.cfg = cfg.validate()
        self.registry = ParamRegistry()
        self.bn_states = {}
        self._bn_pending = dict(buffers_to_pending(buffers)) if buffers else {}
        self._graphs = {}
        self._params = params

    def graph(self, tile_hw):
        g = self._graphs.get(tile_hw)
        if g is None:
            g = build_graph(self.cfg, self.registry, self.bn_states, tile_hw,
                            bn_pending=self._bn_pending)
            self._graphs[tile_hw] = g
        return g

    @property
    def params(self):
        if self._params is None:
            if not self.registry.specs:
                self.graph((2 ** self.cfg.encoder_depth,) * 2)  # smallest legal tile
            self._params = self.registry.init_params(self.cfg.seed)
        return self._params

    @params.setter
    def params(self, new_params):
        self._params = new_params

    def param_count(self):
        return sum(int(np.prod(s)) for s, _, _ in
                   (self.registry.specs[n] for n in self.registry.order))

    def set_training(self, flag):
        for state in self.bn_states.values():
            state.training = bool(flag)

    def export_buffers(self):
        out = {}
        for name, st in sorted(self.bn_states.items()):
            out[f"{name}/running_mean"] = st.running_mean.copy()
            out[f"{name}/running_var"] = st.running_var.copy()
        return out

    def forward(self, prev, cur, nxt, train=False):
        """Run the network on aligned tile batches (arrays or Tensors)."""
        cur4 = ad.as_array4d(cur, "cur")
        g = self.graph(cur4.shape[2:])
        self.set_training(train)
        bindings = dict(self.params)
        bindings["input/cur"] = cur4
        if "input/prev" in g.input_keys:
            bindings["input/prev"] = ad.as_array4d(prev, "prev")
            bindings["input/next"] = ad.as_array4d(nxt, "next")
        nodes = g.outputs.all_nodes()
        vals = ad.evaluate_multi(nodes, bindings)
        arrays = [v.numpy() for v in vals]
        n_scales = len(g.outputs.scales)
        return NetworkOutputs(
            final=arrays[0],
            scales=arrays[1:1 + n_scales],
            edge=arrays[1 + n_scales] if g.outputs.edge is not None else None,
        )


def buffers_to_pending(buffers):
    """Regroup flat {"<bn>/running_mean": arr, ...} into per-layer pairs."""
    pending = {}
    for key, arr in (buffers or {}).items():
        if key.endswith("/running_mean"):
            pending.setdefault(key[:-len("/running_mean")], [None, None])[0] = arr.copy()
        elif key.endswith("/running_var"):
            pending.setdefault(key[:-len("/running_var")], [None, None])[1] = arr.copy()
    return {k: (m, v) for k, (m, v) in pending.items() if m is not None and v is not None}
