"""Fire modules, SqueezeNet baselines and the spatial-fusion network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import (
    Add, BatchNorm2d, Concat, Conv2d, ConvTranspose2d, Dense, ELU, Flatten,
    GlobalAvgPool, Layer, MaxPool2d, Node, Param, ReLU,
)
from .ops import ShapeError

VARIANTS = ("squeezenet_plain", "squeezenet_simple_bypass", "proposed")
NUM_CLASSES = 2
REFERENCE_INPUT = (3, 224, 224)

# (name, squeeze, expand1x1, expand3x3); a max pool follows conv1, fire4 and fire8
FIRE_SCHEDULE = (
    ("fire2", 16, 64, 64),
    ("fire3", 16, 64, 64),
    ("fire4", 32, 128, 128),
    ("fire5", 32, 128, 128),
    ("fire6", 48, 192, 192),
    ("fire7", 48, 192, 192),
    ("fire8", 64, 256, 256),
    ("fire9", 64, 256, 256),
)
POOL_AFTER = ("fire4", "fire8")
BYPASSED = ("fire3", "fire5", "fire7", "fire9")
UPSAMPLE_CHANNELS = 64
FUSION_FILTERS = 128


@dataclass(frozen=True)
class FireConfig:
    squeeze: int
    expand1x1: int
    expand3x3: int
    variant: str = "classic"

    def __post_init__(self):
        if min(self.squeeze, self.expand1x1, self.expand3x3) < 1:
            raise ValueError(f"fire filter counts must be positive: {self}")
        if self.variant not in ("classic", "custom"):
            raise ValueError(f"fire variant must be 'classic' or 'custom', got {self.variant!r}")

    @property
    def out_channels(self):
        return self.expand1x1 + self.expand3x3


@dataclass(frozen=True)
class ArchVariant:
    name: str = "proposed"
    fire_variant: str = "custom"
    input_shape: tuple = REFERENCE_INPUT

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValueError(f"unknown architecture {self.name!r}; expected one of {VARIANTS}")
        if self.fire_variant not in ("classic", "custom"):
            raise ValueError(f"fire variant must be 'classic' or 'custom', got {self.fire_variant!r}")
        if self.name == "proposed" and self.fire_variant != "custom":
            raise ValueError("the proposed network uses custom fire modules only")


class Network:
    """Directed acyclic graph of layers evaluated in insertion (topological) order.

    The graph input is named ``"input"``. Parameters are addressed as
    ``"<node>.<param>"``, e.g. ``"fire2.bn.gamma"``.
    """

    def __init__(self, input_shape, variant="proposed", num_classes=NUM_CLASSES, fire_variant="custom"):
        self.input_shape = tuple(input_shape)
        self.variant = variant
        self.fire_variant = fire_variant
        self.num_classes = num_classes
        self.nodes: list[Node] = []
        self._names = {"input"}

    @property
    def output(self):
        return self.nodes[-1].name if self.nodes else "input"

    def add(self, name, layer: Layer, inputs, **meta):
        if isinstance(inputs, str):
            inputs = (inputs,)
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        for i in inputs:
            if i not in self._names:
                raise ValueError(f"node {name!r} consumes unknown node {i!r}")
        self.nodes.append(Node(name, layer, tuple(inputs), meta))
        self._names.add(name)
        return name

    def node(self, name) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def parameters(self, trainable_only=False) -> dict[str, Param]:
        out = {}
        for n in self.nodes:
            for pname, p in n.layer.params().items():
                if trainable_only and not p.trainable:
                    continue
                out[f"{n.name}.{pname}"] = p
        return out

    def zero_grad(self):
        for p in self.parameters(trainable_only=True).values():
            p.zero_grad()

    def _check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"node 'input': expected (N, C, H, W), got shape {x.shape}")
        for got, want in zip(x.shape[1:], self.input_shape):
            if want is not None and got != want:
                raise ShapeError(f"node 'input': expected (N, {', '.join(map(str, self.input_shape))}), "
                                 f"got {x.shape}")

    def run(self, x, training=False, capture=(), record=False):
        """Evaluate the graph.

        Returns ``(output, captured, tape)``: ``captured`` maps each requested node
        name to its activation and ``tape`` holds per-node caches when ``record``.
        """
        self._check_input(x)
        last_use = {}
        for i, n in enumerate(self.nodes):
            for src in n.inputs:
                last_use[src] = i
        keep = set(capture) | {self.output}
        values = {"input": x}
        captured = {"input": x} if "input" in keep else {}
        tape = [] if record else None
        for i, n in enumerate(self.nodes):
            xs = [values[s] for s in n.inputs]
            try:
                y, cache = n.layer.forward(xs, training)
            except ShapeError as e:
                raise ShapeError(f"node {n.name!r}: {e}") from None
            values[n.name] = y
            if n.name in keep:
                captured[n.name] = y
            if record:
                tape.append(cache)
            for s in n.inputs:
                if last_use.get(s) == i and s not in keep:
                    del values[s]
        return values[self.output], captured, tape

    def backward(self, tape, dout, input_grad=False):
        """Back-propagate ``dout`` through a recorded tape; parameter grads accumulate.

        Returns the gradient with respect to the graph input when ``input_grad``.
        """
        grads = {self.output: dout}
        for n, cache in zip(reversed(self.nodes), reversed(tape)):
            dy = grads.pop(n.name, None)
            if dy is None:
                continue
            skip = not input_grad and all(s == "input" for s in n.inputs)
            if skip and isinstance(n.layer, Conv2d):
                n.layer.need_dx = False
            try:
                dxs = n.layer.backward(cache, dy)
            finally:
                if skip and isinstance(n.layer, Conv2d):
                    del n.layer.need_dx
            if skip:
                continue
            for src, dx in zip(n.inputs, dxs):
                grads[src] = dx if src not in grads else grads[src] + dx
        tape.clear()
        return grads.get("input")

    def logits(self, x, training=False):
        return self.run(x, training=training)[0]

    def forward(self, x, mode="infer"):
        """Class probabilities, shape (N, num_classes)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return ops.softmax(self.logits(x, training=(mode == "train")))

    def trace_shapes(self, batch=1):
        """Node-by-node activation shapes for a zero input of the graph's input spec."""
        shape = tuple(s if s is not None else 1 for s in self.input_shape)
        x = np.zeros((batch,) + shape, dtype=np.float32)
        names = [n.name for n in self.nodes]
        _, captured, _ = self.run(x, capture=names)
        return {k: v.shape for k, v in captured.items()}


def count_params(net: Network) -> int:
    """Weights, biases, gammas and betas; batch-norm running statistics are excluded."""
    return int(sum(p.data.size for p in net.parameters(trainable_only=True).values()))


def _activation(variant):
    return ELU() if variant == "custom" else ReLU()


def add_fire(net: Network, name, src, in_channels, cfg: FireConfig, rng):
    """Append a fire module reading from node ``src``; returns the name of its output node."""
    act = cfg.variant
    h = net.add(f"{name}.squeeze", Conv2d(in_channels, cfg.squeeze, 1, rng=rng), src)
    if cfg.variant == "custom":
        h = net.add(f"{name}.bn", BatchNorm2d(cfg.squeeze), h)
    h = net.add(f"{name}.squeeze_act", _activation(act), h)
    e1 = net.add(f"{name}.expand1x1", Conv2d(cfg.squeeze, cfg.expand1x1, 1, rng=rng), h)
    e1 = net.add(f"{name}.expand1x1_act", _activation(act), e1)
    e3 = net.add(f"{name}.expand3x3", Conv2d(cfg.squeeze, cfg.expand3x3, 3, padding=1, rng=rng), h)
    e3 = net.add(f"{name}.expand3x3_act", _activation(act), e3)
    return net.add(name, Concat(), (e1, e3), fire=cfg)


def build_fire(cfg: FireConfig, in_channels, seed=0):
    """A standalone graph holding a single fire module."""
    net = Network((in_channels, None, None), variant="fire", fire_variant=cfg.variant)
    add_fire(net, "fire", "input", in_channels, cfg, np.random.default_rng(seed))
    return net


def _trunk(net, fire_variant, rng, bypass=False, last="fire9"):
    cin = net.input_shape[0]
    h = net.add("conv1", Conv2d(cin, 96, 7, stride=2, padding=3, rng=rng), "input")
    h = net.add("conv1_act", _activation(fire_variant), h)
    h = net.add("pool1", MaxPool2d(3, 2, padding=1), h)
    channels = 96
    outputs = {}
    for name, s, e1, e3 in FIRE_SCHEDULE:
        cfg = FireConfig(s, e1, e3, fire_variant)
        out = add_fire(net, name, h, channels, cfg, rng)
        if bypass and name in BYPASSED:
            if channels != cfg.out_channels:
                raise ShapeError(f"bypass around {name}: {channels} vs {cfg.out_channels} channels")
            out = net.add(f"{name}_bypass", Add(), (h, out))
        outputs[name] = out
        h, channels = out, cfg.out_channels
        if name in POOL_AFTER:
            h = net.add(f"pool_{name}", MaxPool2d(3, 2, padding=1), h)
        if name == last:
            break
    return h, channels, outputs


def _spatial(size):
    """Feature extents after conv1 and each pooling stage."""
    s = ops.conv_out_size(size, 7, 2, 3)
    stages = [ops.conv_out_size(s, 3, 2, 1)]
    for _ in POOL_AFTER:
        stages.append(ops.conv_out_size(stages[-1], 3, 2, 1))
    return stages


def build_squeezenet(v: ArchVariant, seed=0) -> Network:
    if v.name == "proposed":
        raise ValueError("build_squeezenet takes a squeezenet variant; use build_proposed")
    rng = np.random.default_rng(seed)
    net = Network(v.input_shape, variant=v.name, fire_variant=v.fire_variant)
    h, channels, _ = _trunk(net, v.fire_variant, rng, bypass=(v.name == "squeezenet_simple_bypass"))
    net.add("conv10", Conv2d(channels, NUM_CLASSES, 1, rng=rng), h)
    net.add("gap", GlobalAvgPool(), "conv10")
    net.add("logits", Flatten(), "gap")
    return net


def build_proposed(input_shape=REFERENCE_INPUT, seed=0) -> Network:
    """Custom-fire trunk with fire9 upsampled x4 and fused with fire3 before pooling."""
    _, h, w = input_shape
    hs, ws = _spatial(h), _spatial(w)
    if hs[-1] * 4 != hs[0] or ws[-1] * 4 != ws[0]:
        raise ShapeError(f"input {h}x{w}: upsampled fire9 ({hs[-1] * 4}x{ws[-1] * 4}) "
                         f"does not align with fire3 ({hs[0]}x{ws[0]})")
    rng = np.random.default_rng(seed)
    net = Network(input_shape, variant="proposed")
    _, channels, outs = _trunk(net, "custom", rng)
    fire3_channels = FireConfig(*FIRE_SCHEDULE[1][1:]).out_channels
    up = net.add("up", ConvTranspose2d(channels, UPSAMPLE_CHANNELS, 4, stride=4, rng=rng), outs["fire9"])
    cat = net.add("skip_concat", Concat(), (up, outs["fire3"]))
    fused = net.add("fusion", Conv2d(UPSAMPLE_CHANNELS + fire3_channels, FUSION_FILTERS, 1, rng=rng), cat)
    fused = net.add("fusion_act", ELU(), fused)
    feats = net.add("features", Concat(), (fused, up, outs["fire3"]))
    net.add("gap", GlobalAvgPool(), feats)
    net.add("flatten", Flatten(), "gap")
    n_feat = FUSION_FILTERS + UPSAMPLE_CHANNELS + fire3_channels
    net.add("head", Dense(n_feat, NUM_CLASSES, rng=rng), "flatten")
    return net


def build(v: ArchVariant, seed=0) -> Network:
    if v.name == "proposed":
        return build_proposed(v.input_shape, seed)
    return build_squeezenet(v, seed)
