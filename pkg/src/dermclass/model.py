"""Inception-ResNet-v2 style network as an explicit, named layer graph.

The graph is a topologically ordered list of :class:`Layer` nodes. Each node
knows its static output shape, so shape errors surface when the graph is
built rather than when it is run. Parameters live in flat dictionaries keyed
``"<layer>/<param>"`` and are executed with ``torch.nn.functional``.

Branch widths follow the Keras ``InceptionResNetV2`` layout (stem ending in
the 320-channel mixed block, 1088 channels after reduction A, 2080 after
reduction B), which keeps every residual add shape-consistent. The top of
the network is replaced by flatten -> FC(64) -> ReLU -> FC(64) -> ReLU ->
FC(num_classes) -> softmax. All widths scale by ``base_filters / 32``.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import OutOfRange, ShapeMismatch, ShapeUnderflow

PARAMETERIZED = ("convolution", "fully-connected")


@dataclass(frozen=True)
class NetworkConfig:
    input_hw: int = 299
    num_classes: int = 7
    block_counts: tuple[int, int, int] = (10, 20, 10)
    residual_scale: float = 0.1
    head_widths: tuple[int, ...] = (64, 64)
    base_filters: int = 32
    global_pool: bool = False
    dropout: float = 0.0
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if len(self.block_counts) != 3 or min(self.block_counts) < 1:
            raise ValueError(f"block_counts must be three positive ints, got {self.block_counts}")
        if not 0.0 < self.residual_scale <= 1.0:
            raise ValueError("residual_scale must lie in (0, 1]")
        if self.num_classes < 2 or self.base_filters < 1:
            raise ValueError("num_classes must be >= 2 and base_filters >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class Layer:
    name: str
    kind: str
    inputs: tuple[str, ...]
    out_shape: tuple[int, ...]  # (C, H, W) for feature maps, (F,) after flatten
    hyper: dict = field(default_factory=dict)
    params: dict[str, tuple[int, ...]] = field(default_factory=dict)
    buffers: dict[str, tuple[int, ...]] = field(default_factory=dict)
    # parameterized unit this layer belongs to; batch-norm is owned by its convolution
    owner: Optional[str] = None
    stage: str = ""

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.params.values())


class NetworkGraph:
    def __init__(self, config: Optional[NetworkConfig], layers: list[Layer]):
        self.config = config
        self.layers = layers
        self.by_name = {layer.name: layer for layer in layers}
        self.output = layers[-1].name
        self.params: dict[str, torch.Tensor] = {}
        self.buffers: dict[str, torch.Tensor] = {}
        self.trainable_units: set[str] = set(self.parameterized_units())

    # -- structure -----------------------------------------------------------------

    def parameterized_units(self) -> list[str]:
        """Convolution and fully-connected layer names in topological order."""
        return [layer.name for layer in self.layers if layer.kind in PARAMETERIZED]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{l.name}/{p}": s for l in self.layers for p, s in l.params.items()}

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{l.name}/{b}": s for l in self.layers for b, s in l.buffers.items()}

    def is_trainable(self, layer: Layer) -> bool:
        return layer.owner in self.trainable_units

    def trainable_param_names(self) -> list[str]:
        return [
            f"{l.name}/{p}" for l in self.layers if l.params and self.is_trainable(l) for p in l.params
        ]

    def input_shape(self) -> tuple[int, ...]:
        return self.by_name["input"].out_shape

    def num_params(self) -> int:
        return sum(l.param_count for l in self.layers)

    def listing(self) -> str:
        """Plain-text table of every layer: name, kind, output shape, parameters, trainable."""
        rows = [("name", "kind", "output_shape", "params", "trainable")]
        for l in self.layers:
            trainable = "yes" if l.params and self.is_trainable(l) else ("no" if l.params else "-")
            rows.append((l.name, l.kind, "x".join(map(str, l.out_shape)), str(l.param_count), trainable))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.append(f"total parameters: {self.num_params()}")
        return "\n".join(lines) + "\n"

    # -- tensors ---------------------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {**self.params, **self.buffers}

    def clone(self, dtype: Optional[torch.dtype] = None) -> "NetworkGraph":
        other = NetworkGraph(self.config, self.layers)
        other.trainable_units = set(self.trainable_units)
        other.params = {k: v.detach().clone().to(dtype or v.dtype) for k, v in self.params.items()}
        other.buffers = {k: v.detach().clone().to(dtype or v.dtype) for k, v in self.buffers.items()}
        return other


class GraphBuilder:
    """Accumulates layers while tracking static shapes."""

    def __init__(self, input_shape: tuple[int, int, int], bn_eps: float = 1e-3, bn_momentum: float = 0.99):
        self.layers: list[Layer] = [Layer("input", "input", (), tuple(input_shape))]
        self.shapes = {"input": tuple(input_shape)}
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.stage = "stem"

    def _add(self, layer: Layer) -> str:
        if layer.name in self.shapes:
            raise ValueError(f"duplicate layer name {layer.name}")
        layer.stage = self.stage
        self.layers.append(layer)
        self.shapes[layer.name] = layer.out_shape
        return layer.name

    @staticmethod
    def _spatial(n: int, k: int, s: int, padding: str) -> int:
        if padding == "same":
            return -(-n // s)
        return (n - k) // s + 1 if n >= k else 0

    def _window_shape(self, name: str, x: str, kernel, stride, padding):
        c, h, w = self.shapes[x]
        kh, kw = kernel
        oh, ow = self._spatial(h, kh, stride, padding), self._spatial(w, kw, stride, padding)
        if oh < 1 or ow < 1:
            raise ShapeUnderflow(f"{self.stage}:{name}", (c, h, w))
        return oh, ow

    @staticmethod
    def _pads(kernel, padding):
        if padding == "same":
            return (kernel[0] // 2, kernel[1] // 2)
        return (0, 0)

    def conv(self, x, filters, kernel, stride=1, padding="same", name="", bias=False, owner=None):
        kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        oh, ow = self._window_shape(name, x, kernel, stride, padding)
        cin = self.shapes[x][0]
        params = {"kernel": (filters, cin, *kernel)}
        if bias:
            params["bias"] = (filters,)
        hyper = {"kernel": kernel, "stride": stride, "padding": padding, "pads": self._pads(kernel, padding), "filters": filters}
        return self._add(Layer(name, "convolution", (x,), (filters, oh, ow), hyper, params, owner=owner or name))

    def batch_norm(self, x, name, owner):
        c = self.shapes[x][0]
        return self._add(
            Layer(
                name,
                "batch-norm",
                (x,),
                self.shapes[x],
                {"eps": self.bn_eps, "momentum": self.bn_momentum},
                {"gamma": (c,), "beta": (c,)},
                {"moving_mean": (c,), "moving_var": (c,)},
                owner=owner,
            )
        )

    def relu(self, x, name):
        return self._add(Layer(name, "activation", (x,), self.shapes[x], {"fn": "relu"}))

    def conv_bn(self, x, filters, kernel, stride=1, padding="same", name="", activation=True):
        h = self.conv(x, filters, kernel, stride, padding, name=name)
        h = self.batch_norm(h, f"{name}_bn", owner=name)
        return self.relu(h, f"{name}_relu") if activation else h

    def pool(self, x, kind, size, stride, padding, name):
        c = self.shapes[x][0]
        oh, ow = self._window_shape(name, x, (size, size), stride, padding)
        hyper = {"kernel": (size, size), "stride": stride, "padding": padding, "pads": self._pads((size, size), padding)}
        return self._add(Layer(name, kind, (x,), (c, oh, ow), hyper))

    def concat(self, xs: Sequence[str], name):
        shapes = [self.shapes[x] for x in xs]
        if any(s[1:] != shapes[0][1:] for s in shapes):
            raise ShapeMismatch(name, shapes[0], next(s for s in shapes if s[1:] != shapes[0][1:]))
        return self._add(Layer(name, "concat", tuple(xs), (sum(s[0] for s in shapes), *shapes[0][1:])))

    def residual_add(self, shortcut, residual, scale, name):
        if self.shapes[shortcut] != self.shapes[residual]:
            raise ShapeMismatch(name, self.shapes[shortcut], self.shapes[residual])
        return self._add(Layer(name, "residual-add", (shortcut, residual), self.shapes[shortcut], {"scale": scale}))

    def global_avg_pool(self, x, name):
        c = self.shapes[x][0]
        return self._add(Layer(name, "global-average-pool", (x,), (c, 1, 1)))

    def flatten(self, x, name):
        return self._add(Layer(name, "flatten", (x,), (math.prod(self.shapes[x]),)))

    def dropout(self, x, rate, name):
        return self._add(Layer(name, "dropout", (x,), self.shapes[x], {"rate": rate}))

    def dense(self, x, units, name):
        (fin,) = self.shapes[x]
        params = {"kernel": (units, fin), "bias": (units,)}
        return self._add(Layer(name, "fully-connected", (x,), (units,), {"units": units}, params, owner=name))

    def softmax(self, x, name):
        return self._add(Layer(name, "softmax", (x,), self.shapes[x]))

    def build(self, config: Optional[NetworkConfig] = None) -> NetworkGraph:
        return NetworkGraph(config, self.layers)


# -- the architecture ----------------------------------------------------------------


def _stem(b: GraphBuilder, w) -> str:
    x = b.conv_bn("input", w(32), 3, 2, "valid", "stem_conv1")
    x = b.conv_bn(x, w(32), 3, 1, "valid", "stem_conv2")
    x = b.conv_bn(x, w(64), 3, 1, "same", "stem_conv3")
    x = b.pool(x, "max-pool", 3, 2, "valid", "stem_pool1")
    x = b.conv_bn(x, w(80), 1, 1, "valid", "stem_conv4")
    x = b.conv_bn(x, w(192), 3, 1, "valid", "stem_conv5")
    x = b.pool(x, "max-pool", 3, 2, "valid", "stem_pool2")
    # multi-size branches at the same level
    b0 = b.conv_bn(x, w(96), 1, name="stem_mixed_b0_conv")
    b1 = b.conv_bn(x, w(48), 1, name="stem_mixed_b1_conv1")
    b1 = b.conv_bn(b1, w(64), 5, name="stem_mixed_b1_conv2")
    b2 = b.conv_bn(x, w(64), 1, name="stem_mixed_b2_conv1")
    b2 = b.conv_bn(b2, w(96), 3, name="stem_mixed_b2_conv2")
    b2 = b.conv_bn(b2, w(96), 3, name="stem_mixed_b2_conv3")
    b3 = b.pool(x, "average-pool", 3, 1, "same", "stem_mixed_b3_pool")
    b3 = b.conv_bn(b3, w(64), 1, name="stem_mixed_b3_conv")
    return b.concat([b0, b1, b2, b3], "stem_mixed_concat")


def _residual_block(b: GraphBuilder, x: str, branches: list[str], scale: float, name: str) -> str:
    mixed = b.concat(branches, f"{name}_concat")
    up = b.conv(mixed, b.shapes[x][0], 1, name=f"{name}_up", bias=True)
    h = b.residual_add(x, up, scale, f"{name}_add")
    return b.relu(h, f"{name}_relu")


def _block_a(b, x, w, scale, name):
    b0 = b.conv_bn(x, w(32), 1, name=f"{name}_b0_conv")
    b1 = b.conv_bn(x, w(32), 1, name=f"{name}_b1_conv1")
    b1 = b.conv_bn(b1, w(32), 3, name=f"{name}_b1_conv2")
    b2 = b.conv_bn(x, w(32), 1, name=f"{name}_b2_conv1")
    b2 = b.conv_bn(b2, w(48), 3, name=f"{name}_b2_conv2")
    b2 = b.conv_bn(b2, w(64), 3, name=f"{name}_b2_conv3")
    return _residual_block(b, x, [b0, b1, b2], scale, name)


def _block_b(b, x, w, scale, name):
    b0 = b.conv_bn(x, w(192), 1, name=f"{name}_b0_conv")
    b1 = b.conv_bn(x, w(128), 1, name=f"{name}_b1_conv1")
    b1 = b.conv_bn(b1, w(160), (1, 7), name=f"{name}_b1_conv2")
    b1 = b.conv_bn(b1, w(192), (7, 1), name=f"{name}_b1_conv3")
    return _residual_block(b, x, [b0, b1], scale, name)


def _block_c(b, x, w, scale, name):
    b0 = b.conv_bn(x, w(192), 1, name=f"{name}_b0_conv")
    b1 = b.conv_bn(x, w(192), 1, name=f"{name}_b1_conv1")
    b1 = b.conv_bn(b1, w(224), (1, 3), name=f"{name}_b1_conv2")
    b1 = b.conv_bn(b1, w(256), (3, 1), name=f"{name}_b1_conv3")
    return _residual_block(b, x, [b0, b1], scale, name)


def _reduction_a(b, x, w):
    b0 = b.conv_bn(x, w(384), 3, 2, "valid", "reduction_a_b0_conv")
    b1 = b.conv_bn(x, w(256), 1, name="reduction_a_b1_conv1")
    b1 = b.conv_bn(b1, w(256), 3, name="reduction_a_b1_conv2")
    b1 = b.conv_bn(b1, w(384), 3, 2, "valid", "reduction_a_b1_conv3")
    b2 = b.pool(x, "max-pool", 3, 2, "valid", "reduction_a_b2_pool")
    return b.concat([b0, b1, b2], "reduction_a_concat")


def _reduction_b(b, x, w):
    b0 = b.conv_bn(x, w(256), 1, name="reduction_b_b0_conv1")
    b0 = b.conv_bn(b0, w(384), 3, 2, "valid", "reduction_b_b0_conv2")
    b1 = b.conv_bn(x, w(256), 1, name="reduction_b_b1_conv1")
    b1 = b.conv_bn(b1, w(288), 3, 2, "valid", "reduction_b_b1_conv2")
    b2 = b.conv_bn(x, w(256), 1, name="reduction_b_b2_conv1")
    b2 = b.conv_bn(b2, w(288), 3, name="reduction_b_b2_conv2")
    b2 = b.conv_bn(b2, w(320), 3, 2, "valid", "reduction_b_b2_conv3")
    b3 = b.pool(x, "max-pool", 3, 2, "valid", "reduction_b_b3_pool")
    return b.concat([b0, b1, b2, b3], "reduction_b_concat")


def build_network(cfg: NetworkConfig = NetworkConfig()) -> NetworkGraph:
    """Lay out the full network for ``cfg``. Tensors are not allocated here."""
    scale = cfg.base_filters / 32.0

    def w(filters: int) -> int:
        return max(1, int(round(filters * scale)))

    b = GraphBuilder((3, cfg.input_hw, cfg.input_hw), cfg.bn_eps, cfg.bn_momentum)
    x = _stem(b, w)
    a, bb, c = cfg.block_counts
    b.stage = "block_a"
    for i in range(a):
        x = _block_a(b, x, w, cfg.residual_scale, f"block_a{i + 1:02d}")
    b.stage = "reduction_a"
    x = _reduction_a(b, x, w)
    b.stage = "block_b"
    for i in range(bb):
        x = _block_b(b, x, w, cfg.residual_scale, f"block_b{i + 1:02d}")
    b.stage = "reduction_b"
    x = _reduction_b(b, x, w)
    b.stage = "block_c"
    for i in range(c):
        x = _block_c(b, x, w, cfg.residual_scale, f"block_c{i + 1:02d}")
    b.stage = "head"
    if cfg.global_pool:
        x = b.global_avg_pool(x, "head_pool")
    x = b.flatten(x, "head_flatten")
    if cfg.dropout > 0:
        x = b.dropout(x, cfg.dropout, "head_dropout")
    for i, units in enumerate(cfg.head_widths):
        x = b.dense(x, units, f"head_fc{i + 1}")
        x = b.relu(x, f"head_fc{i + 1}_relu")
    x = b.dense(x, cfg.num_classes, "logits")
    b.softmax(x, "softmax")
    return b.build(cfg)


def stage_shapes(graph: NetworkGraph) -> dict[str, tuple[int, ...]]:
    """Output shape at the end of each stage (stem, block_a, reduction_a, ...)."""
    out: dict[str, tuple[int, ...]] = {}
    for layer in graph.layers[1:]:
        out[layer.stage] = layer.out_shape
    return out


def residual_blocks(graph: NetworkGraph) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
    """``(block, input_shape, output_shape)`` for each residual block."""
    result = []
    for layer in graph.layers:
        if layer.kind == "residual-add":
            block = layer.name[: -len("_add")]
            shortcut = graph.by_name[layer.inputs[0]]
            result.append((block, shortcut.out_shape, graph.by_name[f"{block}_relu"].out_shape))
    return result


# -- parameters --------------------------------------------------------------------


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_tensor(name: str, shape: tuple[int, ...], seed: int) -> torch.Tensor:
    """Fresh value for one named parameter or buffer.

    Kernels are He-uniform, ``U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))``; each
    tensor draws from its own stream so values do not depend on graph order.
    """
    leaf = name.rsplit("/", 1)[1]
    if leaf == "kernel":
        fan_in = math.prod(shape[1:])
        limit = math.sqrt(6.0 / fan_in)
        values = _tensor_rng(seed, name).uniform(-limit, limit, size=shape)
        return torch.from_numpy(values.astype(np.float32))
    if leaf in ("gamma", "moving_var"):
        return torch.ones(shape, dtype=torch.float32)
    return torch.zeros(shape, dtype=torch.float32)


def init_parameters(graph: NetworkGraph, seed: Optional[int] = None) -> NetworkGraph:
    if seed is None:
        seed = graph.config.seed if graph.config else 0
    graph.params = {n: init_tensor(n, s, seed) for n, s in graph.param_shapes().items()}
    graph.buffers = {n: init_tensor(n, s, seed) for n, s in graph.buffer_shapes().items()}
    return graph


def freeze_for_fine_tuning(graph: NetworkGraph, trainable_last_n: Optional[int]) -> NetworkGraph:
    """Leave only the last ``trainable_last_n`` parameterized layers trainable.

    ``None`` makes every layer trainable. Batch-norm follows its convolution,
    so frozen batch-norm runs on its moving statistics.
    """
    units = graph.parameterized_units()
    if trainable_last_n is None:
        trainable_last_n = len(units)
    if not 1 <= trainable_last_n <= len(units):
        raise OutOfRange(f"trainable_last_n must lie in [1, {len(units)}], got {trainable_last_n}")
    graph.trainable_units = set(units[len(units) - trainable_last_n :])
    return graph


# -- execution ---------------------------------------------------------------------


def _to_nchw(batch, dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch)) if not isinstance(batch, torch.Tensor) else batch
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).to(dtype).contiguous()


def _batch_norm(layer, x, gamma, beta, mean_buf, var_buf, use_batch_stats, update_stats):
    eps = layer.hyper["eps"]
    if use_batch_stats:
        mean = x.mean(dim=(0, 2, 3))
        var = ((x - mean[None, :, None, None]) ** 2).mean(dim=(0, 2, 3))
        if update_stats:
            m = layer.hyper["momentum"]
            with torch.no_grad():
                mean_buf.mul_(m).add_((1 - m) * mean.detach().to(mean_buf.dtype))
                var_buf.mul_(m).add_((1 - m) * var.detach().to(var_buf.dtype))
    else:
        mean, var = mean_buf, var_buf
    inv = gamma / torch.sqrt(var + eps)
    return (x - mean[None, :, None, None]) * inv[None, :, None, None] + beta[None, :, None, None]


def forward(
    graph: NetworkGraph,
    batch,
    training: bool = False,
    update_stats: Optional[bool] = None,
    params: Optional[dict[str, torch.Tensor]] = None,
    generator: Optional[torch.Generator] = None,
    output: Optional[str] = None,
) -> torch.Tensor:
    """Run the graph on a ``(B, H, W, 3)`` batch of normalized images.

    In training mode, batch-norm layers of trainable units use batch
    statistics and (unless ``update_stats`` is false) update their moving
    averages; every other batch-norm uses the moving averages. ``params``
    overrides entries of ``graph.params`` without touching the graph.
    Returns softmax probabilities, or the activation of ``output`` if given.
    """
    if update_stats is None:
        update_stats = training
    p = graph.params if params is None else {**graph.params, **params}
    dtype = next(iter(p.values())).dtype if p else torch.float32
    x = _to_nchw(batch, dtype)
    expected = graph.input_shape()
    if tuple(x.shape[1:]) != expected:
        raise ShapeMismatch("input", expected, tuple(x.shape[1:]))
    target = output or graph.output

    last_use: dict[str, int] = {}
    for i, layer in enumerate(graph.layers):
        for src in layer.inputs:
            last_use[src] = i
    values: dict[str, torch.Tensor] = {"input": x}
    for i, layer in enumerate(graph.layers[1:], start=1):
        ins = [values[s] for s in layer.inputs]
        kind, h, name = layer.kind, layer.hyper, layer.name
        if kind == "convolution":
            y = F.conv2d(ins[0], p[f"{name}/kernel"], p.get(f"{name}/bias"), stride=h["stride"], padding=h["pads"])
        elif kind == "batch-norm":
            use_batch = training and graph.is_trainable(layer)
            y = _batch_norm(
                layer,
                ins[0],
                p[f"{name}/gamma"],
                p[f"{name}/beta"],
                graph.buffers[f"{name}/moving_mean"],
                graph.buffers[f"{name}/moving_var"],
                use_batch,
                update_stats and use_batch,
            )
        elif kind == "activation":
            y = torch.relu(ins[0])
        elif kind == "max-pool":
            y = F.max_pool2d(ins[0], h["kernel"], h["stride"], h["pads"])
        elif kind == "average-pool":
            y = F.avg_pool2d(ins[0], h["kernel"], h["stride"], h["pads"], count_include_pad=False)
        elif kind == "global-average-pool":
            y = ins[0].mean(dim=(2, 3), keepdim=True)
        elif kind == "concat":
            y = torch.cat(ins, dim=1)
        elif kind == "residual-add":
            y = ins[0] + h["scale"] * ins[1]
        elif kind == "flatten":
            # channels-last order, as a Keras Flatten would see it
            y = ins[0].permute(0, 2, 3, 1).reshape(ins[0].shape[0], -1)
        elif kind == "dropout":
            if training:
                keep = torch.rand(ins[0].shape, generator=generator, dtype=ins[0].dtype) >= h["rate"]
                y = ins[0] * keep / (1.0 - h["rate"])
            else:
                y = ins[0]
        elif kind == "fully-connected":
            y = F.linear(ins[0], p[f"{name}/kernel"], p[f"{name}/bias"])
        elif kind == "softmax":
            y = torch.softmax(ins[0], dim=1)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        values[name] = y
        if name == target:
            return y
        for src in layer.inputs:
            if last_use[src] == i and src != target:
                del values[src]
    return values[target]


def predict_proba(graph: NetworkGraph, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode probabilities for a stack of normalized images."""
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(graph, images[start : start + batch_size]).numpy())
    k = graph.by_name[graph.output].out_shape[0]
    return np.concatenate(out) if out else np.zeros((0, k), dtype=np.float32)


def backward(graph: NetworkGraph, batch, targets, class_weights=None, update_stats: bool = True):
    """Training-mode forward pass plus gradients of the weighted cross-entropy.

    Returns ``(loss, probs, grads)``; ``grads`` holds only trainable parameters.
    """
    from .loss import weighted_cce

    names = graph.trainable_param_names()
    leaves = {n: graph.params[n].detach().requires_grad_(True) for n in names}
    probs = forward(graph, batch, training=True, update_stats=update_stats, params=leaves)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if targets.shape[0] != probs.shape[0]:
        raise ShapeMismatch("targets", (probs.shape[0],), tuple(targets.shape))
    loss = weighted_cce(probs, targets, class_weights)
    if names:
        grads = torch.autograd.grad(loss, [leaves[n] for n in names])
    else:
        grads = ()
    return loss.detach(), probs.detach(), dict(zip(names, grads))
