"""FCB blocks, downsampling units and the assembled A/B/C networks.

Encoder: three stages, each opened by an ENet-style downsampling unit and
followed by factorized convolution blocks (FCB). Decoder: an optional SVN
module (reduced non-local attention, see :mod:`lrnnet.svn`) and a small
classifier whose logits are bilinearly upsampled back to input resolution.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError
from .svn import RegionGrid, SVNConfig, SVNWeights, svn_module_forward
from .tensor import (ConvParams, NormParams, Tensor, add, batch_norm, channel_shuffle,
                     channel_split, concat, conv2d, max_pool2d, relu, upsample_bilinear)

DEFAULT_DILATIONS = (1, 2, 5, 9, 2, 5, 9, 17)


@dataclass(frozen=True)
class NetworkSpec:
    stage_channels: tuple = (32, 64, 128)
    blocks_per_stage: tuple = (3, 2, 8)
    stage3_dilations: tuple = DEFAULT_DILATIONS
    num_classes: int = 19
    svn: Optional[SVNConfig] = None
    input_channels: int = 3
    classifier_width: int = 32

    def __post_init__(self):
        if len(self.blocks_per_stage) != len(self.stage_channels):
            raise ConfigurationError("blocks_per_stage and stage_channels differ in length")
        if len(self.stage3_dilations) != self.blocks_per_stage[-1]:
            raise ConfigurationError(
                f"{len(self.stage3_dilations)} dilations for {self.blocks_per_stage[-1]} last-stage blocks")
        if any(d < 1 for d in self.stage3_dilations):
            raise ConfigurationError("dilations must be >= 1")
        widths = (self.input_channels,) + tuple(self.stage_channels)
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ConfigurationError("each stage must widen the channel count")
        if any(c % 2 for c in self.stage_channels):
            raise ConfigurationError("FCB needs an even channel count")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.stage_channels)

    @property
    def variant(self) -> str:
        if self.svn is None:
            return "A"
        return "B" if len(self.svn.scales) == 1 else "C"

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.svn is not None:
            d["svn"]["scales"] = [str(g) for g in self.svn.scales]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        svn = d.pop("svn", None)
        if svn is not None:
            svn = dict(svn)
            svn["scales"] = tuple(RegionGrid.parse(s) for s in svn["scales"])
            svn = SVNConfig(**svn)
        tuples = ("stage_channels", "blocks_per_stage", "stage3_dilations")
        d.update({k: tuple(d[k]) for k in tuples if k in d})
        return cls(svn=svn, **d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def model_spec(variant: str, num_classes: int = 19, **overrides) -> NetworkSpec:
    """Model A (no SVN), B (8x8 grid) or C (8x8 + 4x4 grids)."""
    variant = variant.upper()
    scales = {"A": None, "B": (RegionGrid(8, 8),), "C": (RegionGrid(8, 8), RegionGrid(4, 4))}
    if variant not in scales:
        raise ConfigurationError(f"unknown model variant {variant!r}")
    svn = None if scales[variant] is None else SVNConfig(scales=scales[variant])
    return NetworkSpec(num_classes=num_classes, svn=svn, **overrides)


# ---------------------------------------------------------------------------
# parameter construction


class _Init:
    """He-uniform weights, zero biases, identity norms; draws in call order."""

    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def conv(self, c_in, c_out, k, groups=1, stride=1, dilation=1, bias=True) -> ConvParams:
        kh, kw = (k, k) if isinstance(k, int) else k
        fan_in = (c_in // groups) * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        w = self.rng.uniform(-bound, bound, size=(c_out, c_in // groups, kh, kw)).astype(self.dtype)
        b = Tensor(np.zeros(c_out, dtype=self.dtype), True) if bias else None
        return ConvParams(Tensor(w, True), b, stride=stride, dilation=dilation, groups=groups)

    def norm(self, c) -> NormParams:
        return NormParams.identity(c, dtype=self.dtype)


def _conv_items(prefix, p: ConvParams):
    yield f"{prefix}.weight", p.weight
    if p.bias is not None:
        yield f"{prefix}.bias", p.bias


def _norm_items(prefix, p: NormParams):
    yield f"{prefix}.gamma", p.gamma
    yield f"{prefix}.beta", p.beta


def _norm_buffers(prefix, p: NormParams):
    yield f"{prefix}.running_mean", p.running_mean
    yield f"{prefix}.running_var", p.running_var


# ---------------------------------------------------------------------------
# FCB


@dataclass
class FCBParams:
    """Two split-group 1D branches, then depthwise-dilated + pointwise convs."""

    conv3x1: list       # [ConvParams, ConvParams], C/2 -> C/2, kernel (3, 1)
    conv1x3: list       # [ConvParams, ConvParams], kernel (1, 3)
    norm_1d: list       # [NormParams, NormParams]
    depthwise: ConvParams
    norm_dw: NormParams
    pointwise: ConvParams
    norm_pw: NormParams
    shuffle_groups: int = 2

    def __post_init__(self):
        if self.depthwise.dilation[0] < 1:
            raise ConfigurationError("dilation must be >= 1")

    @property
    def channels(self) -> int:
        return self.pointwise.out_channels

    @property
    def dilation(self) -> int:
        return self.depthwise.dilation[0]

    @classmethod
    def create(cls, channels: int, dilation: int, init: _Init) -> "FCBParams":
        if channels % 2:
            raise ConfigurationError("FCB needs an even channel count")
        half = channels // 2
        c31, c13, norms = [], [], []
        for _ in range(2):
            c31.append(init.conv(half, half, (3, 1)))
            c13.append(init.conv(half, half, (1, 3)))
            norms.append(init.norm(half))
        dw = init.conv(channels, channels, 3, groups=channels, dilation=dilation)
        norm_dw = init.norm(channels)
        pw = init.conv(channels, channels, 1)
        return cls(c31, c13, norms, dw, norm_dw, pw, init.norm(channels))

    def named_parameters(self, prefix: str) -> Iterator:
        for b in range(2):
            yield from _conv_items(f"{prefix}.branch{b}.conv3x1", self.conv3x1[b])
            yield from _conv_items(f"{prefix}.branch{b}.conv1x3", self.conv1x3[b])
            yield from _norm_items(f"{prefix}.branch{b}.norm", self.norm_1d[b])
        yield from _conv_items(f"{prefix}.depthwise", self.depthwise)
        yield from _norm_items(f"{prefix}.norm_dw", self.norm_dw)
        yield from _conv_items(f"{prefix}.pointwise", self.pointwise)
        yield from _norm_items(f"{prefix}.norm_pw", self.norm_pw)

    def named_buffers(self, prefix: str) -> Iterator:
        for b in range(2):
            yield from _norm_buffers(f"{prefix}.branch{b}.norm", self.norm_1d[b])
        yield from _norm_buffers(f"{prefix}.norm_dw", self.norm_dw)
        yield from _norm_buffers(f"{prefix}.norm_pw", self.norm_pw)


def fcb_forward(x: Tensor, p: FCBParams, training: bool = True) -> Tensor:
    if x.shape[1] != p.channels:
        raise ConfigurationError(f"FCB built for {p.channels} channels, got {x.shape[1]}")
    halves = []
    for b, part in enumerate(channel_split(x)):
        y = relu(conv2d(part, p.conv3x1[b], padding=(1, 0)))
        y = relu(batch_norm(conv2d(y, p.conv1x3[b], padding=(0, 1)), p.norm_1d[b], training))
        halves.append(y)
    y = concat(halves)
    y = relu(batch_norm(conv2d(y, p.depthwise, padding=p.depthwise.same_padding()), p.norm_dw, training))
    y = batch_norm(conv2d(y, p.pointwise), p.norm_pw, training)
    y = relu(add(y, x))
    return channel_shuffle(y, p.shuffle_groups)


# ---------------------------------------------------------------------------
# downsampling unit


@dataclass
class DownsampleParams:
    conv: ConvParams        # 3x3 stride 2, c_in -> c_out - c_in
    norm: NormParams        # over all c_out channels

    @classmethod
    def create(cls, c_in: int, c_out: int, init: _Init) -> "DownsampleParams":
        if c_out <= c_in:
            raise ConfigurationError(f"downsampling must widen channels ({c_in} -> {c_out})")
        return cls(init.conv(c_in, c_out - c_in, 3, stride=2), init.norm(c_out))

    def named_parameters(self, prefix):
        yield from _conv_items(f"{prefix}.conv", self.conv)
        yield from _norm_items(f"{prefix}.norm", self.norm)

    def named_buffers(self, prefix):
        yield from _norm_buffers(f"{prefix}.norm", self.norm)


def downsample_unit(x: Tensor, p: DownsampleParams, training: bool = True) -> Tensor:
    """concat(3x3/2 conv, 2x2/2 max-pool) -> norm -> relu; halves H and W."""
    if x.shape[1] != p.conv.in_channels:
        raise ConfigurationError(f"downsampler expects {p.conv.in_channels} channels, got {x.shape[1]}")
    y = concat([conv2d(x, p.conv, padding=(1, 1)), max_pool2d(x)])
    return relu(batch_norm(y, p.norm, training))


# ---------------------------------------------------------------------------
# SVN block and classifier


@dataclass
class SVNBlock:
    weights: SVNWeights
    cfg: SVNConfig

    @classmethod
    def create(cls, channels: int, cfg: SVNConfig, init: _Init) -> "SVNBlock":
        c1 = init.conv(channels, cfg.bottleneck_channels, 1)
        n1 = init.norm(cfg.bottleneck_channels) if cfg.conv1_norm_act else None
        c2 = init.conv(cfg.bottleneck_channels, channels, 1)
        return cls(SVNWeights(c1, c2, n1), cfg)

    def named_parameters(self, prefix):
        yield from _conv_items(f"{prefix}.conv1", self.weights.conv1)
        if self.weights.norm1 is not None:
            yield from _norm_items(f"{prefix}.norm1", self.weights.norm1)
        yield from _conv_items(f"{prefix}.conv2", self.weights.conv2)

    def named_buffers(self, prefix):
        if self.weights.norm1 is not None:
            yield from _norm_buffers(f"{prefix}.norm1", self.weights.norm1)


@dataclass
class ClassifierParams:
    conv3x3: ConvParams
    norm: NormParams
    conv1x1: ConvParams
    upsample: int

    @classmethod
    def create(cls, c_in, width, classes, upsample, init: _Init) -> "ClassifierParams":
        return cls(init.conv(c_in, width, 3), init.norm(width), init.conv(width, classes, 1), upsample)

    def named_parameters(self, prefix):
        yield from _conv_items(f"{prefix}.conv3x3", self.conv3x3)
        yield from _norm_items(f"{prefix}.norm", self.norm)
        yield from _conv_items(f"{prefix}.conv1x1", self.conv1x1)

    def named_buffers(self, prefix):
        yield from _norm_buffers(f"{prefix}.norm", self.norm)


def classifier_forward(x: Tensor, p: ClassifierParams, training: bool = True) -> Tensor:
    y = relu(batch_norm(conv2d(x, p.conv3x3, padding=(1, 1)), p.norm, training))
    return upsample_bilinear(conv2d(y, p.conv1x1), p.upsample)


# ---------------------------------------------------------------------------
# network


def _apply(layer, x, training):
    if isinstance(layer, FCBParams):
        return fcb_forward(x, layer, training)
    if isinstance(layer, DownsampleParams):
        return downsample_unit(x, layer, training)
    if isinstance(layer, SVNBlock):
        return svn_module_forward(x, layer.weights, layer.cfg, training)
    if isinstance(layer, ClassifierParams):
        return classifier_forward(x, layer, training)
    raise TypeError(f"unknown layer {type(layer).__name__}")


class Network:
    """Ordered ``(name, layer)`` list built from a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, layers: list, dtype):
        self.spec = spec
        self.layers = layers
        self.dtype = np.dtype(dtype)

    def __iter__(self):
        return iter(self.layers)

    def layer(self, name):
        return dict(self.layers)[name]

    def named_parameters(self) -> list:
        out = []
        for name, layer in self.layers:
            out.extend(layer.named_parameters(name))
        return out

    def named_buffers(self) -> list:
        out = []
        for name, layer in self.layers:
            out.extend(layer.named_buffers(name))
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def state(self) -> list:
        """(name, array) for every parameter and buffer, in build order."""
        return [(n, t.data) for n, t in self.named_parameters()] + self.named_buffers()

    def encode(self, x: Tensor, training: bool = True, trace: Optional[list] = None) -> Tensor:
        return self.forward(x, training, trace, stop_after="encoder")

    def forward(self, x: Tensor, training: bool = True, trace: Optional[list] = None,
                stop_after: Optional[str] = None) -> Tensor:
        factor = self.spec.downsample_factor
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ConfigurationError(f"expected (N, {self.spec.input_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ConfigurationError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {factor}")
        for name, layer in self.layers:
            if stop_after == "encoder" and not name.startswith("stage"):
                break
            x = _apply(layer, x, training)
            if trace is not None:
                trace.append((name, x.shape))
        return x

    __call__ = forward


def build_lrnnet(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Instantiate the network described by ``spec`` with He-uniform weights."""
    init = _Init(seed, dtype)
    layers = []
    c_prev = spec.input_channels
    for s, (c, blocks) in enumerate(zip(spec.stage_channels, spec.blocks_per_stage), start=1):
        layers.append((f"stage{s}.down", DownsampleParams.create(c_prev, c, init)))
        last = s == len(spec.stage_channels)
        for b in range(blocks):
            dil = spec.stage3_dilations[b] if last else 1
            layers.append((f"stage{s}.fcb{b}", FCBParams.create(c, dil, init)))
        c_prev = c
    if spec.svn is not None:
        layers.append(("decoder.svn", SVNBlock.create(c_prev, spec.svn, init)))
    layers.append(("decoder.classifier",
                   ClassifierParams.create(c_prev, spec.classifier_width, spec.num_classes,
                                           spec.downsample_factor, init)))
    return Network(spec, layers, dtype)


def network_forward(net: Network, x: Tensor, training: bool = False) -> Tensor:
    return net.forward(x, training)
