"""Analytic parameter / multiply-accumulate accounting, plus a latency harness.

Conventions
-----------
``macs``     one multiply-accumulate counts as one operation.
``flops2x``  one multiply-accumulate counts as two operations.

Elementwise overhead (norm: 2 ops/element, relu and residual add: 1,
max-pool: 3 comparisons per output, bilinear upsampling: 4 per output) is not
a MAC; it is the same number under both conventions and is kept in a single
``overhead`` row so that conv-only totals stay visible.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .blocks import (ClassifierParams, DownsampleParams, FCBParams, Network, SVNBlock)
from .errors import ConfigurationError
from .tensor import ConvParams, conv_output_size

CONVENTIONS = ("macs", "flops2x")


@dataclass
class CostRow:
    layer: str
    params: int
    macs: int
    overhead: bool = False

    @property
    def flops2x(self) -> int:
        return self.macs if self.overhead else 2 * self.macs


@dataclass
class CostReport:
    rows: list
    convention: str = "macs"
    input_shape: Optional[tuple] = None

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ConfigurationError(f"unknown convention {self.convention!r}")

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops2x(self) -> int:
        return sum(r.flops2x for r in self.rows)

    def total(self, convention: Optional[str] = None) -> int:
        convention = convention or self.convention
        return self.total_macs if convention == "macs" else self.total_flops2x

    @property
    def conv_macs(self) -> int:
        return sum(r.macs for r in self.rows if not r.overhead)

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.layer == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "macs", "flops2x"])
        for r in self.rows:
            w.writerow([r.layer, r.params, r.macs, r.flops2x])
        w.writerow(["total", self.total_params, self.total_macs, self.total_flops2x])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def conv_params(p: ConvParams) -> int:
    return p.weight.data.size + (p.bias.data.size if p.bias is not None else 0)


def conv_macs(p: ConvParams, out_hw: tuple, batch: int = 1) -> int:
    c_out, cig, kh, kw = p.weight.shape
    return batch * c_out * out_hw[0] * out_hw[1] * kh * kw * cig


def _conv_out(p: ConvParams, hw: tuple, padding) -> tuple:
    (kh, kw), (sh, sw), (dh, dw) = p.kernel_size, p.stride, p.dilation
    return (conv_output_size(hw[0], kh, padding[0], dh, sh),
            conv_output_size(hw[1], kw, padding[1], dw, sw))


def attention_flops(bottleneck: int, pixels: int, total_keys: int, iters: int,
                    n_scales: int = 1) -> dict:
    """MACs of the reduced non-local product and of the key power iterations.

    The attention term covers both products (scores K^T Q, then the weighted
    sum K S): ``2 * C' * N * S``. Each power-iteration step costs one A^T u
    and one A v over every region, so a scale costs ``2 * T * C' * N``.
    """
    if min(bottleneck, pixels, total_keys, iters, n_scales) < 1:
        raise ConfigurationError("attention_flops arguments must be positive")
    return {
        "attention_macs": 2 * bottleneck * pixels * total_keys,
        "power_iter_macs": 2 * iters * bottleneck * pixels * n_scales,
    }


def standard_nonlocal_macs(channels: int, queries: int, keys: int) -> int:
    """Scores Q^T K plus the weighted value sum, without the 1x1 projections."""
    return 2 * channels * queries * keys


class _Walker:
    def __init__(self, batch: int, with_shapes: bool):
        self.rows: list = []
        self.batch = batch
        self.with_shapes = with_shapes
        self.overhead = 0

    def conv(self, name, p: ConvParams, hw, padding=(0, 0)):
        out = _conv_out(p, hw, padding) if self.with_shapes else hw
        macs = conv_macs(p, out, self.batch) if self.with_shapes else 0
        self.rows.append(CostRow(name, conv_params(p), macs))
        return out

    def norm(self, name, channels, hw):
        self.rows.append(CostRow(name, 2 * channels, 0))
        self.elementwise(2, channels, hw)

    def elementwise(self, ops, channels, hw):
        if self.with_shapes:
            self.overhead += ops * self.batch * channels * hw[0] * hw[1]


def _walk(net: Network, input_shape: Optional[tuple]) -> list:
    with_shapes = input_shape is not None
    batch, c, h, w = input_shape if with_shapes else (1, net.spec.input_channels, 0, 0)
    if with_shapes:
        f = net.spec.downsample_factor
        if h % f or w % f or h < f or w < f:
            raise ConfigurationError(f"input {h}x{w} not divisible by {f}")
    k = _Walker(batch, with_shapes)
    hw = (h, w)
    for name, layer in net:
        if isinstance(layer, DownsampleParams):
            out = k.conv(f"{name}.conv", layer.conv, hw, (1, 1))
            k.elementwise(3, c, out)                                 # max-pool
            c = layer.norm.channels
            k.norm(f"{name}.norm", c, out)
            k.elementwise(1, c, out)
            hw = out
        elif isinstance(layer, FCBParams):
            half = layer.channels // 2
            for b in range(2):
                k.conv(f"{name}.branch{b}.conv3x1", layer.conv3x1[b], hw, (1, 0))
                k.elementwise(1, half, hw)
                k.conv(f"{name}.branch{b}.conv1x3", layer.conv1x3[b], hw, (0, 1))
                k.norm(f"{name}.branch{b}.norm", half, hw)
                k.elementwise(1, half, hw)
            k.conv(f"{name}.depthwise", layer.depthwise, hw, layer.depthwise.same_padding())
            k.norm(f"{name}.norm_dw", c, hw)
            k.elementwise(1, c, hw)
            k.conv(f"{name}.pointwise", layer.pointwise, hw)
            k.norm(f"{name}.norm_pw", c, hw)
            k.elementwise(2, c, hw)                                  # add + relu
        elif isinstance(layer, SVNBlock):
            cfg = layer.cfg
            cb = cfg.bottleneck_channels
            k.conv(f"{name}.conv1", layer.weights.conv1, hw)
            if layer.weights.norm1 is not None:
                k.norm(f"{name}.norm1", cb, hw)
                k.elementwise(1, cb, hw)
            if with_shapes:
                att = attention_flops(cb, hw[0] * hw[1], cfg.total_keys, cfg.power_iters)
                power = sum(attention_flops(cb, int(np.prod(g.padded_size(*hw))), 1,
                                            cfg.power_iters)["power_iter_macs"] for g in cfg.scales)
                k.rows.append(CostRow(f"{name}.attention", 0, batch * att["attention_macs"]))
                k.rows.append(CostRow(f"{name}.power_iteration", 0, batch * power))
            k.conv(f"{name}.conv2", layer.weights.conv2, hw)
            k.elementwise(1, c, hw)                                  # residual
        elif isinstance(layer, ClassifierParams):
            out = k.conv(f"{name}.conv3x3", layer.conv3x3, hw, (1, 1))
            k.norm(f"{name}.norm", layer.norm.channels, out)
            k.elementwise(1, layer.norm.channels, out)
            k.conv(f"{name}.conv1x1", layer.conv1x1, out)
            c = layer.conv1x1.out_channels
            up = (out[0] * layer.upsample, out[1] * layer.upsample)
            k.elementwise(4, c, up)
            hw = up
        else:
            raise TypeError(f"no cost model for {type(layer).__name__}")
    if with_shapes:
        k.rows.append(CostRow("overhead", 0, k.overhead, overhead=True))
    return k.rows


def count_params(net: Network) -> CostReport:
    """Exact weight + bias + norm-affine counts per conv / norm."""
    return CostReport(_walk(net, None))


def count_flops(net: Network, input_shape, convention: str = "macs") -> CostReport:
    """Per-layer MACs for an input of ``input_shape`` = (N, C, H, W) or (C, H, W)."""
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    return CostReport(_walk(net, shape), convention, shape)


# ---------------------------------------------------------------------------
# wall-clock timing


@dataclass
class BenchResult:
    median: float
    mean: float
    p95: float
    reps: int
    warmup: int
    threads: int
    shape: Optional[tuple] = None
    times: list = field(default_factory=list, repr=False)


def bench_latency(fn: Callable[[], object], reps: int = 10, warmup: int = 3, threads: int = 1,
                  shape: Optional[tuple] = None) -> BenchResult:
    """Time ``fn()`` ``reps`` times after ``warmup`` untimed calls, BLAS pinned to ``threads``."""
    if reps < 10:
        raise ConfigurationError("reps must be >= 10")
    if warmup < 3:
        raise ConfigurationError("warmup must be >= 3")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    return BenchResult(statistics.median(times), statistics.fmean(times),
                       float(np.percentile(times, 95)), reps, warmup, threads, shape, times)
