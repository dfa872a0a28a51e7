"""Dense NCHW tensors with a small, tape-recorded op vocabulary.

Every op here has a forward pass in plain numpy and a hand-written backward
pass. Ops record themselves on the innermost active :class:`Tape`; with no
tape active they are plain numpy calls and nothing is retained.

    >>> x = Tensor(np.ones((1, 2, 4, 4)), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = relu(x)
    >>> grads = backward(tape, np.ones(y.shape))
    >>> grads[x].sum()
    32.0
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, TapeError

__all__ = [
    "Tensor", "Tape", "Gradients", "ConvParams", "NormParams",
    "record_op", "backward",
    "conv2d", "batch_norm", "relu", "max_pool2d", "upsample_bilinear",
    "channel_split", "channel_slice", "concat", "channel_shuffle", "add",
    "matmul", "swap_last", "reshape", "tensor_sum", "detach",
]

_node_ids = itertools.count(1)
_tape_stack: list["Tape"] = []


class Tensor:
    """Immutable array plus the bookkeeping the tape needs.

    ``data`` is treated as read-only once the tensor exists; parameter
    updates during training are the one sanctioned exception and happen
    strictly between passes.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class _Record:
    op: str
    inputs: tuple  # node id per input, None where no gradient is wanted
    output: int
    backward: Callable


class Tape:
    """Ordered log of differentiable ops, used as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


class Gradients(dict):
    """node_id -> gradient array; also indexable by the Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().get(key, default)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)


def record_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out`` in a Tensor and log it on the active tape if any input needs grad.

    ``backward_fn(grad_out, needs)`` must return one gradient (or None) per
    input; ``needs[i]`` tells it whether input ``i`` wants one.
    """
    tape = _tape_stack[-1] if _tape_stack else None
    needs = tuple(t.requires_grad for t in inputs)
    track = tape is not None and any(needs)
    result = Tensor(out, requires_grad=track)
    if track:
        ids = tuple(t.node_id if n else None for t, n in zip(inputs, needs))
        tape.records.append(_Record(op, ids, result.node_id, lambda g: backward_fn(g, needs)))
    return result


def backward(tape: Tape, seed, output: Optional[Tensor] = None,
             keep_intermediate: bool = False) -> Gradients:
    """Reverse-mode sweep over ``tape`` starting from ``seed``.

    ``output`` defaults to the last recorded op. Gradients are accumulated in
    reverse record order, so the result does not depend on anything but the
    tape contents. Only leaf gradients are returned unless
    ``keep_intermediate`` is set.
    """
    records = tape.records
    if not records:
        raise TapeError("tape is empty")
    position = {rec.output: k for k, rec in enumerate(records)}
    for k, rec in enumerate(records):
        for nid in rec.inputs:
            if nid is not None and position.get(nid, -1) >= k:
                raise TapeError(f"node {nid} consumed before it was produced")
    out_id = records[-1].output if output is None else output.node_id
    if out_id not in position:
        raise TapeError(f"node {out_id} is not on the tape")
    seed = np.asarray(seed)
    start = position[out_id]
    if output is not None and seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")

    grads = Gradients()
    grads[out_id] = seed
    produced = set(position)
    for rec in reversed(records[: start + 1]):
        g = grads.get(rec.output)
        if g is None:
            continue
        if not keep_intermediate:
            del grads[rec.output]
        in_grads = rec.backward(g)
        for nid, gi in zip(rec.inputs, in_grads):
            if nid is None or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
        if keep_intermediate:
            grads[rec.output] = g
    if not keep_intermediate:
        for nid in [k for k in grads if k in produced]:
            del grads[nid]
    return grads


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)


def _pair(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weight ``(c_out, c_in/groups, k_h, k_w)`` plus optional bias and geometry."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    groups: int = 1

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.dilation = _pair(self.dilation)
        if min(self.stride) < 1 or min(self.dilation) < 1 or self.groups < 1:
            raise ConfigurationError("stride, dilation and groups must be positive")
        if self.weight.ndim != 4:
            raise DimensionError("conv weight must be 4-D")
        c_out = self.weight.shape[0]
        if c_out % self.groups:
            raise ConfigurationError(f"groups={self.groups} does not divide c_out={c_out}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise DimensionError(f"bias shape {self.bias.shape} != ({c_out},)")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple:
        return self.weight.shape[2:]

    def same_padding(self) -> tuple:
        kh, kw = self.kernel_size
        dh, dw = self.dilation
        return dh * (kh - 1) // 2, dw * (kw - 1) // 2


def conv_output_size(size: int, k: int, pad: int, dil: int, stride: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, p: ConvParams, padding=(0, 0)) -> Tensor:
    """Grouped, dilated, strided 2-D cross-correlation with zero padding.

    Computed as a loop over kernel taps; each tap is a batched matrix product
    over the channels of a group (or a per-channel scale when the conv is
    depthwise).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    c_out, cig, kh, kw = p.weight.shape
    g = p.groups
    if c % g:
        raise ConfigurationError(f"groups={g} does not divide input channels {c}")
    if cig * g != c:
        raise DimensionError(f"weight expects {cig * g} input channels, got {c}")
    ph, pw = _pair(padding)
    sh, sw = p.stride
    dh, dw = p.dilation
    ho = conv_output_size(h, kh, ph, dh, sh)
    wo = conv_output_size(w, kw, pw, dw, sw)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small for kernel {kh}x{kw}")

    xd = x.data
    wd = p.weight.data
    dtype = np.result_type(xd, wd)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cog = c_out // g
    npix = ho * wo
    depthwise = cig == 1 and cog == 1
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def window(i, j):
        r0, c0 = i * dh, j * dw
        return (slice(None), slice(None),
                slice(r0, r0 + sh * (ho - 1) + 1, sh),
                slice(c0, c0 + sw * (wo - 1) + 1, sw))

    out = np.zeros((n, c_out, ho, wo), dtype=dtype)
    if depthwise:
        for i, j in taps:
            out += wd[:, 0, i, j][None, :, None, None] * xp[window(i, j)]
    else:
        # (kh, kw, g, cog, cig) so each tap is a contiguous stack of group matrices
        wt = np.ascontiguousarray(wd.reshape(g, cog, cig, kh, kw).transpose(3, 4, 0, 1, 2))
        out4 = out.reshape(n, g, cog, npix)
        for i, j in taps:
            xs = xp[window(i, j)].reshape(n, g, cig, npix)
            out4 += np.matmul(wt[i, j], xs)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    def _backward(gout, needs):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros(xp.shape, dtype=dtype)
            if depthwise:
                for i, j in taps:
                    gxp[window(i, j)] += wd[:, 0, i, j][None, :, None, None] * gout
            else:
                g4 = gout.reshape(n, g, cog, npix)
                for i, j in taps:
                    part = np.matmul(wt[i, j].transpose(0, 2, 1), g4)
                    gxp[window(i, j)] += part.reshape(n, c, ho, wo)
            gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if needs[1]:
            gw = np.zeros(wd.shape, dtype=dtype)
            if depthwise:
                for i, j in taps:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gout, xp[window(i, j)])
            else:
                g4 = gout.reshape(n, g, cog, npix)
                for i, j in taps:
                    xs = xp[window(i, j)].reshape(n, g, cig, npix)
                    gw[:, :, i, j] = np.matmul(g4, xs.transpose(0, 1, 3, 2)).sum(axis=0).reshape(c_out, cig)
        if len(needs) > 2 and needs[2]:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = [x, p.weight] + ([p.bias] if p.bias is not None else [])
    return record_op("conv2d", inputs, out, _backward)


# ---------------------------------------------------------------------------
# normalization, activation, pooling, resampling


@dataclass
class NormParams:
    """Batch-norm affine parameters and running statistics for ``c`` channels."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigurationError("momentum must lie in (0, 1)")
        if np.any(np.asarray(self.running_var) < 0):
            raise ConfigurationError("running_var must be nonnegative")

    @classmethod
    def identity(cls, c: int, dtype=np.float64, requires_grad: bool = True) -> "NormParams":
        return cls(Tensor(np.ones(c, dtype=dtype), requires_grad),
                   Tensor(np.zeros(c, dtype=dtype), requires_grad),
                   np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, p: NormParams, training: bool) -> Tensor:
    """Per-channel normalization; in training mode also updates running stats."""
    c = x.shape[1]
    if p.channels != c or p.beta.shape != (c,):
        raise DimensionError(f"norm params for {p.channels} channels, input has {c}")
    xd = x.data
    gamma = p.gamma.data[None, :, None, None]
    beta = p.beta.data[None, :, None, None]
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + p.epsilon)
        xhat = centered * inv[None, :, None, None]
        unbiased = var * (m / max(m - 1, 1))
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mean
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (xd - p.running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma * xhat + beta
    out = out.astype(xd.dtype, copy=False)

    def _backward(gout, needs):
        gx = None
        ggamma = (gout * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gbeta = gout.sum(axis=(0, 2, 3)) if needs[2] else None
        if needs[0]:
            dxhat = gout * gamma
            if training:
                s1 = dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                gx = (dxhat - s1 - xhat * s2) * inv[None, :, None, None]
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return record_op("batch_norm", [x, p.gamma, p.beta], out, _backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)

    def _backward(gout, needs):
        return (gout * (xd > 0),)

    return record_op("relu", [x], out, _backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2; an odd trailing row/column is padded with -inf."""
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xd = x.data
    if h % 2 or w % 2:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)),
                    constant_values=-np.inf)
    windows = xd.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _backward(gout, needs):
        gw = np.zeros(windows.shape, dtype=gout.dtype)
        np.put_along_axis(gw, idx[..., None], gout[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (gx[:, :, :h, :w],)

    return record_op("max_pool2d", [x], out, _backward)


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, align-corners-false convention."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigurationError("upsampling factor must be >= 1")
    n, c, h, w = x.shape
    mh = bilinear_matrix(h, factor, x.dtype)
    mw = bilinear_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def _backward(gout, needs):
        return (np.matmul(mh.T, np.matmul(gout, mw)),)

    return record_op("upsample_bilinear", [x], out, _backward)


# ---------------------------------------------------------------------------
# channel plumbing


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop]

    def _backward(gout, needs):
        gx = np.zeros(x.shape, dtype=gout.dtype)
        gx[:, start:stop] = gout
        return (gx,)

    return record_op("channel_slice", [x], out, _backward)


def channel_split(x: Tensor) -> tuple:
    """Split channels into two equal halves."""
    c = x.shape[1]
    if c % 2:
        raise ConfigurationError(f"cannot split {c} channels into two equal groups")
    return channel_slice(x, 0, c // 2), channel_slice(x, c // 2, c)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != len(ref) or any(a.shape[k] != ref[k] for k in range(len(ref)) if k != axis):
            raise DimensionError(f"cannot concatenate shapes {ref} and {a.shape} on axis {axis}")
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])

    def _backward(gout, needs):
        parts = []
        for k in range(len(arrays)):
            sl = [slice(None)] * gout.ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            parts.append(gout[tuple(sl)] if needs[k] else None)
        return tuple(parts)

    return record_op("concat", list(tensors), out, _backward)


def shuffle_permutation(c: int, groups: int) -> np.ndarray:
    """Input channel feeding each output channel: reshape (g, c/g), transpose, flatten."""
    if groups < 1 or c % groups:
        raise ConfigurationError(f"groups={groups} does not divide {c} channels")
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    perm = shuffle_permutation(x.shape[1], groups)
    out = x.data[:, perm]

    def _backward(gout, needs):
        gx = np.empty_like(gout)
        gx[:, perm] = gout
        return (gx,)

    return record_op("channel_shuffle", [x], out, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def _backward(gout, needs):
        return gout, gout

    return record_op("add", [a, b], a.data + b.data, _backward)


# ---------------------------------------------------------------------------
# matrix-shaped helpers (used by the attention path)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; batch dims must match."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _backward(gout, needs):
        ga = np.matmul(gout, np.swapaxes(bd, -1, -2)) if needs[0] else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), gout) if needs[1] else None
        return ga, gb

    return record_op("matmul", [a, b], np.matmul(ad, bd), _backward)


def swap_last(x: Tensor) -> Tensor:
    def _backward(gout, needs):
        return (np.swapaxes(gout, -1, -2),)

    return record_op("swap_last", [x], np.swapaxes(x.data, -1, -2), _backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def _backward(gout, needs):
        return (gout.reshape(src),)

    return record_op("reshape", [x], x.data.reshape(shape), _backward)


def tensor_sum(x: Tensor) -> Tensor:
    def _backward(gout, needs):
        return (np.broadcast_to(np.asarray(gout, dtype=x.dtype), x.shape).copy(),)

    return record_op("sum", [x], np.asarray(x.data.sum()), _backward)
