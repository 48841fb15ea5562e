"""Differentiable layer primitives: convolution, activations, batch norm,
pooling, nearest upsampling, and channel concatenation.

All ops use the [spatial..., C, B] layout and run on the tensor graph.
Convolution is cross-correlation (no kernel flip) with symmetric zero
padding; kernels are stored as [k..., C_in, C_out].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, from_op

__all__ = [
    "ConvSpec",
    "BatchNormState",
    "conv_nd",
    "trelu",
    "trelu_np",
    "relu",
    "sigmoid",
    "batchnorm",
    "maxpool",
    "upsample_nearest",
    "concat_channels",
    "slice_channels",
]


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    spatial_rank: int
    kernel_extent: tuple[int, ...]
    in_channels: int
    out_channels: int
    stride: tuple[int, ...] = None
    padding: tuple[int, ...] = None
    has_bias: bool = True

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        object.__setattr__(self, "kernel_extent", tuple(self.kernel_extent))
        stride = self.stride if self.stride is not None else (1,) * self.spatial_rank
        padding = self.padding if self.padding is not None else (0,) * self.spatial_rank
        object.__setattr__(self, "stride", tuple(stride))
        object.__setattr__(self, "padding", tuple(padding))
        for name in ("kernel_extent", "stride", "padding"):
            if len(getattr(self, name)) != self.spatial_rank:
                raise ValueError(f"{name} must have {self.spatial_rank} entries")
        if min(self.kernel_extent) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("kernel/stride must be positive, padding nonnegative")

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return self.kernel_extent + (self.in_channels, self.out_channels)

    def out_extent(self, in_extent: tuple[int, ...]) -> tuple[int, ...]:
        out = []
        for n, k, s, p in zip(in_extent, self.kernel_extent, self.stride, self.padding):
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ShapeError(f"conv output extent {o} < 1 for input extent {n}")
            out.append(o)
        return tuple(out)

    @property
    def parameter_count(self) -> int:
        n = int(np.prod(self.kernel_extent)) * self.in_channels * self.out_channels
        return n + (self.out_channels if self.has_bias else 0)


def conv_nd(inp, kernel, spec: ConvSpec, bias=None) -> Tensor:
    """Strided zero-padded cross-correlation over the spatial axes.

    inp:    [spatial..., C_in, B]
    kernel: [k..., C_in, C_out]
    bias:   [C_out] or None (only when spec.has_bias)
    """
    inp, kernel = as_tensor(inp), as_tensor(kernel)
    rank = spec.spatial_rank
    if inp.ndim != rank + 2:
        raise ShapeError(f"conv_nd: input must have rank {rank + 2}, got {inp.ndim}")
    if inp.shape[-2] != spec.in_channels:
        raise ShapeError(
            f"conv_nd: input has {inp.shape[-2]} channels, spec wants {spec.in_channels}")
    if kernel.shape != spec.kernel_shape:
        raise ShapeError(
            f"conv_nd: kernel shape {kernel.shape} != spec {spec.kernel_shape}")
    if (bias is None) == spec.has_bias:
        raise ShapeError("conv_nd: bias presence must match spec.has_bias")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv_nd: bias shape {bias.shape} != ({spec.out_channels},)")

    in_sp = inp.shape[:rank]
    out_sp = spec.out_extent(in_sp)
    batch = inp.shape[-1]
    pad_width = [(p, p) for p in spec.padding] + [(0, 0), (0, 0)]
    padded = np.pad(inp.data, pad_width) if any(spec.padding) else inp.data

    kdata = kernel.data
    out = np.zeros(out_sp + (spec.out_channels, batch))
    offset_slices = []
    for k in np.ndindex(*spec.kernel_extent):
        sl = tuple(
            slice(k[i], k[i] + spec.stride[i] * out_sp[i], spec.stride[i])
            for i in range(rank))
        offset_slices.append((k, sl))
        # contract C_in against the kernel tap at offset k
        out += np.einsum("...cb,co->...ob", padded[sl], kdata[k])
    if bias is not None:
        out += bias.data.reshape(-1, 1)

    def bwd(g):
        if kernel.requires_grad:
            gk = np.empty_like(kdata)
            gflat = g.reshape(-1, spec.out_channels, batch)
            for k, sl in offset_slices:
                window = padded[sl].reshape(-1, spec.in_channels, batch)
                gk[k] = np.einsum("scb,sob->co", window, gflat)
            kernel.accumulate_grad(gk)
        if inp.requires_grad:
            gpad = np.zeros_like(padded)
            for k, sl in offset_slices:
                gpad[sl] += np.einsum("...ob,co->...cb", g, kdata[k])
            if any(spec.padding):
                unpad = tuple(slice(p, p + n) for p, n in zip(spec.padding, in_sp))
                gpad = gpad[unpad]
            inp.accumulate_grad(gpad)
        if bias is not None and bias.requires_grad:
            axes = tuple(range(rank)) + (rank + 1,)
            bias.accumulate_grad(g.sum(axis=axes))

    parents = (inp, kernel) if bias is None else (inp, kernel, bias)
    return from_op(out, parents, "conv", bwd)


def trelu_np(z: np.ndarray) -> np.ndarray:
    """Plain-array clamp to [0, 1], for code paths outside the graph."""
    return np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)


def trelu(z) -> Tensor:
    """Clamp to [0, 1]: z on [0,1], 0 below, 1 above.

    The gradient is 1 strictly inside (0, 1) and 0 elsewhere, including at
    the kinks z = 0 and z = 1 themselves.
    """
    z = as_tensor(z)
    out = np.clip(z.data, 0.0, 1.0)
    inside = (z.data > 0.0) & (z.data < 1.0)

    def bwd(g):
        z.accumulate_grad(g * inside)

    return from_op(out, (z,), "trelu", bwd)


def relu(z) -> Tensor:
    z = as_tensor(z)
    out = np.maximum(z.data, 0.0)
    pos = z.data > 0.0

    def bwd(g):
        z.accumulate_grad(g * pos)

    return from_op(out, (z,), "relu", bwd)


def sigmoid(z) -> Tensor:
    """Numerically stable logistic function 1 / (1 + exp(-z))."""
    z = as_tensor(z)
    x = z.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        z.accumulate_grad(g * out * (1.0 - out))

    return from_op(out, (z,), "sigmoid", bwd)


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    gamma/beta are graph leaves owned by the model registry; the running
    mean and variance are plain buffers mutated only in training mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, epsilon: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batchnorm(inp, state: BatchNormState, training: bool) -> Tensor:
    """Normalize per channel over batch+spatial axes, then apply gamma/beta.

    Training mode uses batch statistics (biased variance) and updates the
    running buffers; inference mode normalizes with the running buffers.
    """
    inp = as_tensor(inp)
    if inp.ndim < 2 or inp.shape[-2] != state.channels:
        raise ShapeError(
            f"batchnorm: input shape {inp.shape} does not carry {state.channels} channels")
    axes = tuple(i for i in range(inp.ndim) if i != inp.ndim - 2)
    n = int(np.prod([inp.shape[i] for i in axes]))
    gamma, beta = state.gamma, state.beta
    cshape = (1,) * (inp.ndim - 2) + (state.channels, 1)

    if training:
        if n < 2:
            raise ShapeError("batchnorm: training mode needs >= 2 elements per channel")
        mean = inp.data.mean(axis=axes)
        var = inp.data.var(axis=axes)
        # in place so checkpoint views of these buffers stay live
        state.running_mean[:] = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var[:] = state.momentum * state.running_var + (1 - state.momentum) * var
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        norm = (inp.data - mean.reshape(cshape)) * inv_std.reshape(cshape)
        out = gamma.data.reshape(cshape) * norm + beta.data.reshape(cshape)

        def bwd(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * norm).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=axes))
            if inp.requires_grad:
                gn = g * gamma.data.reshape(cshape)
                mean_gn = gn.mean(axis=axes).reshape(cshape)
                mean_gn_norm = (gn * norm).mean(axis=axes).reshape(cshape)
                gx = inv_std.reshape(cshape) * (gn - mean_gn - norm * mean_gn_norm)
                inp.accumulate_grad(gx)

    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        scale = (gamma.data * inv_std).reshape(cshape)
        shift = (beta.data - gamma.data * state.running_mean * inv_std).reshape(cshape)
        out = inp.data * scale + shift
        norm = (inp.data - state.running_mean.reshape(cshape)) * inv_std.reshape(cshape)

        def bwd(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * norm).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=axes))
            if inp.requires_grad:
                inp.accumulate_grad(g * scale)

    return from_op(out, (inp, gamma, beta), "batchnorm", bwd)


def _factors(rank: int, factor) -> tuple[int, ...]:
    if isinstance(factor, int):
        return (factor,) * rank
    f = tuple(int(x) for x in factor)
    if len(f) != rank:
        raise ShapeError(f"factor needs {rank} entries, got {len(f)}")
    return f


def maxpool(inp, factor=2) -> Tensor:
    """Non-overlapping window maxima; each spatial extent must divide its factor.

    Gradient mass within a window is split evenly across tied maxima.
    """
    inp = as_tensor(inp)
    rank = inp.ndim - 2
    fs = _factors(rank, factor)
    sp = inp.shape[:rank]
    for n, f in zip(sp, fs):
        if n % f != 0:
            raise ShapeError(f"maxpool: extent {n} not divisible by factor {f}")
    out_sp = tuple(n // f for n, f in zip(sp, fs))
    blocked_shape = sum(((o, f) for o, f in zip(out_sp, fs)), ()) + inp.shape[rank:]
    pool_axes = tuple(2 * i + 1 for i in range(rank))
    blocked = inp.data.reshape(blocked_shape)
    out = blocked.max(axis=pool_axes)

    def bwd(g):
        expand = out
        for ax in pool_axes:
            expand = np.expand_dims(expand, ax)
        mask = (blocked == expand).astype(np.float64)
        ties = mask.sum(axis=pool_axes, keepdims=True)
        gexp = g
        for ax in pool_axes:
            gexp = np.expand_dims(gexp, ax)
        ginp = (mask / ties) * gexp
        inp.accumulate_grad(ginp.reshape(inp.shape))

    return from_op(out, (inp,), "maxpool", bwd)


def upsample_nearest(inp, factor=2) -> Tensor:
    """Repeat each element ``factor`` times along every spatial axis."""
    inp = as_tensor(inp)
    rank = inp.ndim - 2
    fs = _factors(rank, factor)
    out = inp.data
    for ax, f in enumerate(fs):
        out = np.repeat(out, f, axis=ax)
    sp = inp.shape[:rank]

    def bwd(g):
        blocked_shape = sum(((n, f) for n, f in zip(sp, fs)), ()) + inp.shape[rank:]
        pool_axes = tuple(2 * i + 1 for i in range(rank))
        inp.accumulate_grad(g.reshape(blocked_shape).sum(axis=pool_axes))

    return from_op(out, (inp,), "upsample", bwd)


def concat_channels(a, b) -> Tensor:
    """Stack b's channels after a's; spatial and batch extents must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} differ "
                         "outside the channel axis")
    ca = a.shape[-2]
    out = np.concatenate([a.data, b.data], axis=-2)

    def bwd(g):
        a.accumulate_grad(g[..., :ca, :])
        b.accumulate_grad(g[..., ca:, :])

    return from_op(out, (a, b), "concat", bwd)


def slice_channels(inp, start: int, stop: int) -> Tensor:
    """Take the half-open channel range [start, stop)."""
    inp = as_tensor(inp)
    c = inp.shape[-2]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: range [{start}, {stop}) invalid for {c} channels")
    out = inp.data[..., start:stop, :].copy()

    def bwd(g):
        full = np.zeros_like(inp.data)
        full[..., start:stop, :] = g
        inp.accumulate_grad(full)

    return from_op(out, (inp,), "slice", bwd)
