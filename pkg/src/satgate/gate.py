"""The select-attend-transfer skip-connection gate and its ablations.

A gate sits on a skip connection carrying a feature map f with C channels:

  select:  f_s[..., t] = f[..., t] * trelu(W_t)   (soft channel selection;
           weights clipped to [0, 1], zero turns a channel off entirely)
  attend:  U = K * f_s with a 1x...x1xC kernel, f_a = sigmoid(U)
           (one-channel saliency map, values in (0, 1))
  transfer: the payload handed to the decoder side.

Variants: ORG passes f through untouched; ST stops after select; AT skips
select (all weights pinned to one); SAT runs the full pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, as_tensor, mul
from .ops import ConvSpec, conv_nd, sigmoid, trelu

__all__ = [
    "GateVariant",
    "GateParams",
    "GateOutput",
    "select",
    "attend",
    "gate_forward",
    "channels_off",
    "transfer_channels",
]


class GateVariant(Enum):
    ORG = "org"
    ST = "st"
    AT = "at"
    SAT = "sat"

    @classmethod
    def parse(cls, name) -> "GateVariant":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown gate variant {name!r}; "
                             f"expected one of org, st, at, sat") from None

    @property
    def has_select(self) -> bool:
        return self in (GateVariant.ST, GateVariant.SAT)

    @property
    def has_attend(self) -> bool:
        return self in (GateVariant.AT, GateVariant.SAT)


def transfer_channels(variant: GateVariant, channels: int) -> int:
    """Channel extent of the gate payload for a C-channel skip."""
    return 1 if variant.has_attend else channels


@dataclass
class GateParams:
    """Learnables for one gated skip connection.

    select_weights is the length-C vector W (present for ST/SAT, initialized
    to ones so nothing starts turned off); attend_kernel is the single
    1x...x1xCx1 aggregation kernel K (present for AT/SAT, Glorot-initialized
    with fan_in=C, fan_out=1, no bias).
    """

    name: str
    variant: GateVariant
    channels: int
    spatial_rank: int
    select_weights: Parameter | None = None
    attend_kernel: Parameter | None = None

    @classmethod
    def create(cls, name: str, variant: GateVariant, channels: int,
               spatial_rank: int, rng: np.random.Generator) -> "GateParams":
        if channels < 1:
            raise ValueError("gate needs at least one channel")
        w = k = None
        if variant.has_select:
            w = Parameter(f"{name}.W", Tensor(np.ones(channels), requires_grad=True))
        if variant.has_attend:
            limit = np.sqrt(6.0 / (channels + 1))
            shape = (1,) * spatial_rank + (channels, 1)
            k = Parameter(f"{name}.K",
                          Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True))
        return cls(name, variant, channels, spatial_rank, w, k)

    @property
    def attend_spec(self) -> ConvSpec:
        return ConvSpec(spatial_rank=self.spatial_rank,
                        kernel_extent=(1,) * self.spatial_rank,
                        in_channels=self.channels, out_channels=1, has_bias=False)

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.select_weights, self.attend_kernel) if p is not None]


@dataclass
class GateOutput:
    """transferred is the skip payload; f_s and f_a are kept for inspection."""

    transferred: Tensor
    f_s: Tensor
    f_a: Tensor | None = None


def select(f, weights) -> Tensor:
    """Reweight each channel of f by its clipped selection weight."""
    f, weights = as_tensor(f), as_tensor(weights)
    if weights.ndim != 1:
        raise ShapeError(f"select: weights must be a vector, got shape {weights.shape}")
    if f.ndim < 2 or f.shape[-2] != weights.shape[0]:
        raise ShapeError(f"select: feature map {f.shape} does not carry "
                         f"{weights.shape[0]} channels")
    return mul(f, trelu(weights))


def attend(f_s, kernel, spatial_rank: int | None = None) -> Tensor:
    """Aggregate channels with a 1x...x1 kernel, then squash with sigmoid."""
    f_s, kernel = as_tensor(f_s), as_tensor(kernel)
    rank = f_s.ndim - 2 if spatial_rank is None else spatial_rank
    if kernel.ndim != rank + 2 or kernel.shape[-1] != 1:
        raise ShapeError(f"attend: kernel shape {kernel.shape} is not 1x..x1xCx1")
    c = kernel.shape[-2]
    if f_s.shape[-2] != c:
        raise ShapeError(f"attend: feature map {f_s.shape} does not carry {c} channels")
    spec = ConvSpec(spatial_rank=rank, kernel_extent=(1,) * rank,
                    in_channels=c, out_channels=1, has_bias=False)
    return sigmoid(conv_nd(f_s, kernel, spec))


def gate_forward(f, variant: GateVariant, params: GateParams) -> GateOutput:
    """Apply one gate variant to a skip-connection feature map."""
    f = as_tensor(f)
    if variant.has_select and (params is None or params.select_weights is None):
        raise ValueError(f"variant {variant.value} needs selection weights, "
                         f"but the gate parameters carry none")
    if variant.has_attend and (params is None or params.attend_kernel is None):
        raise ValueError(f"variant {variant.value} needs an attention kernel, "
                         f"but the gate parameters carry none")
    if variant is GateVariant.ORG:
        return GateOutput(transferred=f, f_s=f)
    if variant is GateVariant.ST:
        f_s = select(f, params.select_weights.tensor)
        return GateOutput(transferred=f_s, f_s=f_s)
    if variant is GateVariant.AT:
        f_a = attend(f, params.attend_kernel.tensor, params.spatial_rank)
        return GateOutput(transferred=f_a, f_s=f, f_a=f_a)
    f_s = select(f, params.select_weights.tensor)
    f_a = attend(f_s, params.attend_kernel.tensor, params.spatial_rank)
    return GateOutput(transferred=f_a, f_s=f_s, f_a=f_a)


def channels_off(weights, tol: float = 0.0) -> float:
    """Fraction of selection weights whose clipped value is <= tol."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ShapeError("channels_off: weights must be a nonempty vector")
    if tol < 0:
        raise ValueError("channels_off: tol must be >= 0")
    clipped = np.clip(w, 0.0, 1.0)
    return float(np.count_nonzero(clipped <= tol)) / w.size
