"""Miniature encoder-decoder segmentation networks with gated skip connections.

Three families share one resampling scheme (maxpool down, nearest-neighbour
up) and 3^rank conv + batchnorm + ReLU blocks:

  unet     - two conv blocks per level.
  vnet     - same topology, but each level is a residual stage: the second
             conv's output is added back onto the first block's output
             before the activation.
  tiramisu - dense blocks whose layers each concatenate onto the running
             feature stack; the block-input long skip passes through a gate
             before rejoining the block output.

Every encoder-to-decoder skip carries a gate; for tiramisu each dense block
additionally gates its internal long skip. Decoder concatenations put the
gate payload first.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, add as t_add, no_grad
from .ops import (
    BatchNormState,
    ConvSpec,
    batchnorm,
    concat_channels,
    conv_nd,
    maxpool,
    relu,
    upsample_nearest,
)
from .gate import GateParams, GateVariant, gate_forward, transfer_channels
from .training import glorot_uniform

__all__ = [
    "ArchSpec",
    "Model",
    "build_model",
    "forward",
    "count_params",
    "concat_input_width",
    "reference_spec",
    "FAMILIES",
]

FAMILIES = ("unet", "vnet", "tiramisu")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture hyperparameters; out_classes is pinned to 1 (binary masks)."""

    family: str
    spatial_rank: int = 2
    depth: int = 3
    base_channels: int = 8
    channel_growth: int = 2
    dense_block_layers: int = 2
    gate_variant: GateVariant = GateVariant.SAT
    in_channels: int = 1
    out_classes: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.spatial_rank not in (2, 3):
            raise ValueError("spatial_rank must be 2 or 3")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if min(self.base_channels, self.channel_growth, self.dense_block_layers,
               self.in_channels) < 1:
            raise ValueError("channel counts and block layers must be positive")
        if self.out_classes != 1:
            raise ValueError("out_classes is fixed to 1")

    @property
    def pool_total(self) -> int:
        return 2 ** (self.depth - 1)


def reference_spec(family: str, variant: GateVariant | str,
                   spatial_rank: int = 2) -> ArchSpec:
    """The fixed desk-scale configuration used by the CLI and experiments."""
    if isinstance(variant, str):
        variant = GateVariant.parse(variant)
    return ArchSpec(family=family, spatial_rank=spatial_rank, depth=3,
                    base_channels=8, channel_growth=2, dense_block_layers=2,
                    gate_variant=variant)


def concat_input_width(variant: GateVariant, c_skip: int, c_decoder: int) -> int:
    """Channel width entering the conv right after a decoder concatenation."""
    if c_skip < 1 or c_decoder < 1:
        raise ValueError("channel counts must be positive")
    return transfer_channels(variant, c_skip) + c_decoder


class ConvBlock:
    """conv -> optional batchnorm -> optional ReLU, with registered parameters."""

    def __init__(self, model: "Model", name: str, cin: int, cout: int, ksize: int,
                 rng: np.random.Generator, with_bn: bool = True, act: bool = True):
        rank = model.spec.spatial_rank
        self.spec = ConvSpec(spatial_rank=rank, kernel_extent=(ksize,) * rank,
                             in_channels=cin, out_channels=cout,
                             padding=((ksize - 1) // 2,) * rank)
        receptive = ksize ** rank
        kdata = glorot_uniform(receptive * cin, receptive * cout,
                               self.spec.kernel_shape, rng).data
        self.kernel = model.register(f"{name}.kernel",
                                     Tensor(kdata, requires_grad=True))
        self.bias = model.register(f"{name}.bias",
                                   Tensor(np.zeros(cout), requires_grad=True))
        self.bn = None
        if with_bn:
            self.bn = BatchNormState.create(cout)
            model.register(f"{name}.bn.gamma", self.bn.gamma)
            model.register(f"{name}.bn.beta", self.bn.beta)
            model.register(f"{name}.bn.running_mean", Tensor(self.bn.running_mean),
                           trainable=False)
            model.register(f"{name}.bn.running_var", Tensor(self.bn.running_var),
                           trainable=False)
        self.act = act

    def __call__(self, x, training: bool):
        y = conv_nd(x, self.kernel.tensor, self.spec, self.bias.tensor)
        if self.bn is not None:
            y = batchnorm(y, self.bn, training)
        if self.act:
            y = relu(y)
        return y


class DenseBlock:
    """Stack of conv blocks, each fed the concatenation of everything before it.

    The block input re-enters the output through its gate (the long skip);
    the fresh layer outputs follow it in the concatenation.
    """

    def __init__(self, model: "Model", name: str, cin: int, rng: np.random.Generator):
        spec = model.spec
        growth = spec.base_channels
        self.layers = []
        c = cin
        for j in range(spec.dense_block_layers):
            self.layers.append(ConvBlock(model, f"{name}.layer{j}", c, growth, 3, rng))
            c += growth
        self.gate = model.add_gate(f"{name}.gate", cin, rng)
        self.out_channels = (transfer_channels(spec.gate_variant, cin)
                             + spec.dense_block_layers * growth)

    def __call__(self, x, training: bool, capture=None):
        stack = x
        fresh = []
        for layer in self.layers:
            y = layer(stack, training)
            fresh.append(y)
            stack = concat_channels(stack, y)
        out = _apply_gate(self.gate, x, capture)
        for y in fresh:
            out = concat_channels(out, y)
        return out


def _apply_gate(gate: GateParams, x, capture=None):
    gout = gate_forward(x, gate.variant, gate)
    if capture is not None:
        capture[f"{gate.name}.payload"] = gout.transferred
        capture[f"{gate.name}.f_s"] = gout.f_s
        if gout.f_a is not None:
            capture[f"{gate.name}.f_a"] = gout.f_a
    return gout.transferred


class Model:
    """A built network: parameter registry, gate registry, and layer structure."""

    def __init__(self, spec: ArchSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self.gates: list[GateParams] = []

    def register(self, name: str, tensor: Tensor, trainable: bool = True) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, tensor, trainable)
        self.params[name] = p
        return p

    def add_gate(self, name: str, channels: int, rng: np.random.Generator) -> GateParams:
        gate = GateParams.create(name, self.spec.gate_variant, channels,
                                 self.spec.spatial_rank, rng)
        for p in gate.parameters():
            if p.name in self.params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self.params[p.name] = p
        self.gates.append(gate)
        return gate

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def forward(self, x, training: bool = False, capture=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        rank = self.spec.spatial_rank
        if x.ndim != rank + 2:
            raise ShapeError(f"forward: input must have rank {rank + 2} "
                             f"(spatial x channel x batch), got shape {x.shape}")
        if x.shape[-2] != self.spec.in_channels:
            raise ShapeError(f"forward: input has {x.shape[-2]} channels, "
                             f"spec wants {self.spec.in_channels}")
        for n in x.shape[:rank]:
            if n % self.spec.pool_total != 0:
                raise ShapeError(f"forward: spatial extent {n} not divisible by "
                                 f"{self.spec.pool_total}")
        if training:
            return self._forward(x, True, capture)
        with no_grad():
            return self._forward(x, False, capture)

    def _forward(self, x, training, capture):
        if self.spec.family == "tiramisu":
            return self._forward_tiramisu(x, training, capture)
        return self._forward_unet(x, training, capture)

    def _forward_unet(self, x, training, capture):
        residual = self.spec.family == "vnet"
        skips = []
        h = x
        for i, (b1, b2) in enumerate(self.enc):
            h = _stage(b1, b2, h, training, residual)
            if capture is not None:
                capture[f"enc{i}"] = h
            skips.append(h)
            h = maxpool(h, 2)
        h = _stage(self.bottom[0], self.bottom[1], h, training, residual)
        for i in reversed(range(len(self.enc))):
            h = upsample_nearest(h, 2)
            payload = _apply_gate(self.skip_gates[i], skips[i], capture)
            h = concat_channels(payload, h)
            h = _stage(self.dec[i][0], self.dec[i][1], h, training, residual)
        return self.head(h, training)

    def _forward_tiramisu(self, x, training, capture):
        h = self.stem(x, training)
        skips = []
        for i, (block, td) in enumerate(zip(self.enc_blocks, self.td)):
            h = block(h, training, capture)
            if capture is not None:
                capture[f"enc{i}"] = h
            skips.append(h)
            h = maxpool(td(h, training), 2)
        h = self.bottom_block(h, training, capture)
        for i in reversed(range(len(self.enc_blocks))):
            h = upsample_nearest(h, 2)
            payload = _apply_gate(self.skip_gates[i], skips[i], capture)
            h = concat_channels(payload, h)
            h = self.dec_blocks[i](h, training, capture)
        return self.head(h, training)


def _stage(b1: ConvBlock, b2: ConvBlock, x, training: bool, residual: bool):
    h1 = b1(x, training)
    h2 = b2(h1, training)
    if residual:
        return relu(t_add(h2, h1))
    return h2


def build_model(spec: ArchSpec, seed: int) -> Model:
    """Deterministically construct and initialize a model from its spec."""
    rng = np.random.default_rng(seed)
    model = Model(spec, seed)
    if spec.family in ("unet", "vnet"):
        _build_unet(model, rng)
    else:
        _build_tiramisu(model, rng)
    return model


def _level_channels(spec: ArchSpec, level: int) -> int:
    return spec.base_channels * spec.channel_growth ** level


def _build_unet(model: Model, rng) -> None:
    spec = model.spec
    residual = spec.family == "vnet"
    # second block skips its activation in residual stages; relu runs after the add
    act2 = not residual
    model.enc = []
    cin = spec.in_channels
    for i in range(spec.depth - 1):
        c = _level_channels(spec, i)
        b1 = ConvBlock(model, f"enc{i}.conv0", cin, c, 3, rng)
        b2 = ConvBlock(model, f"enc{i}.conv1", c, c, 3, rng, act=act2)
        model.enc.append((b1, b2))
        cin = c
    c = _level_channels(spec, spec.depth - 1)
    model.bottom = (ConvBlock(model, "bottom.conv0", cin, c, 3, rng),
                    ConvBlock(model, "bottom.conv1", c, c, 3, rng, act=act2))
    model.skip_gates = [
        model.add_gate(f"gate.skip{i}", _level_channels(spec, i), rng)
        for i in range(spec.depth - 1)
    ]
    model.dec = []
    dec_blocks: dict[int, tuple] = {}
    for i in reversed(range(spec.depth - 1)):
        c = _level_channels(spec, i)
        below = _level_channels(spec, i + 1)
        width = concat_input_width(spec.gate_variant, c, below)
        b1 = ConvBlock(model, f"dec{i}.conv0", width, c, 3, rng)
        b2 = ConvBlock(model, f"dec{i}.conv1", c, c, 3, rng, act=act2)
        dec_blocks[i] = (b1, b2)
    model.dec = [dec_blocks[i] for i in range(spec.depth - 1)]
    model.head = ConvBlock(model, "head", _level_channels(spec, 0), 1, 1, rng,
                           with_bn=False, act=False)


def _build_tiramisu(model: Model, rng) -> None:
    spec = model.spec
    model.stem = ConvBlock(model, "stem", spec.in_channels, spec.base_channels, 3, rng)
    c = spec.base_channels
    model.enc_blocks = []
    model.td = []
    enc_out = []
    for i in range(spec.depth - 1):
        block = DenseBlock(model, f"enc{i}", c, rng)
        model.enc_blocks.append(block)
        c = block.out_channels
        enc_out.append(c)
        model.td.append(ConvBlock(model, f"td{i}", c, c, 1, rng))
    model.bottom_block = DenseBlock(model, "bottom", c, rng)
    c = model.bottom_block.out_channels
    model.skip_gates = []
    dec_blocks: dict[int, DenseBlock] = {}
    skip_gates: dict[int, GateParams] = {}
    for i in reversed(range(spec.depth - 1)):
        skip_gates[i] = model.add_gate(f"gate.skip{i}", enc_out[i], rng)
        width = concat_input_width(spec.gate_variant, enc_out[i], c)
        block = DenseBlock(model, f"dec{i}", width, rng)
        dec_blocks[i] = block
        c = block.out_channels
    model.skip_gates = [skip_gates[i] for i in range(spec.depth - 1)]
    model.dec_blocks = [dec_blocks[i] for i in range(spec.depth - 1)]
    model.head = ConvBlock(model, "head", c, 1, 1, rng, with_bn=False, act=False)


def forward(model: Model, x, training: bool = False, capture=None) -> Tensor:
    """Run the model on [spatial..., C, B] input; returns pre-sigmoid logits."""
    return model.forward(x, training=training, capture=capture)


def count_params(model: Model) -> dict:
    """Exact trainable parameter count, total plus per-layer groups."""
    per_layer: dict[str, int] = {}
    total = 0
    for p in model.parameters():
        if not p.trainable:
            continue
        layer = p.name.rsplit(".", 1)[0]
        n = int(np.prod(p.data.shape))
        per_layer[layer] = per_layer.get(layer, 0) + n
        total += n
    return {"total": total, "per_layer": per_layer}
