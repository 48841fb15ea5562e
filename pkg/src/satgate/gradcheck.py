"""Finite-difference verification of every differentiable op.

Each check builds a small random problem (elements in [-2, 2], steered away
from activation kinks by a 1e-3 margin), backpropagates a random linear
functional of the output, and compares every input/parameter gradient
against central differences with eps 1e-6. A component passes when the
relative error is below 1e-5, or the absolute error is below 1e-8 where the
numeric reference is smaller than 1e-6.

The suite ends with a whole-model check: a depth-3 gated U-Net (SAT) on an
8x8 batch, sampling a few components of every trainable parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    div as t_div,
    ewise,
    finite_diff_grad,
    mul,
    no_grad,
    sum_all,
)
from .ops import (
    BatchNormState,
    ConvSpec,
    batchnorm,
    concat_channels,
    conv_nd,
    maxpool,
    relu,
    sigmoid,
    slice_channels,
    trelu,
    upsample_nearest,
)
from .gate import GateParams, GateVariant, attend, gate_forward, select
from .training import bce_loss, dice_loss
from .networks import build_model, reference_spec

__all__ = ["CheckResult", "run_checks", "CHECK_NAMES", "EPS", "RTOL"]

EPS = 1e-6
RTOL = 1e-5
ATOL = 1e-8
SMALL = 1e-6
MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    worst_rel: float
    passed: bool


class _Collector:
    """Accumulates (analytic, numeric) gradient pairs for one check."""

    def __init__(self):
        self.analytic = []
        self.numeric = []

    def pair(self, analytic, numeric):
        self.analytic.append(np.ravel(analytic))
        self.numeric.append(np.ravel(numeric))

    def result(self, name: str) -> CheckResult:
        a = np.concatenate(self.analytic)
        n = np.concatenate(self.numeric)
        big = np.abs(n) >= SMALL
        diff = np.abs(a - n)
        rel = diff[big] / np.abs(n)[big]
        worst = float(rel.max()) if rel.size else 0.0
        ok = bool(np.all(rel < RTOL)) and bool(np.all(diff[~big] < ATOL))
        return CheckResult(name, worst, ok)


def _away(rng, shape, kinks=(), margin=MARGIN, lo=-2.0, hi=2.0):
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.where(x[near] >= k, 2 * margin, -2 * margin)
    return x


def _functional(y: Tensor, c: np.ndarray) -> Tensor:
    return sum_all(mul(y, Tensor(c)))


def _check_unary(rng, name, fn, kinks=()):
    x = Tensor(_away(rng, (4, 5, 3, 2), kinks), requires_grad=True)
    with no_grad():
        out_shape = fn(Tensor(x.data.copy())).shape
    c = rng.uniform(-1, 1, size=out_shape)
    _functional(fn(x), c).backward()
    col = _Collector()
    col.pair(x.grad, finite_diff_grad(lambda t: _functional(fn(t), c), x, EPS).data)
    return col.result(name)


def _check_elemwise(rng, kind):
    col = _Collector()
    # same-shape operands, then a per-channel vector second operand
    # (div is same-shape only; its denominators stay away from zero)
    b_shapes = [(4, 3, 2)] if kind == "div" else [(4, 3, 2), (3,)]
    op = (lambda t, u: t_div(t, u)) if kind == "div" else (lambda t, u: ewise(kind, t, u))
    for b_shape in b_shapes:
        a = Tensor(rng.uniform(-2, 2, (4, 3, 2)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, b_shape) * rng.choice([-1.0, 1.0], b_shape),
                   requires_grad=True)
        c = rng.uniform(-1, 1, (4, 3, 2))
        _functional(op(a, b), c).backward()
        col.pair(a.grad, finite_diff_grad(lambda t: _functional(op(t, b), c), a, EPS).data)
        col.pair(b.grad, finite_diff_grad(lambda u: _functional(op(a, u), c), b, EPS).data)
    return col.result(kind)


def _check_sum(rng):
    x = Tensor(rng.uniform(-2, 2, (3, 4, 2)), requires_grad=True)
    sum_all(x).backward()
    col = _Collector()
    col.pair(x.grad, finite_diff_grad(lambda t: sum_all(t), x, EPS).data)
    return col.result("sum")


def _check_conv(rng, rank):
    col = _Collector()
    if rank == 2:
        configs = [
            ((6, 5, 3, 2), ConvSpec(2, (3, 3), 3, 4, padding=(1, 1))),
            ((6, 6, 2, 2), ConvSpec(2, (3, 3), 2, 3, stride=(2, 2), padding=(1, 1))),
            ((5, 5, 3, 1), ConvSpec(2, (1, 1), 3, 2, has_bias=False)),
        ]
    else:
        configs = [
            ((4, 4, 4, 2, 2), ConvSpec(3, (3, 3, 3), 2, 3, padding=(1, 1, 1))),
            ((4, 4, 4, 2, 1), ConvSpec(3, (1, 1, 1), 2, 1, has_bias=False)),
        ]
    for in_shape, spec in configs:
        x = Tensor(rng.uniform(-2, 2, in_shape), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, spec.kernel_shape), requires_grad=True)
        b = (Tensor(rng.uniform(-1, 1, (spec.out_channels,)), requires_grad=True)
             if spec.has_bias else None)
        out_shape = spec.out_extent(in_shape[:rank]) + (spec.out_channels, in_shape[-1])
        c = rng.uniform(-1, 1, out_shape)
        run = lambda t, kk, bb: _functional(conv_nd(t, kk, spec, bb), c)
        run(x, k, b).backward()
        col.pair(x.grad, finite_diff_grad(lambda t: run(t, k, b), x, EPS).data)
        col.pair(k.grad, finite_diff_grad(lambda kk: run(x, kk, b), k, EPS).data)
        if b is not None:
            col.pair(b.grad, finite_diff_grad(lambda bb: run(x, k, bb), b, EPS).data)
    return col.result(f"conv{rank}d")


def _check_batchnorm(rng):
    state = BatchNormState.create(3)
    state.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    state.beta.data[...] = rng.uniform(-0.5, 0.5, 3)
    x = Tensor(rng.uniform(-2, 2, (4, 4, 3, 2)), requires_grad=True)
    state.gamma.requires_grad = state.beta.requires_grad = True
    c = rng.uniform(-1, 1, x.shape)
    run = lambda: _functional(batchnorm(x, state, training=True), c)
    run().backward()
    col = _Collector()
    col.pair(x.grad, finite_diff_grad(lambda t: _functional(
        batchnorm(t, state, True), c), x, EPS).data)
    col.pair(state.gamma.grad, finite_diff_grad(lambda g: _functional(
        batchnorm(x, _with(state, gamma=g), True), c), state.gamma, EPS).data)
    col.pair(state.beta.grad, finite_diff_grad(lambda b: _functional(
        batchnorm(x, _with(state, beta=b), True), c), state.beta, EPS).data)
    return col.result("batchnorm")


def _with(state: BatchNormState, gamma=None, beta=None) -> BatchNormState:
    out = BatchNormState(gamma=gamma if gamma is not None else state.gamma,
                         beta=beta if beta is not None else state.beta,
                         running_mean=state.running_mean,
                         running_var=state.running_var,
                         momentum=state.momentum, epsilon=state.epsilon)
    return out


def _check_maxpool(rng):
    n = 8 * 8 * 2 * 2
    vals = rng.permutation(np.linspace(-2.0, 2.0, n)).reshape(8, 8, 2, 2)
    x = Tensor(vals, requires_grad=True)  # evenly spaced: no near-ties
    c = rng.uniform(-1, 1, (4, 4, 2, 2))
    run = lambda t: _functional(maxpool(t, 2), c)
    run(x).backward()
    col = _Collector()
    col.pair(x.grad, finite_diff_grad(run, x, EPS).data)
    return col.result("maxpool")


def _check_upsample(rng):
    return _check_unary(rng, "upsample", lambda t: upsample_nearest(t, 2))


def _check_concat(rng):
    a = Tensor(rng.uniform(-2, 2, (4, 4, 2, 2)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 4, 3, 2)), requires_grad=True)
    c = rng.uniform(-1, 1, (4, 4, 5, 2))
    run = lambda t, u: _functional(concat_channels(t, u), c)
    run(a, b).backward()
    col = _Collector()
    col.pair(a.grad, finite_diff_grad(lambda t: run(t, b), a, EPS).data)
    col.pair(b.grad, finite_diff_grad(lambda u: run(a, u), b, EPS).data)
    return col.result("concat")


def _check_slice(rng):
    x = Tensor(rng.uniform(-2, 2, (4, 4, 5, 2)), requires_grad=True)
    c = rng.uniform(-1, 1, (4, 4, 2, 2))
    run = lambda t: _functional(slice_channels(t, 1, 3), c)
    run(x).backward()
    col = _Collector()
    col.pair(x.grad, finite_diff_grad(run, x, EPS).data)
    return col.result("slice")


def _select_weights(rng, channels):
    # interior values plus some fully off/on, all a safe margin from 0 and 1
    w = rng.uniform(0.1, 0.9, channels)
    w[rng.uniform(size=channels) < 0.25] = -0.5
    w[rng.uniform(size=channels) < 0.25] = 1.5
    return w


def _check_select(rng):
    f = Tensor(rng.uniform(-2, 2, (4, 4, 6, 2)), requires_grad=True)
    w = Tensor(_select_weights(rng, 6), requires_grad=True)
    c = rng.uniform(-1, 1, f.shape)
    run = lambda t, u: _functional(select(t, u), c)
    run(f, w).backward()
    col = _Collector()
    col.pair(f.grad, finite_diff_grad(lambda t: run(t, w), f, EPS).data)
    col.pair(w.grad, finite_diff_grad(lambda u: run(f, u), w, EPS).data)
    return col.result("select")


def _check_attend(rng):
    f = Tensor(rng.uniform(-2, 2, (4, 4, 3, 2)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (1, 1, 3, 1)), requires_grad=True)
    c = rng.uniform(-1, 1, (4, 4, 1, 2))
    run = lambda t, kk: _functional(attend(t, kk), c)
    run(f, k).backward()
    col = _Collector()
    col.pair(f.grad, finite_diff_grad(lambda t: run(t, k), f, EPS).data)
    col.pair(k.grad, finite_diff_grad(lambda kk: run(f, kk), k, EPS).data)
    return col.result("attend")


def _check_gate(rng):
    params = GateParams.create("g", GateVariant.SAT, 5, 2, rng)
    params.select_weights.data[...] = rng.uniform(0.2, 0.8, 5)
    f = Tensor(rng.uniform(-2, 2, (4, 4, 5, 2)), requires_grad=True)
    w, k = params.select_weights.tensor, params.attend_kernel.tensor
    c = rng.uniform(-1, 1, (4, 4, 1, 2))
    run = lambda: _functional(gate_forward(f, GateVariant.SAT, params).transferred, c)
    run().backward()
    col = _Collector()
    for t in (f, w, k):
        col.pair(t.grad, _fd_tensor(run, t))
    return col.result("gate")


def _check_loss(rng, name, loss_fn):
    logits = Tensor(rng.uniform(-2, 2, (4, 4, 1, 2)), requires_grad=True)
    target = (rng.uniform(size=(4, 4, 1, 2)) < 0.4).astype(np.float64)
    run = lambda t: loss_fn(t, target)
    run(logits).backward()
    col = _Collector()
    col.pair(logits.grad, finite_diff_grad(run, logits, EPS).data)
    return col.result(name)


def _fd_tensor(run, t: Tensor, eps: float = EPS) -> np.ndarray:
    """Full central-difference gradient of a no-arg scalar closure wrt t."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = run().item()
            flat[i] = orig - eps
            lo = run().item()
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return g


def _fd_component(run, t: Tensor, flat_index: int, eps: float = EPS) -> float:
    flat = t.data.reshape(-1)
    with no_grad():
        orig = flat[flat_index]
        flat[flat_index] = orig + eps
        hi = run().item()
        flat[flat_index] = orig - eps
        lo = run().item()
        flat[flat_index] = orig
    return (hi - lo) / (2 * eps)


def _check_mini_unet(rng):
    model = build_model(reference_spec("unet", GateVariant.SAT), seed=7)
    for g in model.gates:
        g.select_weights.data[...] = rng.uniform(0.2, 0.8, g.channels)
    x = Tensor(rng.uniform(-1.0, 1.0, (8, 8, 1, 2)), requires_grad=True)
    c = rng.uniform(-1, 1, (8, 8, 1, 2))
    run = lambda: _functional(model.forward(x, training=True), c)
    run().backward()
    col = _Collector()
    per_tensor = 4
    targets = [(p.name, p.tensor) for p in model.trainable_parameters()]
    targets.append(("input", x))
    for _, t in targets:
        size = t.data.size
        picks = rng.choice(size, size=min(per_tensor, size), replace=False)
        grad = np.zeros(t.data.shape) if t.grad is None else t.grad
        analytic = [grad.reshape(-1)[i] for i in picks]
        numeric = [_fd_component(run, t, int(i)) for i in picks]
        col.pair(np.array(analytic), np.array(numeric))
    return col.result("mini_unet")


def _build_registry():
    return {
        "add": lambda rng: _check_elemwise(rng, "add"),
        "sub": lambda rng: _check_elemwise(rng, "sub"),
        "mul": lambda rng: _check_elemwise(rng, "mul"),
        "div": lambda rng: _check_elemwise(rng, "div"),
        "sum": _check_sum,
        "trelu": lambda rng: _check_unary(rng, "trelu", trelu, kinks=(0.0, 1.0)),
        "relu": lambda rng: _check_unary(rng, "relu", relu, kinks=(0.0,)),
        "sigmoid": lambda rng: _check_unary(rng, "sigmoid", sigmoid),
        "conv2d": lambda rng: _check_conv(rng, 2),
        "conv3d": lambda rng: _check_conv(rng, 3),
        "batchnorm": _check_batchnorm,
        "maxpool": _check_maxpool,
        "upsample": _check_upsample,
        "concat": _check_concat,
        "slice": _check_slice,
        "select": _check_select,
        "attend": _check_attend,
        "gate": _check_gate,
        "dice_loss": lambda rng: _check_loss(rng, "dice_loss", dice_loss),
        "bce_loss": lambda rng: _check_loss(rng, "bce_loss", bce_loss),
        "mini_unet": _check_mini_unet,
    }


CHECK_NAMES = tuple(_build_registry())


def run_checks(seed: int = 0, only: str | None = None) -> list[CheckResult]:
    """Run the suite (or a single named check); deterministic per seed."""
    registry = _build_registry()
    if only is not None:
        if only not in registry:
            raise ValueError(f"unknown op {only!r}; choose from "
                             f"{', '.join(CHECK_NAMES)}")
        names = [only]
    else:
        names = list(CHECK_NAMES)
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng(seed * 1000 + i)
        results.append(registry[name](rng))
    return results
