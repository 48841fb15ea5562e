"""Initialization, optimizers, segmentation losses, and the training loop.

ADADELTA is the default optimizer (lr 1, rho 0.95, eps 1e-8, decay 0);
SGD with momentum is kept as an alternative. The default loss is soft Dice
with smoothing 1, computed on sigmoid probabilities; mean binary
cross-entropy on logits is the alternative.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    NotFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    div,
    from_op,
    mul,
    no_grad,
    sub,
    sum_all,
    zero_grads,
)
from .ops import sigmoid
from .metrics import dice_fpr_fnr, binarize
from .gate import channels_off

__all__ = [
    "glorot_uniform",
    "AdadeltaState",
    "adadelta_step",
    "Adadelta",
    "SGDMomentum",
    "make_optimizer",
    "dice_loss",
    "bce_loss",
    "TrainConfig",
    "TrainHistory",
    "train",
    "evaluate",
    "stack_batch",
]

OPTIMIZERS = ("adadelta", "sgd_momentum")
LOSSES = ("dice", "bce")


def glorot_uniform(fan_in: int, fan_out: int, shape, rng: np.random.Generator) -> Tensor:
    """Uniform samples on [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be >= 1, got {fan_in}, {fan_out}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=tuple(shape)))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdadeltaState:
    """Per-parameter accumulators plus the update hyperparameters.

    avg_sq_grad tracks E[g^2], avg_sq_update tracks E[dx^2]; `steps` counts
    completed updates and only matters when `decay` (per-step learning-rate
    decay, 1/(1 + decay*steps)) is nonzero.
    """

    avg_sq_grad: np.ndarray
    avg_sq_update: np.ndarray
    rho: float = 0.95
    epsilon: float = 1e-8
    lr: float = 1.0
    decay: float = 0.0
    steps: int = 0

    @classmethod
    def create(cls, shape, rho: float = 0.95, epsilon: float = 1e-8,
               lr: float = 1.0, decay: float = 0.0) -> "AdadeltaState":
        return cls(np.zeros(shape), np.zeros(shape), rho, epsilon, lr, decay)


def adadelta_step(param: np.ndarray, grad: np.ndarray, state: AdadeltaState) -> np.ndarray:
    """Apply one ADADELTA update in place; returns the updated parameter.

    E[g^2]  <- rho*E[g^2]  + (1-rho)*g^2
    dx      = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho*E[dx^2] + (1-rho)*dx^2
    param   <- param + lr*dx
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ShapeError(f"adadelta_step: gradient shape {grad.shape} does not "
                         f"match parameter shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NotFiniteError("adadelta_step: non-finite gradient")
    rho, eps = state.rho, state.epsilon
    state.avg_sq_grad *= rho
    state.avg_sq_grad += (1.0 - rho) * grad * grad
    dx = -np.sqrt(state.avg_sq_update + eps) / np.sqrt(state.avg_sq_grad + eps) * grad
    state.avg_sq_update *= rho
    state.avg_sq_update += (1.0 - rho) * dx * dx
    lr = state.lr / (1.0 + state.decay * state.steps)
    param += lr * dx
    state.steps += 1
    return param


class Adadelta:
    """ADADELTA over a parameter list, one accumulator pair per parameter."""

    kind = "adadelta"

    def __init__(self, parameters: list[Parameter], lr: float = 1.0,
                 rho: float = 0.95, epsilon: float = 1e-8, decay: float = 0.0):
        self.parameters = [p for p in parameters if p.trainable]
        self.lr, self.rho, self.epsilon, self.decay = lr, rho, epsilon, decay
        self.state: dict[str, AdadeltaState] = {
            p.name: AdadeltaState.create(p.data.shape, rho, epsilon, lr, decay)
            for p in self.parameters
        }

    def step(self) -> None:
        for p in self.parameters:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            adadelta_step(p.data, g, self.state[p.name])

    def zero_grad(self) -> None:
        zero_grads(self.parameters)

    def scalars(self) -> dict[str, float]:
        """Hyperparameters and counters that a checkpoint must carry."""
        steps = self.state[self.parameters[0].name].steps if self.parameters else 0
        return {"lr": self.lr, "rho": self.rho, "epsilon": self.epsilon,
                "decay": self.decay, "steps": float(steps)}

    def set_scalars(self, values: dict[str, float]) -> None:
        self.lr = values["lr"]
        self.rho = values["rho"]
        self.epsilon = values["epsilon"]
        self.decay = values["decay"]
        for s in self.state.values():
            s.lr, s.rho, s.epsilon = self.lr, self.rho, self.epsilon
            s.decay, s.steps = self.decay, int(values["steps"])

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        """Accumulator arrays in registry order, for bit-exact persistence."""
        out = []
        for p in self.parameters:
            s = self.state[p.name]
            out.append((f"{p.name}.avg_sq_grad", s.avg_sq_grad))
            out.append((f"{p.name}.avg_sq_update", s.avg_sq_update))
        return out


class SGDMomentum:
    """Classic momentum: v <- momentum*v + g; param <- param - lr*v."""

    kind = "sgd_momentum"

    def __init__(self, parameters: list[Parameter], lr: float = 0.1,
                 momentum: float = 0.9):
        self.parameters = [p for p in parameters if p.trainable]
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {
            p.name: np.zeros_like(p.data) for p in self.parameters
        }

    def step(self) -> None:
        for p in self.parameters:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NotFiniteError(f"sgd step: non-finite gradient for {p.name}")
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data[...] -= self.lr * v

    def zero_grad(self) -> None:
        zero_grads(self.parameters)

    def scalars(self) -> dict[str, float]:
        return {"lr": self.lr, "momentum": self.momentum}

    def set_scalars(self, values: dict[str, float]) -> None:
        self.lr = values["lr"]
        self.momentum = values["momentum"]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{p.name}.velocity", self.velocity[p.name])
                for p in self.parameters]


def make_optimizer(cfg: "TrainConfig", parameters: list[Parameter]):
    if cfg.optimizer == "adadelta":
        return Adadelta(parameters)
    return SGDMomentum(parameters, lr=cfg.sgd_lr, momentum=cfg.momentum)


# ---------------------------------------------------------------------------
# losses


def dice_loss(logits: Tensor, target) -> Tensor:
    """1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1), p = sigmoid(logits)."""
    logits = as_tensor(logits)
    target = as_tensor(target)
    if target.shape != logits.shape:
        raise ShapeError(f"dice_loss: target shape {target.shape} does not "
                         f"match logits shape {logits.shape}")
    one = Tensor(np.ones(1))
    two = Tensor(np.full(1, 2.0))
    p = sigmoid(logits)
    intersection = sum_all(mul(p, target))
    numer = add(mul(two, intersection), one)
    denom = add(add(sum_all(p), sum_all(target)), one)
    return sub(one, div(numer, denom))


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits, in the stable log-sum-exp form."""
    logits = as_tensor(logits)
    target = as_tensor(target)
    if target.shape != logits.shape:
        raise ShapeError(f"bce_loss: target shape {target.shape} does not "
                         f"match logits shape {logits.shape}")
    z, t = logits.data, target.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = np.array([per.mean()])
    n = z.size

    def bwd(g):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        logits.accumulate_grad(g.reshape(()) * (p - t) / n)

    return from_op(value, (logits,), "bce_loss", bwd)


LOSS_FNS = {"dice": dice_loss, "bce": bce_loss}


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adadelta"
    loss: str = "dice"
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    momentum: float = 0.9
    sgd_lr: float = 0.1

    def __post_init__(self):
        if self.optimizer == "sgd":
            object.__setattr__(self, "optimizer", "sgd_momentum")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainHistory:
    """Per-epoch records; one channels_off column per gate, in gate order."""

    gate_names: list[str]
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return (["epoch", "train_loss", "val_dice", "val_fpr", "val_fnr"]
                + [f"channels_off.{g}" for g in self.gate_names])

    def to_csv(self, path: str) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            cells = []
            for c in self.columns:
                v = row[c]
                cells.append(str(v) if c == "epoch" else repr(float(v)))
            lines.append(",".join(cells))
        payload = ("\n".join(lines) + "\n").encode("utf-8")
        _atomic_write(path, payload)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack [spatial..., C] samples into one [spatial..., C, B] batch pair."""
    x = np.stack([s.image for s in samples], axis=-1)
    y = np.stack([s.mask for s in samples], axis=-1)
    return x, y


def evaluate(model, samples, threshold: float = 0.5,
             chunk: int = 8) -> tuple[list[dict], dict]:
    """Per-sample dice/fpr/fnr plus their means, in inference mode.

    Samples are forwarded in chunks purely for speed; every op treats the
    batch axis independently, so the per-sample numbers do not depend on
    the chunking.
    """
    per_sample = []
    with no_grad():
        for lo in range(0, len(samples), chunk):
            x, y = stack_batch(samples[lo:lo + chunk])
            logits = model.forward(x, training=False)
            probs = sigmoid(logits).data
            pred = binarize(probs, threshold)
            for b in range(y.shape[-1]):
                per_sample.append(dice_fpr_fnr(pred[..., b], y[..., b]))
    means = {k: float(np.mean([r[k] for r in per_sample]))
             for k in ("dice", "fpr", "fnr")}
    return per_sample, means


def gate_sparsity(model) -> dict[str, float]:
    """channels_off per gate; gates without selection weights report 0."""
    out = {}
    for g in model.gates:
        if g.select_weights is not None:
            out[g.name] = channels_off(g.select_weights.data)
        else:
            out[g.name] = 0.0
    return out


def train(model, train_samples, val_samples, cfg: TrainConfig,
          optimizer=None, rng: np.random.Generator | None = None,
          start_epoch: int = 0, log=None) -> TrainHistory:
    """Optimize `model`; returns one history row per epoch.

    Deterministic given cfg.seed: the per-epoch shuffle is the only
    randomness. Pass `optimizer`/`rng`/`start_epoch` to continue a run
    restored from a checkpoint. A non-finite loss aborts immediately.
    """
    if len(train_samples) == 0:
        raise ValueError("train: empty training set")
    if len(val_samples) == 0:
        raise ValueError("train: empty validation set")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if optimizer is None:
        optimizer = make_optimizer(cfg, model.parameters())
    loss_fn = LOSS_FNS[cfg.loss]
    history = TrainHistory([g.name for g in model.gates])
    n = len(train_samples)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + cfg.batch_size]]
            x, y = stack_batch(batch)
            optimizer.zero_grad()
            logits = model.forward(x, training=True)
            loss = loss_fn(logits, Tensor(y))
            value = loss.item()
            if not np.isfinite(value):
                raise NotFiniteError(f"training diverged: loss {value!r} at "
                                     f"epoch {epoch}, batch {batches}")
            loss.backward()
            optimizer.step()
            total += value
            batches += 1
        _, val = evaluate(model, val_samples)
        row = {"epoch": epoch, "train_loss": total / batches,
               "val_dice": val["dice"], "val_fpr": val["fpr"],
               "val_fnr": val["fnr"]}
        for name, frac in gate_sparsity(model).items():
            row[f"channels_off.{name}"] = frac
        history.rows.append(row)
        if log is not None:
            log(f"epoch {epoch}: train_loss {row['train_loss']:.4f} "
                f"val_dice {val['dice']:.4f}")
    return history
