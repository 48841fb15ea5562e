"""Segmentation metrics, gate-sparsity reporting, and grayscale map export.

Dice, FPR, and FNR are computed from hard confusion counts over every
element of a mask pair. Empty-denominator conventions make all three total:
dice is 1 when both masks are empty, fpr is 0 without negatives, fnr is 0
without positives.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError
from .gate import channels_off
from .ops import trelu_np

__all__ = [
    "ConfusionCounts",
    "binarize",
    "dice_fpr_fnr",
    "sparsity_report",
    "export_gray_image",
]


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_binary(a: np.ndarray, label: str) -> None:
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{label} is not binary (values other than 0/1 present)")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_masks(cls, pred, gt) -> "ConfusionCounts":
        p, g = _as_array(pred), _as_array(gt)
        if p.shape != g.shape:
            raise ShapeError(f"confusion counts: prediction shape {p.shape} "
                             f"does not match ground truth shape {g.shape}")
        _check_binary(p, "prediction")
        _check_binary(g, "ground truth")
        p, g = p.astype(bool), g.astype(bool)
        return cls(tp=int(np.sum(p & g)), fp=int(np.sum(p & ~g)),
                   tn=int(np.sum(~p & ~g)), fn=int(np.sum(~p & g)))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """Hard mask: 1 where prob >= threshold, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p = _as_array(probs)
    return (p >= threshold).astype(np.float64)


def dice_fpr_fnr(pred, gt) -> dict[str, float]:
    """Dice, false-positive rate, and false-negative rate of a binary pair."""
    c = ConfusionCounts.from_masks(pred, gt)
    dice = 1.0 if c.tp + c.fp + c.fn == 0 else 2.0 * c.tp / (2 * c.tp + c.fp + c.fn)
    fpr = 0.0 if c.fp + c.tn == 0 else c.fp / (c.fp + c.tn)
    fnr = 0.0 if c.fn + c.tp == 0 else c.fn / (c.fn + c.tp)
    return {"dice": dice, "fpr": fpr, "fnr": fnr}


def sparsity_report(model) -> list[dict]:
    """Per selection gate: channel count, fraction off, 10-bin histogram.

    The histogram bins the clipped weights trelu(W) over [0, 1]; bin counts
    sum to the gate's channel count.
    """
    report = []
    for g in model.gates:
        if g.select_weights is None:
            continue
        w = g.select_weights.data
        clipped = trelu_np(w)
        hist, _ = np.histogram(clipped, bins=10, range=(0.0, 1.0))
        report.append({
            "gate": g.name,
            "channels": int(w.size),
            "channels_off": channels_off(w),
            "histogram": [int(h) for h in hist],
        })
    if not report:
        raise ValueError("sparsity_report: no gate carries selection weights "
                         "(variant without selection)")
    return report


def export_gray_image(values, path: str) -> list[str]:
    """Write a [0,1]-valued map as binary 8-bit PGM (P5), byte = round(255*v).

    Rounding is half-up (0.5 -> 128). A 2-rank map writes `path` itself; a
    3-rank map writes its central slice along each axis to three files with
    _ax0/_ax1/_ax2 inserted before the extension. Returns the paths written.
    """
    a = _as_array(values)
    # drop trailing channel/batch axes of extent 1
    while a.ndim > 2 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim not in (2, 3):
        raise ShapeError(f"export_gray_image: need a 2- or 3-rank spatial map "
                         f"after dropping unit axes, got shape {a.shape}")
    if a.size == 0 or np.min(a) < 0.0 or np.max(a) > 1.0:
        raise ValueError("export_gray_image: values must lie in [0, 1]")
    if a.ndim == 2:
        _write_pgm(a, path)
        return [path]
    stem, ext = os.path.splitext(path)
    ext = ext or ".pgm"
    written = []
    for axis in range(3):
        mid = a.shape[axis] // 2
        sl = np.take(a, mid, axis=axis)
        slice_path = f"{stem}_ax{axis}{ext}"
        _write_pgm(sl, slice_path)
        written.append(slice_path)
    return written


def _write_pgm(a: np.ndarray, path: str) -> None:
    rows, cols = a.shape
    body = np.floor(255.0 * a + 0.5).astype(np.uint8)
    payload = f"P5\n{cols} {rows}\n255\n".encode("ascii") + body.tobytes()
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
