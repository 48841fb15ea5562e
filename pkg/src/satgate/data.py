"""Synthetic segmentation data, tensor files, and checkpoints.

Synthetic samples are blobs (filled disks/balls) or rings (annular shells)
on a zero background, lifted to `contrast` and corrupted with Gaussian
noise; masks mark the shape support exactly and are nonempty by
construction.

Two little-endian binary formats:

  tensor file  "SATT"  magic, version u16, dtype u8 (0=f64, 1=u8), ndim u8,
                       ndim x u32 dims, row-major payload.
  checkpoint   "SATC"  magic, version u16, u32 header length, UTF-8
                       key=value header (architecture, seeds, optimizer
                       scalars, shuffle-rng state), then a named parameter
                       table and a named optimizer-buffer table, each
                       entry a u16-length name plus an embedded tensor
                       record.

All writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .gate import GateVariant
from .networks import ArchSpec, Model, build_model
from .training import Adadelta, SGDMomentum

__all__ = [
    "SyntheticSpec",
    "SegSample",
    "generate_synthetic",
    "disk_mask",
    "ring_mask",
    "save_tensor",
    "load_tensor",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointBundle",
    "TensorFileError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "CheckpointMismatchError",
]


class TensorFileError(ValueError):
    """Malformed tensor file or checkpoint."""


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class CheckpointMismatchError(ValueError):
    """Checkpoint disagrees with the expected architecture or registry."""


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic dataset."""

    spatial_rank: int = 2
    extent: int = 32
    n_samples: int = 1
    shapes: tuple[str, ...] = ("blobs",)
    noise_sigma: float = 0.3
    contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ValueError("spatial_rank must be 2 or 3")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.shapes or any(s not in ("blobs", "rings") for s in self.shapes):
            raise ValueError(f"shapes must be a nonempty subset of "
                             f"('blobs', 'rings'), got {self.shapes}")
        if self.extent < 8:
            raise ValueError("extent must be >= 8")
        if "rings" in self.shapes and self.extent < 16:
            raise ValueError("rings need extent >= 16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class SegSample:
    """One [spatial..., 1] image and its binary mask of the same shape."""

    image: np.ndarray
    mask: np.ndarray


def _distance_grid(shape: tuple[int, ...], center) -> np.ndarray:
    axes = np.ogrid[tuple(slice(0, n) for n in shape)]
    sq = sum((ax - float(c)) ** 2 for ax, c in zip(axes, center))
    return np.sqrt(sq)


def disk_mask(shape: tuple[int, ...], center, radius: float) -> np.ndarray:
    """Boolean filled disk/ball: Euclidean distance from center <= radius."""
    return _distance_grid(shape, center) <= radius


def ring_mask(shape: tuple[int, ...], center, r_inner: float,
              r_outer: float) -> np.ndarray:
    """Boolean annulus/shell: r_inner < distance <= r_outer."""
    d = _distance_grid(shape, center)
    return (d > r_inner) & (d <= r_outer)


def generate_synthetic(spec: SyntheticSpec) -> list[SegSample]:
    """Deterministic samples from one generator stream seeded by spec.seed.

    Per sample, in draw order: shape kind (only when both kinds are
    enabled), one integer center coordinate per axis, the radius, then the
    noise field. Radii and center margins guarantee the shape lies inside
    the volume and covers at least one grid cell.
    """
    rng = np.random.default_rng(spec.seed)
    vol_shape = (spec.extent,) * spec.spatial_rank
    r_max = spec.extent // 4
    lo, hi = r_max + 1, spec.extent - r_max - 1
    samples = []
    for _ in range(spec.n_samples):
        kind = spec.shapes[0]
        if len(spec.shapes) > 1:
            kind = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        center = tuple(int(c) for c in rng.integers(lo, hi, size=spec.spatial_rank))
        if kind == "blobs":
            radius = float(rng.uniform(1.5, r_max))
            mask = disk_mask(vol_shape, center, radius)
        else:
            r_outer = float(rng.uniform(3.0, r_max))
            r_inner = min(r_outer - 1.5, 0.6 * r_outer)
            mask = ring_mask(vol_shape, center, r_inner, r_outer)
        m = mask.astype(np.float64)
        noise = rng.normal(0.0, spec.noise_sigma, size=vol_shape)
        image = spec.contrast * m + noise
        samples.append(SegSample(image=image[..., np.newaxis],
                                 mask=m[..., np.newaxis]))
    return samples


# ---------------------------------------------------------------------------
# tensor file format


_TENSOR_MAGIC = b"SATT"
_CKPT_MAGIC = b"SATC"
_FORMAT_VERSION = 1
_DTYPE_BY_CODE = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_CODE_BY_KIND = {"f64": 0, "u8": 1}


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


def tensor_record(array, kind: str = "f64") -> bytes:
    """Serialize an array as one self-delimiting tensor record."""
    if kind not in _CODE_BY_KIND:
        raise ValueError(f"unsupported dtype kind {kind!r}")
    a = np.asarray(array.data if hasattr(array, "data") and not
                   isinstance(array, np.ndarray) else array)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim > 255:
        raise ValueError("too many dimensions")
    if kind == "u8":
        if not np.all((a == np.floor(a)) & (a >= 0) & (a <= 255)):
            raise ValueError("u8 tensor values must be integers in [0, 255]")
        payload = np.ascontiguousarray(a, dtype="u1").tobytes()
    else:
        payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
    head = _TENSOR_MAGIC + struct.pack("<HBB", _FORMAT_VERSION,
                                       _CODE_BY_KIND[kind], a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + payload


def parse_tensor_record(buf: bytes, offset: int = 0,
                        context: str = "tensor file") -> tuple[np.ndarray, int]:
    """Parse one tensor record at `offset`; returns (array, next offset)."""
    if len(buf) - offset < 8:
        raise TruncatedPayloadError(f"{context}: header truncated")
    magic = buf[offset:offset + 4]
    if magic != _TENSOR_MAGIC:
        raise BadMagicError(f"{context}: bad magic {magic!r}, "
                            f"expected {_TENSOR_MAGIC!r}")
    version, code, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    if version != _FORMAT_VERSION:
        raise VersionMismatchError(f"{context}: version {version}, "
                                   f"this reader handles {_FORMAT_VERSION}")
    if code not in _DTYPE_BY_CODE:
        raise TensorFileError(f"{context}: unknown dtype code {code}")
    if ndim < 1:
        raise TensorFileError(f"{context}: zero-dimensional record")
    dims_at = offset + 8
    if len(buf) - dims_at < 4 * ndim:
        raise TruncatedPayloadError(f"{context}: dimension list truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, dims_at)
    if any(d < 1 for d in dims):
        raise TensorFileError(f"{context}: zero extent in dims {dims}")
    dtype = _DTYPE_BY_CODE[code]
    need = int(np.prod(dims)) * dtype.itemsize
    start = dims_at + 4 * ndim
    if len(buf) - start < need:
        raise TruncatedPayloadError(f"{context}: payload needs {need} bytes, "
                                    f"only {len(buf) - start} present")
    arr = np.frombuffer(buf[start:start + need], dtype=dtype).reshape(dims)
    return arr.copy(), start + need


def save_tensor(path: str, tensor, kind: str = "f64") -> None:
    """Write one tensor per file."""
    _atomic_write(path, tensor_record(tensor, kind))


def load_tensor(path: str) -> np.ndarray:
    """Read a tensor file; u8 payloads come back as float64 values."""
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = parse_tensor_record(buf, 0, context=os.path.basename(path))
    if end != len(buf):
        raise TensorFileError(f"{os.path.basename(path)}: {len(buf) - end} "
                              f"trailing bytes after payload")
    return arr.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(samples: list[SegSample], out_dir: str,
                 spec: SyntheticSpec | None = None) -> None:
    """Write img_NNNN.satt / msk_NNNN.satt pairs plus manifest.txt."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# image mask"]
    if spec is not None:
        lines = [f"# rank={spec.spatial_rank} extent={spec.extent} "
                 f"samples={spec.n_samples} shapes={','.join(spec.shapes)} "
                 f"noise_sigma={spec.noise_sigma!r} contrast={spec.contrast!r} "
                 f"seed={spec.seed}"] + lines
    for i, s in enumerate(samples):
        img, msk = f"img_{i:04d}.satt", f"msk_{i:04d}.satt"
        save_tensor(os.path.join(out_dir, img), s.image)
        save_tensor(os.path.join(out_dir, msk), s.mask)
        lines.append(f"{img} {msk}")
    _atomic_write(os.path.join(out_dir, "manifest.txt"),
                  ("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(data_dir: str) -> list[SegSample]:
    """Read every image/mask pair listed in manifest.txt (or found by name)."""
    manifest = os.path.join(data_dir, "manifest.txt")
    pairs = []
    if os.path.exists(manifest):
        with open(manifest, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                img, msk = line.split()
                pairs.append((img, msk))
    else:
        for name in sorted(os.listdir(data_dir)):
            if name.startswith("img_") and name.endswith(".satt"):
                pairs.append((name, "msk_" + name[4:]))
    if not pairs:
        raise FileNotFoundError(f"no image/mask pairs found in {data_dir}")
    samples = []
    for img, msk in pairs:
        image = load_tensor(os.path.join(data_dir, img))
        mask = load_tensor(os.path.join(data_dir, msk))
        if image.shape != mask.shape:
            raise TensorFileError(f"{img}: image shape {image.shape} does not "
                                  f"match mask shape {mask.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise TensorFileError(f"{msk}: mask is not binary")
        samples.append(SegSample(image=image, mask=mask))
    return samples


# ---------------------------------------------------------------------------
# checkpoints


_ARCH_KEYS = ("family", "spatial_rank", "depth", "base_channels",
              "channel_growth", "dense_block_layers", "gate_variant",
              "in_channels", "out_classes")


@dataclass
class CheckpointBundle:
    """Everything load_checkpoint restores."""

    model: Model
    optimizer: object | None
    rng: np.random.Generator | None
    next_epoch: int | None


def _arch_header(spec: ArchSpec, seed: int) -> list[str]:
    lines = []
    for key in _ARCH_KEYS:
        value = getattr(spec, key)
        if isinstance(value, GateVariant):
            value = value.value
        lines.append(f"arch.{key}={value}")
    lines.append(f"model.seed={seed}")
    return lines


def save_checkpoint(path: str, model: Model, optimizer=None,
                    rng: np.random.Generator | None = None,
                    next_epoch: int | None = None) -> None:
    """Write the model registry (and optionally optimizer/rng/progress)."""
    lines = _arch_header(model.spec, model.seed)
    if optimizer is not None:
        lines.append(f"optimizer.kind={optimizer.kind}")
        for key, value in optimizer.scalars().items():
            lines.append(f"optimizer.{key}={value!r}")
    if rng is not None:
        state = rng.bit_generator.state
        if state["bit_generator"] != "PCG64":
            raise ValueError("only PCG64 generators can be checkpointed")
        lines.append(f"rng.state={state['state']['state']}")
        lines.append(f"rng.inc={state['state']['inc']}")
        lines.append(f"rng.has_uint32={state['has_uint32']}")
        lines.append(f"rng.uinteger={state['uinteger']}")
    if next_epoch is not None:
        lines.append(f"train.next_epoch={next_epoch}")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    chunks = [_CKPT_MAGIC, struct.pack("<HI", _FORMAT_VERSION, len(header)), header]
    params = model.parameters()
    chunks.append(struct.pack("<I", len(params)))
    for p in params:
        chunks.append(_named_record(p.name, p.data))
    buffers = optimizer.buffers() if optimizer is not None else []
    chunks.append(struct.pack("<I", len(buffers)))
    for name, arr in buffers:
        chunks.append(_named_record(name, arr))
    _atomic_write(path, b"".join(chunks))


def _named_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long: {name!r}")
    return struct.pack("<H", len(raw)) + raw + tensor_record(arr)


def _parse_named(buf: bytes, offset: int, context: str) -> tuple[str, np.ndarray, int]:
    if len(buf) - offset < 2:
        raise TruncatedPayloadError(f"{context}: name length truncated")
    (nlen,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    if len(buf) - offset < nlen:
        raise TruncatedPayloadError(f"{context}: name truncated")
    name = buf[offset:offset + nlen].decode("utf-8")
    arr, offset = parse_tensor_record(buf, offset + nlen, context=f"{context}:{name}")
    return name, arr, offset


def load_checkpoint(path: str,
                    expect_spec: ArchSpec | None = None) -> CheckpointBundle:
    """Rebuild the model (and optimizer/rng when present) bit-exactly.

    With `expect_spec`, the stored architecture must match it; the error
    names the first key that differs.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    context = os.path.basename(path)
    if len(buf) < 10:
        raise TruncatedPayloadError(f"{context}: header truncated")
    if buf[:4] != _CKPT_MAGIC:
        raise BadMagicError(f"{context}: bad magic {buf[:4]!r}, "
                            f"expected {_CKPT_MAGIC!r}")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != _FORMAT_VERSION:
        raise VersionMismatchError(f"{context}: version {version}, "
                                   f"this reader handles {_FORMAT_VERSION}")
    if len(buf) - 10 < hlen:
        raise TruncatedPayloadError(f"{context}: header truncated")
    fields = {}
    for line in buf[10:10 + hlen].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            fields[key] = value

    spec = _spec_from_fields(fields, context)
    if expect_spec is not None:
        for key in _ARCH_KEYS:
            have, want = getattr(spec, key), getattr(expect_spec, key)
            if have != want:
                raise CheckpointMismatchError(
                    f"{context}: arch.{key} is {have!r}, expected {want!r}")
    seed = int(fields["model.seed"])
    model = build_model(spec, seed)

    offset = 10 + hlen
    if len(buf) - offset < 4:
        raise TruncatedPayloadError(f"{context}: parameter count truncated")
    (n_params,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    registry = model.parameters()
    if n_params != len(registry):
        raise CheckpointMismatchError(f"{context}: {n_params} stored parameters, "
                                      f"model has {len(registry)}")
    for p in registry:
        name, arr, offset = _parse_named(buf, offset, context)
        if name != p.name:
            raise CheckpointMismatchError(f"{context}: parameter {name!r} where "
                                          f"{p.name!r} expected")
        if arr.shape != p.data.shape:
            raise CheckpointMismatchError(f"{context}: {name} has shape "
                                          f"{arr.shape}, expected {p.data.shape}")
        p.data[...] = arr

    optimizer = _restore_optimizer(fields, model, buf, offset, context)
    rng = None
    if "rng.state" in fields:
        bg = np.random.PCG64()
        bg.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(fields["rng.state"]),
                      "inc": int(fields["rng.inc"])},
            "has_uint32": int(fields["rng.has_uint32"]),
            "uinteger": int(fields["rng.uinteger"]),
        }
        rng = np.random.Generator(bg)
    next_epoch = (int(fields["train.next_epoch"])
                  if "train.next_epoch" in fields else None)
    return CheckpointBundle(model=model, optimizer=optimizer, rng=rng,
                            next_epoch=next_epoch)


def _spec_from_fields(fields: dict, context: str) -> ArchSpec:
    try:
        return ArchSpec(
            family=fields["arch.family"],
            spatial_rank=int(fields["arch.spatial_rank"]),
            depth=int(fields["arch.depth"]),
            base_channels=int(fields["arch.base_channels"]),
            channel_growth=int(fields["arch.channel_growth"]),
            dense_block_layers=int(fields["arch.dense_block_layers"]),
            gate_variant=GateVariant.parse(fields["arch.gate_variant"]),
            in_channels=int(fields["arch.in_channels"]),
            out_classes=int(fields["arch.out_classes"]),
        )
    except KeyError as missing:
        raise CheckpointMismatchError(f"{context}: header missing {missing}") from None


def _restore_optimizer(fields, model, buf, offset, context):
    if len(buf) - offset < 4:
        raise TruncatedPayloadError(f"{context}: optimizer count truncated")
    (n_buffers,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    stored = {}
    for _ in range(n_buffers):
        name, arr, offset = _parse_named(buf, offset, context)
        stored[name] = arr
    if offset != len(buf):
        raise TensorFileError(f"{context}: {len(buf) - offset} trailing bytes")
    kind = fields.get("optimizer.kind")
    if kind is None:
        return None
    scalars = {key[len("optimizer."):]: float(value)
               for key, value in fields.items()
               if key.startswith("optimizer.") and key != "optimizer.kind"}
    if kind == "adadelta":
        optimizer = Adadelta(model.parameters())
    elif kind == "sgd_momentum":
        optimizer = SGDMomentum(model.parameters())
    else:
        raise CheckpointMismatchError(f"{context}: unknown optimizer {kind!r}")
    optimizer.set_scalars(scalars)
    for name, arr in optimizer.buffers():
        if name not in stored:
            raise CheckpointMismatchError(f"{context}: optimizer buffer "
                                          f"{name!r} missing")
        if stored[name].shape != arr.shape:
            raise CheckpointMismatchError(f"{context}: optimizer buffer {name} "
                                          f"has shape {stored[name].shape}, "
                                          f"expected {arr.shape}")
        arr[...] = stored[name]
    return optimizer
