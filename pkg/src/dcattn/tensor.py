"""Dense 4-axis tensor value type plus elementwise/padding/comparison primitives.

Layout is fixed to (batch, channel, height, width), row-major with width
fastest. Tensors are immutable after construction and every public operation
validates that its result is finite, so NaN/Inf never propagate silently.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DtypeError, FormatError, NonFiniteError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_TAGS = {"f32": 0, "f64": 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}

_MAGIC = b"DCAT"


def _dtype_name(np_dtype) -> str:
    if np_dtype == np.float32:
        return "f32"
    if np_dtype == np.float64:
        return "f64"
    raise DtypeError(f"unsupported dtype {np_dtype}; expected f32 or f64")


class Tensor:
    """Immutable (n, c, h, w) array of f32 or f64 with all-finite values."""

    __slots__ = ("array",)

    def __init__(self, array, dtype: str | None = None):
        arr = np.asarray(array)
        if dtype is not None:
            if dtype not in DTYPES:
                raise DtypeError(f"unknown dtype {dtype!r}")
            arr = arr.astype(DTYPES[dtype], copy=False)
        if arr.dtype not in (np.float32, np.float64):
            raise DtypeError(f"unsupported dtype {arr.dtype}; expected f32 or f64")
        if arr.ndim != 4:
            raise ShapeError(f"tensor must have 4 axes (n,c,h,w), got {arr.ndim}")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.array.shape

    @property
    def dtype(self) -> str:
        return _dtype_name(self.array.dtype)

    @property
    def size(self) -> int:
        return self.array.size

    def numpy(self) -> np.ndarray:
        """Read-only ndarray view of the data."""
        return self.array

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.array.reshape(-1)[0])

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.array, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def tensor_filled(shape, value: float, dtype: str = "f64") -> Tensor:
    """Tensor of the given shape with every element equal to `value`."""
    if len(shape) != 4:
        raise ShapeError(f"shape must have 4 extents, got {shape}")
    if any(e < 1 for e in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if dtype not in DTYPES:
        raise DtypeError(f"unknown dtype {dtype!r}")
    return Tensor(np.full(shape, value, dtype=DTYPES[dtype]))


def zeros_like(x: Tensor) -> Tensor:
    return tensor_filled(x.shape, 0.0, x.dtype)


def ones_like(x: Tensor) -> Tensor:
    return tensor_filled(x.shape, 1.0, x.dtype)


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise DtypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def elementwise_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Componentwise add or mul of two same-shape, same-dtype tensors."""
    _check_pair(a, b)
    if kind == "add":
        return Tensor(a.array + b.array)
    if kind == "mul":
        return Tensor(a.array * b.array)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise_binary(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise_binary(a, b, "mul")


def pad_zero(x: Tensor, pad: int) -> Tensor:
    """Grow h and w by `pad` zero pixels on each side."""
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return x
    out = np.pad(x.array, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return Tensor(out)


def crop_border(x: Tensor, pad: int) -> Tensor:
    """Inverse of pad_zero: drop `pad` pixels from each spatial side."""
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return x
    n, c, h, w = x.shape
    if h <= 2 * pad or w <= 2 * pad:
        raise ShapeError(f"cannot crop {pad} from spatial extents {(h, w)}")
    return Tensor(x.array[:, :, pad:h - pad, pad:w - pad])


def allclose(a: Tensor, b: Tensor, atol: float = 0.0, rtol: float = 0.0) -> tuple[bool, float]:
    """Elementwise |a-b| <= atol + rtol*|b| check; also reports max |a-b|."""
    _check_pair(a, b)
    diff = np.abs(a.array.astype(np.float64) - b.array.astype(np.float64))
    max_abs_err = float(diff.max())
    ok = bool((diff <= atol + rtol * np.abs(b.array.astype(np.float64))).all())
    return ok, max_abs_err


# --- binary serialization -------------------------------------------------
#
# Record layout (little-endian): magic "DCAT", u8 dtype tag (0=f32, 1=f64),
# four u32 extents (n,c,h,w), then the raw row-major buffer.

_HEADER = struct.Struct("<4sB4I")


def tensor_to_bytes(t: Tensor) -> bytes:
    head = _HEADER.pack(_MAGIC, _DTYPE_TAGS[t.dtype], *t.shape)
    body = np.ascontiguousarray(t.array, dtype="<" + ("f4" if t.dtype == "f32" else "f8"))
    return head + body.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one record starting at `offset`; returns (tensor, bytes consumed)."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated tensor record (header)")
    magic, tag, n, c, h, w = _HEADER.unpack_from(buf, offset)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    itemsize = 4 if dtype == "f32" else 8
    count = n * c * h * w
    body_len = count * itemsize
    start = offset + _HEADER.size
    if len(buf) - start < body_len:
        raise FormatError("truncated tensor record (body)")
    flat = np.frombuffer(buf, dtype="<" + ("f4" if dtype == "f32" else "f8"),
                         count=count, offset=start)
    try:
        t = Tensor(flat.reshape(n, c, h, w).copy())
    except (ShapeError, NonFiniteError) as e:
        raise FormatError(f"invalid tensor payload: {e}") from e
    return t, _HEADER.size + body_len


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        buf = f.read()
    t, used = tensor_from_bytes(buf)
    if used != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor record")
    return t
